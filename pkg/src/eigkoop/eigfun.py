"""Eigenfunction values on data and their extension to the whole state space."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from .boundary import BoundaryMatrix, OutputPartition
from .dynamics import TrajectoryDataset
from .errors import BranchCutError, DimensionError, ExponentialOverflow, UnsupportedOperation
from .numerics import JordanBlock, jordan_exp, pinv_solve

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAX_RBF_CENTERS = 2000
MAX_RBF_FIT_POINTS = 8000


# --- propagation ----------------------------------------------------------------------

def _check_overflow(lam, Ms, Ts):
    lam = np.asarray(lam, dtype=complex)
    worst = lam.real * Ms * Ts
    if np.any(worst > 700.0):
        j = int(np.argmax(worst))
        raise ExponentialOverflow(f"exp(lambda * {Ms} * Ts) overflows for lambda = {lam[j]}")


def propagate_values(G, eigenvalues, Ts: float, Ms: int) -> np.ndarray:
    """On-data eigenfunction values by the forward recursion ``v_{k+1} = e^{lam Ts} v_k``.

    Returns an ``(N, Mt (Ms+1))`` array whose columns follow dataset sample
    order (trajectory-major, time-minor).
    """
    if isinstance(G, BoundaryMatrix):
        G = G.G
    G = np.asarray(G, dtype=complex)
    lam = np.atleast_1d(np.asarray(eigenvalues, dtype=complex))
    if G.ndim != 2 or G.shape[0] != len(lam):
        raise DimensionError(f"G shape {G.shape} vs {len(lam)} eigenvalues")
    if not np.all(np.isfinite(G)):
        raise ValueError("G has non-finite entries")
    _check_overflow(lam, Ms, Ts)
    mu = np.exp(lam * Ts)[:, None]
    N, Mt = G.shape
    vals = np.empty((N, Mt, Ms + 1), dtype=complex)
    vals[:, :, 0] = G
    with np.errstate(under="ignore"):
        for k in range(Ms):
            vals[:, :, k + 1] = mu * vals[:, :, k]
    return vals.reshape(N, Mt * (Ms + 1))


def propagate_generalized(J: JordanBlock, Gblock, Ts: float, Ms: int) -> np.ndarray:
    """Values of a Jordan chain: ``psi_k = expm(J Ts) psi_{k-1}`` with ``psi_0 = Gblock``.

    Returns ``(J.size, Mt (Ms+1))``; a size-1 block matches
    :func:`propagate_values`.
    """
    Gb = np.atleast_2d(np.asarray(Gblock, dtype=complex))
    if Gb.shape[0] != J.size:
        raise DimensionError(f"Gblock has {Gb.shape[0]} rows, block size is {J.size}")
    if J.size == 1:
        return propagate_values(Gb, [J.lam], Ts, Ms)
    _check_overflow([J.lam], Ms, Ts)
    E = jordan_exp(J, Ts)
    Mt = Gb.shape[1]
    vals = np.empty((J.size, Mt, Ms + 1), dtype=complex)
    vals[:, :, 0] = Gb
    for k in range(Ms):
        vals[:, :, k + 1] = E @ vals[:, :, k]
    return vals.reshape(J.size, Mt * (Ms + 1))


# --- extension models -------------------------------------------------------------

def _cplx_to_json(a):
    a = np.asarray(a, dtype=complex)
    return {"shape": list(a.shape), "re": a.real.ravel().tolist(), "im": a.imag.ravel().tolist()}


def _cplx_from_json(d):
    return (np.array(d["re"], dtype=float) + 1j * np.array(d["im"], dtype=float)).reshape(d["shape"])


class ExtensionModel:
    """Maps states ``(Q, n)`` to values ``(Q, R)`` for ``R`` fitted rows."""

    kind = "abstract"

    def evaluate(self, x) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def from_dict(d: dict) -> "ExtensionModel":
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported extension format version {d.get('version')}")
        cls = {"linear": TriangulatedLinear, "rbf": ThinPlateRBF,
               "nearest": NearestNeighbor}[d["kind"]]
        return cls._from_dict(d)


def _bbox(points):
    return [points.min(axis=0).tolist(), points.max(axis=0).tolist()]


class NearestNeighbor(ExtensionModel):
    kind = "nearest"

    def __init__(self, points, values):
        self.points = np.asarray(points, dtype=float)
        self.values = np.asarray(values, dtype=complex)
        self._tree = cKDTree(self.points)

    def evaluate(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        _, idx = self._tree.query(x)
        return self.values[idx]

    def to_dict(self):
        return {"version": FORMAT_VERSION, "kind": self.kind, "points": self.points.tolist(),
                "values": _cplx_to_json(self.values), "bbox": _bbox(self.points)}

    @classmethod
    def _from_dict(cls, d):
        return cls(np.array(d["points"]), _cplx_from_json(d["values"]))


class TriangulatedLinear(ExtensionModel):
    """Barycentric interpolation on a Delaunay triangulation (2-D states).

    Queries outside the convex hull take the value of the nearest data point.
    """

    kind = "linear"

    def __init__(self, points, values, tri: Optional[Delaunay] = None):
        self.points = np.asarray(points, dtype=float)
        if self.points.shape[1] != 2:
            raise UnsupportedOperation("triangulated-linear extension needs 2-D states")
        self.values = np.asarray(values, dtype=complex)
        self.tri = tri if tri is not None else Delaunay(self.points)
        self._tree = cKDTree(self.points)
        self.outside_hits = 0

    def weights(self, x):
        """Vertex indices ``(Q, 3)`` and barycentric weights ``(Q, 3)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        simplex = self.tri.find_simplex(x)
        inside = simplex >= 0
        idx = np.empty((len(x), 3), dtype=np.intp)
        w = np.zeros((len(x), 3))
        if inside.any():
            s = simplex[inside]
            T = self.tri.transform[s]
            b = np.einsum("qij,qj->qi", T[:, :2, :], x[inside] - T[:, 2, :])
            w[inside] = np.column_stack([b, 1.0 - b.sum(axis=1)])
            idx[inside] = self.tri.simplices[s]
        if not inside.all():
            out = ~inside
            self.outside_hits += int(out.sum())
            log.debug("%d query point(s) outside the hull; using nearest data value", out.sum())
            _, nn = self._tree.query(x[out])
            idx[out] = nn[:, None]
            w[out] = [1.0, 0.0, 0.0]
        return idx, w

    def evaluate(self, x):
        idx, w = self.weights(x)
        return np.einsum("qk,qkr->qr", w, self.values[idx])

    def to_dict(self):
        return {"version": FORMAT_VERSION, "kind": self.kind, "points": self.points.tolist(),
                "simplices": self.tri.simplices.tolist(), "values": _cplx_to_json(self.values),
                "bbox": _bbox(self.points)}

    @classmethod
    def _from_dict(cls, d):
        pts = np.array(d["points"])
        tri = Delaunay(pts)
        if not np.array_equal(tri.simplices, np.array(d["simplices"])):
            raise ValueError("stored triangulation does not match the rebuilt one")
        return cls(pts, _cplx_from_json(d["values"]), tri)


def farthest_point_subsample(points, count: int) -> np.ndarray:
    """Indices of ``count`` points chosen greedily by max-min distance."""
    points = np.asarray(points, dtype=float)
    P = len(points)
    if count >= P:
        return np.arange(P)
    chosen = np.empty(count, dtype=np.intp)
    chosen[0] = 0
    dist = np.sum((points - points[0]) ** 2, axis=1)
    for i in range(1, count):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.sum((points - points[chosen[i]]) ** 2, axis=1))
    return chosen


def _tps(r2):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 0.5 * r2 * np.log(r2)          # r^2 log r
    return np.where(r2 > 0, out, 0.0)


class ThinPlateRBF(ExtensionModel):
    """Thin-plate spline with linear polynomial tail, ridge-fitted."""

    kind = "rbf"

    def __init__(self, centers, coef, shift, scale):
        self.centers = np.asarray(centers, dtype=float)
        self.coef = np.asarray(coef, dtype=complex)
        self.shift = np.asarray(shift, dtype=float)
        self.scale = float(scale)

    def _design(self, x):
        xs = (np.atleast_2d(np.asarray(x, dtype=float)) - self.shift) / self.scale
        cs = (self.centers - self.shift) / self.scale
        r2 = np.sum((xs[:, None, :] - cs[None, :, :]) ** 2, axis=2)
        return np.hstack([_tps(r2), np.ones((len(xs), 1)), xs])

    @classmethod
    def fit(cls, points, values, delta2=0.0, max_centers=MAX_RBF_CENTERS,
            max_fit_points=MAX_RBF_FIT_POINTS):
        points = np.asarray(points, dtype=float)
        values = np.asarray(values, dtype=complex)
        if len(points) > max_fit_points:
            rows = np.linspace(0, len(points) - 1, max_fit_points).round().astype(np.intp)
            points, values = points[rows], values[rows]
        centers = points[farthest_point_subsample(points, max_centers)]
        shift = points.mean(axis=0)
        scale = float(np.max(np.abs(points - shift))) or 1.0
        K, n = centers.shape
        model = cls(centers, np.zeros((K + 1 + n, values.shape[1])), shift, scale)
        design = model._design(points)
        # Radial weights are restricted to the null space of the polynomial
        # tail at the centers (the usual thin-plate side condition), so the
        # affine part is reproduced exactly; only radial weights are ridged.
        Pc = model._design(centers)[:, K:]
        Z = np.linalg.qr(Pc, mode="complete")[0][:, Pc.shape[1]:]
        M = np.hstack([design[:, :K] @ Z, design[:, K:]])
        if delta2 > 0:
            pen = np.hstack([np.sqrt(delta2) * np.eye(Z.shape[1]),
                             np.zeros((Z.shape[1], Pc.shape[1]))])
            M = np.vstack([M, pen])
            values = np.vstack([values, np.zeros((Z.shape[1], values.shape[1]))])
        w = pinv_solve(M, values)
        model.coef = np.vstack([Z @ w[:Z.shape[1]], w[Z.shape[1]:]])
        return model

    def evaluate(self, x):
        return self._design(x) @ self.coef

    def to_dict(self):
        return {"version": FORMAT_VERSION, "kind": self.kind, "centers": self.centers.tolist(),
                "coef": _cplx_to_json(self.coef), "shift": self.shift.tolist(),
                "scale": self.scale}

    @classmethod
    def _from_dict(cls, d):
        return cls(np.array(d["centers"]), _cplx_from_json(d["coef"]), np.array(d["shift"]),
                   d["scale"])


def fit_extension(points, values, kind: str = "auto", delta1: float = 0.0,
                  delta2: float = 0.0) -> ExtensionModel:
    """Extend on-data values (``(P,)`` or ``(P, R)``) to the state space.

    ``kind`` is ``'linear'`` (Delaunay, 2-D only), ``'rbf'``, ``'nearest'`` or
    ``'auto'`` (linear for 2-D states, rbf otherwise). Only the ridge weight
    ``delta2`` is supported; ``delta1`` must be zero.
    """
    if isinstance(points, TrajectoryDataset):
        points = points.samples()
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=complex)
    if values.ndim == 1:
        values = values[:, None]
    elif values.shape[0] != len(points) and values.shape[1] == len(points):
        values = values.T
    if values.shape[0] != len(points):
        raise DimensionError(f"{values.shape[0]} values for {len(points)} points")
    if delta1 != 0:
        raise UnsupportedOperation("l1 regularisation (delta1 > 0) is not supported")
    if kind == "auto":
        kind = "linear" if points.shape[1] == 2 else "rbf"
    if kind == "linear":
        if points.shape[1] != 2:
            raise UnsupportedOperation("triangulated-linear extension requires n = 2")
        try:
            return TriangulatedLinear(points, values)
        except QhullError:
            warnings.warn("degenerate point geometry for triangulation; falling back to rbf")
            kind = "rbf"
    if kind == "rbf":
        return ThinPlateRBF.fit(points, values, delta2)
    if kind == "nearest":
        return NearestNeighbor(points, values)
    raise ValueError(f"unknown extension kind {kind!r}")


# --- eigenfunction sets ---------------------------------------------------------------

@dataclass
class EigenfunctionSet:
    """Eigenfunction values on a dataset plus their off-data extension.

    Attributes
    ----------
    eigenvalues : ndarray, shape (N,)
    values : ndarray, shape (N, Mt (Ms+1))
    jordan_sizes : tuple
        Consecutive row groups forming Jordan chains; all ones for plain
        eigenfunctions.
    products : dict
        ``row -> (indices, powers)`` for rows built from other rows; these
        are not interpolated but recomputed from their factors.
    """

    eigenvalues: np.ndarray
    values: np.ndarray
    Ts: float
    Mt: int
    Ms: int
    partition: Optional[OutputPartition] = None
    jordan_sizes: Tuple[int, ...] = ()
    products: Dict[int, Tuple[tuple, tuple]] = field(default_factory=dict)
    extension: Optional[ExtensionModel] = None

    def __post_init__(self):
        self.eigenvalues = np.atleast_1d(np.asarray(self.eigenvalues, dtype=complex))
        self.values = np.atleast_2d(np.asarray(self.values, dtype=complex))
        if not self.jordan_sizes:
            self.jordan_sizes = (1,) * len(self.eigenvalues)
        if sum(self.jordan_sizes) != len(self.eigenvalues):
            raise DimensionError("jordan_sizes must cover every eigenfunction")
        if self.values.shape != (len(self.eigenvalues), self.Mt * (self.Ms + 1)):
            raise DimensionError(f"values shape {self.values.shape} inconsistent")

    @property
    def N(self) -> int:
        return len(self.eigenvalues)

    @property
    def base_rows(self):
        return [i for i in range(self.N) if i not in self.products]

    @classmethod
    def from_boundary(cls, ds: TrajectoryDataset, bm: BoundaryMatrix) -> "EigenfunctionSet":
        vals = propagate_values(bm, bm.eigenvalues, ds.Ts, ds.Ms)
        return cls(bm.eigenvalues, vals, ds.Ts, ds.Mt, ds.Ms, bm.partition)

    @classmethod
    def from_jordan_blocks(cls, ds: TrajectoryDataset, blocks: Sequence[JordanBlock],
                           Gblocks: Sequence) -> "EigenfunctionSet":
        rows, lams = [], []
        for J, Gb in zip(blocks, Gblocks):
            rows.append(propagate_generalized(J, Gb, ds.Ts, ds.Ms))
            lams.extend([J.lam] * J.size)
        return cls(np.array(lams), np.vstack(rows), ds.Ts, ds.Mt, ds.Ms,
                   jordan_sizes=tuple(J.size for J in blocks))

    def value_cube(self) -> np.ndarray:
        """Values reshaped to ``(N, Mt, Ms+1)``."""
        return self.values.reshape(self.N, self.Mt, self.Ms + 1)

    def with_products(self, specs: Sequence[Tuple[Sequence[int], Sequence[float]]]
                      ) -> "EigenfunctionSet":
        """Append product eigenfunctions ``prod_k phi_{idx_k}^{p_k}``."""
        vals, lams, prods = [self.values], list(self.eigenvalues), dict(self.products)
        current = self
        for idx, pw in specs:
            row, lam = product_eigenfunction(current, idx, pw)
            prods[current.N] = (tuple(int(i) for i in idx), tuple(float(p) for p in pw))
            vals.append(row[None, :])
            lams.append(lam)
            current = EigenfunctionSet(np.array(lams), np.vstack(vals), self.Ts, self.Mt,
                                       self.Ms, None, self.jordan_sizes + (1,) * (len(lams) - self.N),
                                       dict(prods))
        current.extension = self.extension
        return current

    def fit_extensions(self, ds: TrajectoryDataset, kind: str = "auto",
                       delta2: float = 0.0) -> "EigenfunctionSet":
        """Fit one extension model for all base rows (shared geometry)."""
        if (ds.Mt, ds.Ms) != (self.Mt, self.Ms):
            raise DimensionError("dataset does not match eigenfunction values")
        self.extension = fit_extension(ds.samples(), self.values[self.base_rows].T, kind,
                                       delta2=delta2)
        return self

    def evaluate(self, x) -> np.ndarray:
        """Extended eigenfunction vector at ``x`` (``(n,)`` -> ``(N,)``, ``(Q, n)`` -> ``(Q, N)``)."""
        if self.extension is None:
            raise RuntimeError("extensions not fitted; call fit_extensions first")
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        out = np.empty((len(X), self.N), dtype=complex)
        out[:, self.base_rows] = self.extension.evaluate(X)
        for row in sorted(self.products):
            idx, pw = self.products[row]
            acc = np.ones(len(X), dtype=complex)
            for i, p in zip(idx, pw):
                acc = acc * _power(out[:, i], p)
            out[:, row] = acc
        return out[0] if single else out


def _power(v, p):
    if float(p).is_integer():
        return v ** int(p)
    return np.power(v, p)


def product_eigenfunction(set_: EigenfunctionSet, indices, powers):
    """Product of powered on-data rows and its eigenvalue ``sum p_i lam_i``.

    Non-integer powers are rejected when a base value is zero or lies on the
    closed negative real axis, where the principal branch is discontinuous.
    """
    indices = list(indices)
    powers = [float(p) for p in powers]
    if len(indices) != len(powers) or not indices:
        raise ValueError("indices and powers must be nonempty and of equal length")
    if any(p < 0 for p in powers):
        raise ValueError("powers must be nonnegative")
    row = np.ones(set_.values.shape[1], dtype=complex)
    lam = 0j
    for i, p in zip(indices, powers):
        v = set_.values[i]
        if not p.is_integer():
            bad = (v == 0) | ((np.abs(v.imag) <= 1e-15 * np.abs(v)) & (v.real <= 0))
            if np.any(bad):
                raise BranchCutError(f"row {i}: non-integer power {p} across the branch cut")
        row = row * _power(v, p)
        lam += p * set_.eigenvalues[i]
    return row, lam
