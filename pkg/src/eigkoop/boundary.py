"""Optimal boundary-function values on trajectory initial conditions."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .dynamics import TrajectoryDataset
from .errors import DimensionError, IllConditioned
from .numerics import pinv_solve, rank_rtol
from .spectrum import vandermonde

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OutputPartition:
    """Per-output eigenfunction budgets ``N_1, ..., N_nh``."""

    Ni: tuple

    def __post_init__(self):
        object.__setattr__(self, "Ni", tuple(int(v) for v in self.Ni))
        if not self.Ni or any(v < 1 for v in self.Ni):
            raise ValueError(f"every budget must be >= 1, got {self.Ni}")

    @classmethod
    def even(cls, N: int, n_h: int) -> "OutputPartition":
        if N % n_h:
            raise ValueError(f"N={N} does not split evenly over {n_h} outputs")
        return cls((N // n_h,) * n_h)

    @property
    def n_h(self) -> int:
        return len(self.Ni)

    @property
    def N(self) -> int:
        return sum(self.Ni)

    def slices(self):
        out, start = [], 0
        for n in self.Ni:
            out.append(slice(start, start + n))
            start += n
        return out


@dataclass
class BoundaryMatrix:
    """Boundary values ``G[i, j] = g_i(x0^j)`` with one eigenvalue per row."""

    G: np.ndarray
    partition: OutputPartition
    eigenvalues: np.ndarray
    residuals: list = field(default_factory=list)

    def __post_init__(self):
        self.G = np.asarray(self.G, dtype=complex)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=complex)
        if self.G.shape[0] != len(self.eigenvalues) or self.G.shape[0] != self.partition.N:
            raise DimensionError("G rows, eigenvalues and partition disagree")
        if not np.all(np.isfinite(self.G)):
            raise ValueError("G has non-finite entries")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda"] + [f"traj{j}" for j in range(self.G.shape[1])])
            for lam, row in zip(self.eigenvalues, self.G):
                w.writerow([format_complex(lam)] + [format_complex(z) for z in row])

    @staticmethod
    def read_csv(path):
        """Return ``(eigenvalues, G)`` from :meth:`to_csv` output."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        lam = np.array([complex(r[0]) for r in rows])
        G = np.array([[complex(v) for v in r[1:]] for r in rows])
        return lam, G


def format_complex(z) -> str:
    z = complex(z)
    return f"{format(z.real, '.17g')}{format(z.imag, '+.17g')}j"


class VandermondeBlockOperator:
    """Implicit ``L = [L_lam1, ..., L_lamNi]`` with ``L_lam = bdiag(v, ..., v)``.

    The coefficient vector is laid out block by block: all ``Mt`` values for
    the first eigenvalue, then the second, and so on. Outputs are stacked
    trajectory by trajectory.
    """

    def __init__(self, lam, Mt: int, Ms: int, Ts: float):
        self.lam = np.atleast_1d(np.asarray(lam, dtype=complex))
        self.Mt, self.Ms, self.Ts = int(Mt), int(Ms), float(Ts)
        self.V = vandermonde(self.lam, self.Ms, self.Ts)

    @property
    def shape(self):
        return (self.Mt * (self.Ms + 1), self.Mt * len(self.lam))

    def matvec(self, g) -> np.ndarray:
        Gm = np.asarray(g, dtype=complex).reshape(len(self.lam), self.Mt)
        return (self.V @ Gm).T.reshape(-1)

    __matmul__ = matvec

    def dense(self) -> np.ndarray:
        eye = np.eye(self.Mt)
        return np.hstack([np.kron(eye, self.V[:, [j]]) for j in range(len(self.lam))])

    def lstsq(self, h) -> np.ndarray:
        """Minimum-norm least-squares coefficients for stacked targets ``h``."""
        H = np.asarray(h, dtype=complex).reshape(self.Mt, self.Ms + 1).T
        return _vandermonde_lstsq(self.V, H).reshape(-1)


def build_L(lam, Mt: int, Ms: int, Ts: float) -> VandermondeBlockOperator:
    return VandermondeBlockOperator(lam, Mt, Ms, Ts)


def _vandermonde_lstsq(V: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Coefficients (Ni x Mt) for all trajectories from one pivoted QR of V."""
    Q, R, piv = scipy.linalg.qr(V, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size == 0 or d[-1] <= rank_rtol(V.shape) * d[0]:
        return pinv_solve(V, H)
    X = np.empty((V.shape[1], H.shape[1]), dtype=complex)
    X[piv] = scipy.linalg.solve_triangular(R, Q.conj().T @ H)
    return X


def difference_operator(Ms: int, Ts: float) -> np.ndarray:
    """First-order forward differences along one trajectory, scaled by 1/Ts."""
    D = np.zeros((Ms, Ms + 1))
    i = np.arange(Ms)
    D[i, i] = -1.0 / Ts
    D[i, i + 1] = 1.0 / Ts
    return D


@dataclass(frozen=True)
class Regularizer:
    """Temporal-roughness penalty ``alpha * ||D L g||^2``."""

    alpha: float = 0.0


def observable_values(ds: TrajectoryDataset, h) -> np.ndarray:
    """Evaluate ``h`` on every sample; returns ``(Mt, Ms+1, n_h)``.

    ``h`` may be a callable on ``(P, n)`` state arrays or precomputed values.
    """
    if callable(h):
        vals = np.asarray(h(ds.samples()))
        if vals.ndim == 1:
            vals = vals[:, None]
        return vals.reshape(ds.Mt, ds.Ms + 1, -1)
    vals = np.asarray(h)
    if vals.ndim == 2 and vals.shape[0] == ds.Mt * (ds.Ms + 1):
        vals = vals.reshape(ds.Mt, ds.Ms + 1, -1)
    if vals.ndim == 2:
        vals = vals[..., None]
    if vals.shape[:2] != (ds.Mt, ds.Ms + 1):
        raise DimensionError(f"observable values shape {vals.shape} does not match dataset")
    return vals


def optimal_boundary(ds: TrajectoryDataset, h, partition: OutputPartition,
                     eigenvalues: Sequence, regularizer: Optional[Regularizer] = None
                     ) -> BoundaryMatrix:
    """Least-squares optimal boundary values for each output component.

    ``eigenvalues[i]`` lists the ``N_i`` eigenvalues attached to output ``i``.
    Without a regularizer each trajectory is an independent Vandermonde
    least-squares problem.
    """
    hv = observable_values(ds, h)
    if hv.shape[2] != partition.n_h:
        raise DimensionError(f"observable has {hv.shape[2]} components, "
                             f"partition expects {partition.n_h}")
    if len(eigenvalues) != partition.n_h:
        raise DimensionError("need one eigenvalue vector per output component")
    alpha = 0.0 if regularizer is None else float(regularizer.alpha)
    rows, lams, residuals = [], [], []
    for i, (Ni, lam_i) in enumerate(zip(partition.Ni, eigenvalues)):
        lam_i = np.atleast_1d(np.asarray(lam_i, dtype=complex))
        if len(lam_i) != Ni:
            raise DimensionError(f"output {i}: {len(lam_i)} eigenvalues for budget {Ni}")
        H = hv[:, :, i].T.astype(complex)
        try:
            V = vandermonde(lam_i, ds.Ms, ds.Ts)
            if alpha > 0:
                D = difference_operator(ds.Ms, ds.Ts)
                A = np.vstack([V, np.sqrt(alpha) * (D @ V)])
                B = np.vstack([H, np.zeros((ds.Ms, ds.Mt))])
                Gi = pinv_solve(A, B)
            else:
                Gi = _vandermonde_lstsq(V, H)
        except (IllConditioned, OverflowError, np.linalg.LinAlgError) as exc:
            raise type(exc)(f"output component {i}: {exc}") from exc
        R = H - V @ Gi
        residuals.append(float(np.vdot(R, R).real))
        rows.append(Gi)
        lams.append(lam_i)
    return BoundaryMatrix(np.vstack(rows), partition, np.concatenate(lams), residuals)
