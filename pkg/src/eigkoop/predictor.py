"""Linear predictors ``z+ = Ad z + Bd u``, ``y = C z`` built on learned eigenfunctions."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .boundary import OutputPartition
from .dynamics import TrajectoryDataset
from .eigfun import EigenfunctionSet, ExtensionModel, _cplx_from_json, _cplx_to_json
from .errors import DimensionError
from .numerics import JordanBlock, jordan_exp, pinv_solve
from .spectrum import is_conjugate_closed

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


def identity_observable(x):
    return np.asarray(x, dtype=float)


def block_matrices(eigenvalues, jordan_sizes, Ts: float):
    """Continuous ``A`` and discrete ``Ad = expm(A Ts)`` for Jordan-structured spectra."""
    lam = np.asarray(eigenvalues, dtype=complex)
    N = len(lam)
    A = np.zeros((N, N), dtype=complex)
    Ad = np.zeros((N, N), dtype=complex)
    start = 0
    for size in jordan_sizes:
        J = JordanBlock(lam[start], size)
        sl = slice(start, start + size)
        A[sl, sl] = J.matrix()
        Ad[sl, sl] = jordan_exp(J, Ts)
        start += size
    return A, Ad


def zoh_factor(lam, Ts: float) -> np.ndarray:
    """``lam / (1 - exp(-lam Ts))`` with the ``1/Ts`` limit at ``lam = 0``."""
    x = np.asarray(lam, dtype=complex) * Ts
    denom = -np.expm1(-x)
    safe = np.where(x == 0, 1.0, x)
    ratio = np.where(x == 0, 1.0, safe / np.where(denom == 0, 1.0, denom))
    return ratio / Ts


def _zoh_integral(A: np.ndarray, Ts: float) -> np.ndarray:
    """``int_0^Ts expm(-A s) ds`` via an augmented matrix exponential."""
    N = A.shape[0]
    M = np.zeros((2 * N, 2 * N), dtype=complex)
    M[:N, :N] = -A
    M[:N, N:] = np.eye(N)
    return scipy.linalg.expm(M * Ts)[:N, N:]


def B_from_Bd(A: np.ndarray, Bd: np.ndarray, Ts: float) -> np.ndarray:
    """Continuous input matrix from its discrete counterpart.

    Follows ``Bd = (int_0^Ts e^{-As} ds) B``; for diagonal ``A`` this is the
    row scaling ``lam_i / (1 - e^{-lam_i Ts})``.
    """
    if np.count_nonzero(A - np.diag(np.diag(A))) == 0:
        return zoh_factor(np.diag(A), Ts)[:, None] * Bd
    return np.linalg.solve(_zoh_integral(A, Ts), Bd)


def Bd_from_B(A: np.ndarray, B: np.ndarray, Ts: float) -> np.ndarray:
    if np.count_nonzero(A - np.diag(np.diag(A))) == 0:
        return B / zoh_factor(np.diag(A), Ts)[:, None]
    return _zoh_integral(A, Ts) @ B


@dataclass
class LinearPredictor:
    """Lifted linear model with output map.

    Attributes
    ----------
    A, Ad : ndarray (N, N)
        Continuous generator and its exact discretisation.
    B, Bd : ndarray (N, m)
    C : ndarray (n_h, N)
    lift : EigenfunctionSet
        Provides ``z0 = lift.evaluate(x0)``.
    """

    A: np.ndarray
    C: np.ndarray
    Ts: float
    lift: Optional[EigenfunctionSet] = None
    Ad: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    Bd: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=complex)
        self.C = np.atleast_2d(np.asarray(self.C, dtype=complex))
        if self.Ad is None:
            self.Ad = scipy.linalg.expm(self.A * self.Ts)
        if self.Bd is None and self.B is not None:
            self.Bd = Bd_from_B(self.A, np.asarray(self.B, dtype=complex), self.Ts)
        if self.B is None and self.Bd is not None:
            self.B = B_from_Bd(self.A, np.asarray(self.Bd, dtype=complex), self.Ts)
        if self.C.shape[1] != self.N:
            raise DimensionError(f"C has {self.C.shape[1]} columns for N = {self.N}")

    @classmethod
    def from_eigfun(cls, lift: EigenfunctionSet, C, Bd=None) -> "LinearPredictor":
        A, Ad = block_matrices(lift.eigenvalues, lift.jordan_sizes, lift.Ts)
        return cls(A, C, lift.Ts, lift, Ad=Ad, Bd=Bd)

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def n_h(self) -> int:
        return self.C.shape[0]

    @property
    def m(self) -> int:
        return 0 if self.Bd is None else self.Bd.shape[1]

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.diag(self.A)

    @property
    def is_diagonal(self) -> bool:
        return np.count_nonzero(self.A - np.diag(np.diag(self.A))) == 0

    def lifted(self, x) -> np.ndarray:
        return self.lift.evaluate(x)

    # --- persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        d = {"version": FORMAT_VERSION, "Ts": self.Ts,
             "A": _cplx_to_json(self.A), "Ad": _cplx_to_json(self.Ad), "C": _cplx_to_json(self.C),
             "info": self.info}
        if self.Bd is not None:
            d["B"] = _cplx_to_json(self.B)
            d["Bd"] = _cplx_to_json(self.Bd)
        if self.lift is not None:
            L = self.lift
            d["lift"] = {
                "eigenvalues": _cplx_to_json(L.eigenvalues), "Mt": L.Mt, "Ms": L.Ms,
                "Ts": L.Ts, "jordan_sizes": list(L.jordan_sizes),
                "partition": None if L.partition is None else list(L.partition.Ni),
                "products": {str(k): [list(v[0]), list(v[1])] for k, v in L.products.items()},
                "extension": None if L.extension is None else L.extension.to_dict(),
            }
        return d

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, d: dict) -> "LinearPredictor":
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported predictor format version {d.get('version')}")
        lift = None
        if d.get("lift"):
            L = d["lift"]
            lam = _cplx_from_json(L["eigenvalues"])
            # On-data values are not stored; the extension carries what is needed.
            lift = _StoredLift(lam, L)
        Bd = _cplx_from_json(d["Bd"]) if "Bd" in d else None
        B = _cplx_from_json(d["B"]) if "B" in d else None
        return cls(_cplx_from_json(d["A"]), _cplx_from_json(d["C"]), d["Ts"], lift,
                   Ad=_cplx_from_json(d["Ad"]), B=B, Bd=Bd, info=d.get("info", {}))

    @classmethod
    def load(cls, path) -> "LinearPredictor":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class _StoredLift(EigenfunctionSet):
    """Eigenfunction set restored from disk: evaluable, without on-data values."""

    def __init__(self, lam, L):
        self.eigenvalues = lam
        self.Ts, self.Mt, self.Ms = L["Ts"], L["Mt"], L["Ms"]
        self.values = np.zeros((len(lam), 0), dtype=complex)
        self.partition = None if L["partition"] is None else OutputPartition(L["partition"])
        self.jordan_sizes = tuple(L["jordan_sizes"])
        self.products = {int(k): (tuple(v[0]), tuple(v[1])) for k, v in L["products"].items()}
        self.extension = None if L["extension"] is None else ExtensionModel.from_dict(L["extension"])


# --- A and C ------------------------------------------------------------------------

def bdiag_C(partition: OutputPartition) -> np.ndarray:
    """Block-diagonal rows of ones, one block per output component."""
    C = np.zeros((partition.n_h, partition.N))
    for i, sl in enumerate(partition.slices()):
        C[i, sl] = 1.0
    return C


def _lawson_row(Phi, h, iters=300, tol=1e-10):
    """Minimax fit ``min_c max_i |h_i - Phi_i c|`` by Lawson's reweighting."""
    P = len(h)
    w = np.full(P, 1.0 / P)
    c = pinv_solve(Phi, h)
    best_c, best = c, np.max(np.abs(h - Phi @ c))
    for _ in range(iters):
        sw = np.sqrt(w)
        c = pinv_solve(sw[:, None] * Phi, sw * h)
        e = np.abs(h - Phi @ c)
        emax = e.max()
        if emax < best:
            best_c, best = c, emax
        if emax == 0:
            break
        w_new = w * e
        s = w_new.sum()
        if s == 0:
            break
        w_new /= s
        if np.max(np.abs(w_new - w)) < tol:
            break
        w = w_new
    return best_c


def assemble_AC(lift: EigenfunctionSet, mode: str = "bdiag", samples=None,
                h: Callable = identity_observable):
    """Generator ``A`` and output matrix ``C``.

    ``mode='bdiag'`` uses the partition of optimally chosen boundary
    functions; ``'l2_fit'`` and ``'sup_fit'`` fit ``C`` on ``samples`` in the
    least-squares or max-norm sense.
    """
    A, _ = block_matrices(lift.eigenvalues, lift.jordan_sizes, lift.Ts)
    if mode == "bdiag":
        if lift.partition is None:
            raise ValueError("bdiag mode needs the output partition of optimal boundary values")
        return A, bdiag_C(lift.partition).astype(complex)
    if samples is None:
        raise ValueError(f"{mode} mode needs sample states")
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    Phi = lift.evaluate(samples)
    Hs = np.asarray(h(samples))
    if Hs.ndim == 1:
        Hs = Hs[:, None]
    if np.linalg.matrix_rank(Phi) < Phi.shape[1]:
        warnings.warn("sample eigenfunction matrix is rank deficient; using pseudoinverse")
    if mode == "l2_fit":
        return A, pinv_solve(Phi, Hs).T
    if mode == "sup_fit":
        return A, np.array([_lawson_row(Phi, Hs[:, r].astype(complex)) for r in range(Hs.shape[1])])
    raise ValueError(f"unknown C mode {mode!r}")


# --- B -------------------------------------------------------------------------------

def _input_response(Ad: np.ndarray, U: np.ndarray, diagonal: bool):
    """Per trajectory, ``S[k, c] = sum_{i<k} u_i[c] Ad^{k-1-i}`` for k = 1..K.

    Returns ``(Mt, K, m, N)`` diagonals when ``diagonal``, else
    ``(Mt, K, m, N, N)`` matrices.
    """
    Mt, K, m = U.shape
    N = Ad.shape[0]
    if diagonal:
        mu = np.diag(Ad)
        S = np.zeros((Mt, K, m, N), dtype=complex)
        cur = np.zeros((Mt, m, N), dtype=complex)
        for k in range(K):
            cur = cur * mu + U[:, k, :, None]
            S[:, k] = cur
        return S
    S = np.zeros((Mt, K, m, N, N), dtype=complex)
    cur = np.zeros((Mt, m, N, N), dtype=complex)
    eye = np.eye(N)
    for k in range(K):
        cur = np.einsum("ab,tcbd->tcad", Ad, cur) + U[:, k, :, None, None] * eye
        S[:, k] = cur
    return S


def regression_system(pred: LinearPredictor, ds_c: TrajectoryDataset,
                      h: Callable = identity_observable, max_steps: Optional[int] = None):
    """Stacked multi-step regression data ``(Theta, theta)`` for ``vec(Bd)``."""
    if ds_c.inputs is None:
        raise ValueError("fit_B: controlled dataset required")
    K = ds_c.Ms if max_steps is None else int(max_steps)
    if K > ds_c.Ms or K < 1:
        raise ValueError(f"prediction window {K} exceeds trajectory length {ds_c.Ms}")
    C, Ad = pred.C, pred.Ad
    N, n_h, m, Mt = pred.N, pred.n_h, ds_c.m, ds_c.Mt
    Z0 = pred.lift.evaluate(ds_c.initial_conditions)            # (Mt, N)
    Hk = np.asarray(h(ds_c.states[:, 1:K + 1].reshape(-1, ds_c.n))).reshape(Mt, K, n_h)
    diagonal = pred.is_diagonal
    # free response C Ad^k z0 for k = 1..K
    free = np.empty((Mt, K, n_h), dtype=complex)
    z = Z0.copy()
    for k in range(K):
        z = z * np.diag(Ad) if diagonal else z @ Ad.T
        free[:, k] = z @ C.T
    S = _input_response(Ad, ds_c.inputs[:, :K], diagonal)
    if diagonal:
        # C diag(s) -> columns of C scaled by s; blocks ordered by input channel.
        Theta = np.einsum("rn,tkcn->tkrcn", C, S).reshape(Mt * K * n_h, m * N)
    else:
        Theta = np.einsum("rn,tkcnp->tkrcp", C, S).reshape(Mt * K * n_h, m * N)
    theta = (Hk - free).reshape(-1)
    return Theta, theta


def fit_B(pred: LinearPredictor, ds_c: TrajectoryDataset, h: Callable = identity_observable,
          max_steps: Optional[int] = None):
    """Least-squares ``Bd`` minimising the multi-step output error; returns ``(B, Bd)``."""
    Theta, theta = regression_system(pred, ds_c, h, max_steps)
    b = pinv_solve(Theta, theta)
    Bd = b.reshape(ds_c.m, pred.N).T          # inverse of column-major vec
    return B_from_Bd(pred.A, Bd, pred.Ts), Bd


def multistep_cost(pred: LinearPredictor, Bd, ds_c: TrajectoryDataset,
                   h: Callable = identity_observable, max_steps: Optional[int] = None) -> float:
    Theta, theta = regression_system(pred, ds_c, h, max_steps)
    r = Theta @ np.asarray(Bd).T.reshape(-1) - theta
    return float(np.vdot(r, r).real)


# --- prediction -----------------------------------------------------------------------

def predict_lifted(pred: LinearPredictor, Z0, inputs=None, steps: int = 0) -> np.ndarray:
    """Roll out from lifted states ``Z0 (Q, N)``; returns complex outputs ``(Q, steps+1, n_h)``."""
    Z = np.atleast_2d(np.asarray(Z0, dtype=complex))
    Q = len(Z)
    if inputs is not None:
        U = np.asarray(inputs, dtype=float)
        if U.ndim == 2:
            U = np.broadcast_to(U, (Q,) + U.shape)
        if U.shape[1] < steps:
            raise DimensionError(f"{U.shape[1]} inputs for {steps} steps")
        if pred.Bd is None:
            raise ValueError("predictor has no input matrix")
    out = np.empty((Q, steps + 1, pred.n_h), dtype=complex)
    out[:, 0] = Z @ pred.C.T
    diag = pred.is_diagonal
    mu = np.diag(pred.Ad)
    for k in range(steps):
        Z = Z * mu if diag else Z @ pred.Ad.T
        if inputs is not None:
            Z = Z + U[:, k] @ pred.Bd.T
        out[:, k + 1] = Z @ pred.C.T
    return out


def predict(pred: LinearPredictor, x0, inputs=None, steps: int = 0) -> np.ndarray:
    """Predicted outputs ``Re(C z_k)`` for ``k = 0..steps`` (``(steps+1, n_h)``).

    ``x0`` may also be a batch ``(Q, n)``, giving ``(Q, steps+1, n_h)``.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    Z0 = pred.lift.evaluate(np.atleast_2d(x0))
    Y = predict_lifted(pred, Z0, inputs, steps)
    if is_conjugate_closed(pred.eigenvalues):
        scale = np.linalg.norm(Y.real) or 1.0
        resid = np.linalg.norm(Y.imag)
        if resid > 1e-6 * scale:
            log.warning("imaginary prediction residue %.3g relative", resid / scale)
    Y = Y.real
    return Y[0] if single else Y


def rmse_error(true_seq, pred_seq) -> float:
    """Relative RMS error in percent: ``100 ||pred - true|| / ||true||`` over the sequence."""
    t = np.asarray(true_seq, dtype=float)
    p = np.asarray(pred_seq, dtype=float)
    if t.shape != p.shape:
        raise DimensionError(f"shape mismatch {t.shape} vs {p.shape}")
    den = np.sqrt(np.sum(t**2))
    if den == 0:
        raise ValueError("true sequence is identically zero; error undefined")
    return float(100.0 * np.sqrt(np.sum((p - t) ** 2)) / den)
