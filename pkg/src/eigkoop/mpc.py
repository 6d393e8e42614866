"""Koopman MPC: stage data, dense condensation, and the closed loop.

The lifted predictor ``z+ = Ad z + Bd u``, ``y = C z`` is used to eliminate
the lifted states over the horizon, which leaves a QP in the stacked input
sequence ``u = [u_0; ...; u_{Np-1}]`` only::

    minimize    u' H1 u + (h + H2' z0)' u
    subject to  L u + M z0 <= d

The size of this problem depends on ``m * Np`` but not on the number of
eigenfunctions; ``z0' H2`` is a single matrix-vector product per step.
"""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import VectorField, simulate_batch
from .errors import DimensionError, InfeasibleProblem, NumericalFailure
from .predictor import LinearPredictor
from .qp import AdmmQpSolver, AdmmSettings, QpSolution

log = logging.getLogger(__name__)

PSD_FLOOR = -1e-10
REAL_TOL = 1e-9


def _check_psd(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, atol=1e-12 * (1 + np.abs(M).max())):
        raise ValueError(f"{name} must be symmetric")
    if M.size and np.linalg.eigvalsh(M).min() < PSD_FLOOR * max(1.0, np.abs(M).max()):
        raise ValueError(f"{name} must be positive semidefinite")
    return M


def _per_stage(value, count, shape, name, check=None):
    """Expand a constant or per-stage array into a list of ``count`` arrays."""
    arr = np.asarray(value, dtype=float)
    if arr.shape == shape:
        arrs = [arr] * count
    elif arr.shape == (count,) + shape:
        arrs = list(arr)
    else:
        raise DimensionError(f"{name}: expected shape {shape} or {(count,) + shape}, got {arr.shape}")
    if check is not None:
        seen = {}
        for i, a in enumerate(arrs):
            if id(a) not in seen:
                seen[id(a)] = check(a, f"{name}[{i}]")
    return arrs


@dataclass
class ReferenceSchedule:
    """Piecewise-constant output reference: ``values[i]`` holds from ``times[i]``."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if len(self.times) != len(self.values):
            raise DimensionError("reference schedule: times and values differ in length")
        if len(self.times) == 0:
            raise ValueError("reference schedule is empty")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("reference switching times must be strictly increasing")

    @classmethod
    def constant(cls, value):
        return cls([0.0], [np.asarray(value, dtype=float)])

    def __call__(self, t: float) -> np.ndarray:
        i = int(np.searchsorted(self.times, t + 1e-9, side="right")) - 1
        return self.values[max(i, 0)]


@dataclass
class MpcSpec:
    """Stage costs and constraints of the lifted MPC problem.

    Parameters
    ----------
    Np : int
        Horizon length in steps.
    Q, R : array_like
        Output and input weights, either constant ``(n_h, n_h)`` / ``(m, m)``
        or stacked per stage ``(Np, n_h, n_h)`` / ``(Np, m, m)``.
    q, r : array_like, optional
        Additional linear cost on outputs and inputs.
    E, F, b : array_like, optional
        Stage constraints ``E y_i + F u_i <= b`` for ``i = 0..Np-1``.
    QN, qN, EN, bN : array_like, optional
        Terminal cost and constraint on ``y_Np``; ``QN`` and ``qN`` default
        to the last stage's ``Q`` and ``q``.
    reference : ReferenceSchedule, optional
        Output reference; folded into the linear output cost as
        ``q_i - 2 Q_i y_ref``.
    """

    Np: int
    Q: np.ndarray
    R: np.ndarray
    q: Optional[np.ndarray] = None
    r: Optional[np.ndarray] = None
    E: Optional[np.ndarray] = None
    F: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    QN: Optional[np.ndarray] = None
    qN: Optional[np.ndarray] = None
    EN: Optional[np.ndarray] = None
    bN: Optional[np.ndarray] = None
    reference: Optional[ReferenceSchedule] = None

    def __post_init__(self):
        if int(self.Np) != self.Np or self.Np < 1:
            raise ValueError("Np must be a positive integer")
        self.Np = int(self.Np)
        Q = np.asarray(self.Q, dtype=float)
        R = np.asarray(self.R, dtype=float)
        if Q.ndim == 0:
            Q = Q.reshape(1, 1)
        if R.ndim == 0:
            R = R.reshape(1, 1)
        self.Q, self.R = Q, R
        n_h, m = Q.shape[-1], R.shape[-1]
        self._Qs = _per_stage(Q, self.Np, (n_h, n_h), "Q", _check_psd)
        self._Rs = _per_stage(R, self.Np, (m, m), "R", _check_psd)
        self.QN = _check_psd(Q if self.QN is None and Q.ndim == 2 else
                             (self._Qs[-1] if self.QN is None else np.atleast_2d(self.QN)), "QN")
        self._qs = _per_stage(np.zeros(n_h) if self.q is None else self.q, self.Np, (n_h,), "q")
        self._rs = _per_stage(np.zeros(m) if self.r is None else self.r, self.Np, (m,), "r")
        self.qN = (self._qs[-1].copy() if self.qN is None
                   else np.asarray(self.qN, dtype=float).reshape(n_h))
        if self.F is not None or self.E is not None or self.b is not None:
            if self.b is None:
                raise DimensionError("stage constraints need a right-hand side b")
            b = np.asarray(self.b, dtype=float)
            n_c = b.shape[-1]
            E = np.zeros((n_c, n_h)) if self.E is None else self.E
            F = np.zeros((n_c, m)) if self.F is None else self.F
            self._Es = _per_stage(E, self.Np, (n_c, n_h), "E")
            self._Fs = _per_stage(F, self.Np, (n_c, m), "F")
            self._bs = _per_stage(b, self.Np, (n_c,), "b")
        else:
            self._Es = [np.zeros((0, n_h))] * self.Np
            self._Fs = [np.zeros((0, m))] * self.Np
            self._bs = [np.zeros(0)] * self.Np
        if (self.EN is None) != (self.bN is None):
            raise DimensionError("terminal constraints need both EN and bN")
        if self.EN is not None:
            self.EN = np.atleast_2d(np.asarray(self.EN, dtype=float))
            self.bN = np.asarray(self.bN, dtype=float).reshape(-1)
            if self.EN.shape != (len(self.bN), n_h):
                raise DimensionError("EN and bN row counts differ")
        else:
            self.EN, self.bN = np.zeros((0, n_h)), np.zeros(0)
        if self.reference is not None and not isinstance(self.reference, ReferenceSchedule):
            self.reference = ReferenceSchedule.constant(self.reference)
        if self.reference is not None and self.reference.values.shape[1] != n_h:
            raise DimensionError("reference dimension differs from the output dimension")

    @property
    def n_h(self) -> int:
        return self.QN.shape[0]

    @property
    def m(self) -> int:
        return self._Rs[0].shape[0]

    def linear_output_terms(self, y_ref=None):
        """Per-stage ``q_i`` (``Np + 1`` vectors) with the reference folded in."""
        qs = list(self._qs) + [self.qN]
        if y_ref is None:
            return qs
        y_ref = np.asarray(y_ref, dtype=float).reshape(self.n_h)
        Qs = list(self._Qs) + [self.QN]
        return [qi - 2.0 * Qi @ y_ref for qi, Qi in zip(qs, Qs)]


def box_constraints(u_min, u_max, n_h: int):
    """``(E, F, b)`` for ``u_min <= u <= u_max`` with no output coupling."""
    u_min = np.atleast_1d(np.asarray(u_min, dtype=float))
    u_max = np.atleast_1d(np.asarray(u_max, dtype=float))
    m = len(u_max)
    F = np.vstack([np.eye(m), -np.eye(m)])
    return np.zeros((2 * m, n_h)), F, np.concatenate([u_max, -u_min])


@dataclass
class DenseQp:
    """Condensed QP data; see the module docstring for the problem statement."""

    H1: np.ndarray
    h: np.ndarray
    H2: np.ndarray
    L: np.ndarray
    M: np.ndarray
    d: np.ndarray
    Bbar: np.ndarray = field(repr=False, default=None)
    m: int = 1
    Np: int = 1

    def linear_term(self, z0) -> np.ndarray:
        return self.h + np.real(np.asarray(z0) @ self.H2)

    def rhs(self, z0) -> np.ndarray:
        return self.d - np.real(self.M @ np.asarray(z0)) if len(self.d) else self.d

    def cost(self, u, z0) -> float:
        u = np.asarray(u, dtype=float)
        return float(u @ self.H1 @ u + self.linear_term(z0) @ u)

    def retarget(self, q_stack) -> "DenseQp":
        """Copy with a new stacked linear output cost (e.g. a new reference)."""
        h = np.asarray(q_stack) @ self.Bbar + (self.h - self._q_stack @ self.Bbar)
        out = DenseQp(self.H1, h, self.H2, self.L, self.M, self.d, self.Bbar, self.m, self.Np)
        out._q_stack = np.asarray(q_stack)
        return out


def _realify(X, name, scale=None):
    X = np.asarray(X)
    if not np.iscomplexobj(X):
        return X.astype(float)
    scale = max(1.0, np.abs(X).max()) if scale is None else scale
    resid = np.abs(X.imag).max() if X.size else 0.0
    if resid > REAL_TOL * scale:
        warnings.warn(f"{name}: imaginary residue {resid:.3g} discarded; spectrum is not "
                      "conjugate-consistent", RuntimeWarning, stacklevel=3)
    return X.real.copy()


def prediction_matrices(pred: LinearPredictor, Np: int):
    """Output free response ``A_bar`` and forced response ``B_bar`` over ``Np`` steps.

    ``A_bar`` stacks ``C Ad^i`` for ``i = 0..Np``; ``B_bar`` is block lower
    triangular with block ``(i, j) = C Ad^(i-1-j) Bd`` for ``j < i``.
    """
    if pred.Bd is None:
        raise DimensionError("predictor has no input matrix; fit B first")
    C, Ad, Bd = pred.C, pred.Ad, pred.Bd
    n_h, m = C.shape[0], Bd.shape[1]
    CAk = [C.astype(complex)]
    for _ in range(Np):
        CAk.append(CAk[-1] @ Ad)
    Abar = np.vstack(CAk)
    imp = [CAk[k] @ Bd for k in range(Np)]     # C Ad^k Bd, the Markov parameters
    imp = [_realify(x, "C Ad^k Bd") for x in imp]
    Bbar = np.zeros(((Np + 1) * n_h, Np * m))
    for i in range(1, Np + 1):
        for j in range(i):
            Bbar[i * n_h:(i + 1) * n_h, j * m:(j + 1) * m] = imp[i - 1 - j]
    return Abar, Bbar


def condense(spec: MpcSpec, pred: LinearPredictor, y_ref=None) -> DenseQp:
    """Eliminate the lifted states and return the dense QP in ``u``."""
    if pred.n_h != spec.n_h:
        raise DimensionError(f"spec has {spec.n_h} outputs, predictor has {pred.n_h}")
    if pred.Bd is None or pred.m != spec.m:
        raise DimensionError(f"spec has {spec.m} inputs, predictor has "
                             f"{None if pred.Bd is None else pred.m}")
    Np, n_h, m = spec.Np, spec.n_h, spec.m
    if y_ref is None and spec.reference is not None:
        y_ref = spec.reference(0.0)
    Abar, Bbar = prediction_matrices(pred, Np)
    Qbar = _block_diag(list(spec._Qs) + [spec.QN])
    Rbar = _block_diag(spec._Rs)
    q_stack = np.concatenate(spec.linear_output_terms(y_ref))
    r_stack = np.concatenate(spec._rs)
    H1 = Rbar + Bbar.T @ Qbar @ Bbar
    H1 = 0.5 * (H1 + H1.T)
    w, V = np.linalg.eigh(H1)
    if w.size and w.min() < PSD_FLOOR * max(1.0, np.abs(w).max()):
        warnings.warn(f"condensed Hessian has eigenvalue {w.min():.3g}; clipping to zero",
                      RuntimeWarning, stacklevel=2)
        H1 = (V * np.maximum(w, 0.0)) @ V.T
    h = q_stack @ Bbar + r_stack
    H2 = 2.0 * Abar.T @ Qbar @ Bbar
    Ebar = _block_diag(list(spec._Es) + [spec.EN])
    n_rows = Ebar.shape[0]
    Fbar = np.zeros((n_rows, Np * m))
    row = 0
    for i, Fi in enumerate(spec._Fs):
        Fbar[row:row + Fi.shape[0], i * m:(i + 1) * m] = Fi
        row += Fi.shape[0]
    L = Fbar + Ebar @ Bbar
    M = Ebar @ Abar
    if n_rows and not np.any(Ebar):
        M = np.zeros((n_rows, Abar.shape[1]))
    d = np.concatenate(list(spec._bs) + [spec.bN])
    qp = DenseQp(H1, h, H2, L, M, d, Bbar, m, Np)
    qp._q_stack = q_stack
    return qp


def _block_diag(blocks):
    blocks = [np.atleast_2d(b) if np.asarray(b).size else np.zeros(np.shape(b)) for b in blocks]
    r = sum(b.shape[0] for b in blocks)
    c = sum(b.shape[1] for b in blocks)
    out = np.zeros((r, c))
    i = j = 0
    for b in blocks:
        out[i:i + b.shape[0], j:j + b.shape[1]] = b
        i += b.shape[0]
        j += b.shape[1]
    return out


class MpcController:
    """Caches the factorised QP and re-solves it for each measured lifted state."""

    def __init__(self, qp: DenseQp, settings: Optional[AdmmSettings] = None):
        self.qp = qp
        self.solver = AdmmQpSolver(2.0 * qp.H1, qp.L, settings)

    def solve(self, z0, warm: Optional[QpSolution] = None) -> QpSolution:
        z0 = np.asarray(z0)
        if z0.shape != (self.qp.H2.shape[0],):
            raise DimensionError(f"z0 must have length {self.qp.H2.shape[0]}")
        return self.solver.solve(self.qp.linear_term(z0), self.qp.rhs(z0), warm)


def solve_qp(qp: DenseQp, z0, warm_start: Optional[QpSolution] = None,
             settings: Optional[AdmmSettings] = None) -> QpSolution:
    """Minimize ``u'H1u + (h + H2'z0)'u`` subject to ``Lu + Mz0 <= d``."""
    return MpcController(qp, settings).solve(z0, warm_start)


def shift_solution(sol: QpSolution, m: int, Np: int, n_rows_per_stage: Optional[int] = None):
    """Shift a plan one stage ahead, repeating the last stage."""
    u = sol.u.reshape(Np, m)
    u = np.vstack([u[1:], u[-1:]]).reshape(-1)
    duals = sol.duals
    if n_rows_per_stage and len(duals) >= Np * n_rows_per_stage:
        stage = duals[:Np * n_rows_per_stage].reshape(Np, n_rows_per_stage)
        stage = np.vstack([stage[1:], stage[-1:]]).reshape(-1)
        duals = np.concatenate([stage, duals[Np * n_rows_per_stage:]])
    return QpSolution(u, duals, sol.kkt, 0, sol.converged, sol.status)


@dataclass
class ClosedLoopLog:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    ref: np.ndarray
    qp_iters: np.ndarray
    lift_ms: np.ndarray
    solve_ms: np.ndarray
    failures: int = 0

    def header(self):
        n, m, r = self.x.shape[1], self.u.shape[1], self.ref.shape[1]
        return (["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
                + [f"ref{i + 1}" for i in range(r)] + ["qp_iters", "lift_ms", "solve_ms"])

    def to_csv(self, path, timings: bool = True) -> None:
        """Write the log; with ``timings=False`` the time columns are blank."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for k in range(len(self.t)):
                row = [format(self.t[k], ".17g")]
                row += [format(v, ".17g") for v in self.x[k]]
                row += [format(v, ".17g") for v in self.u[k]]
                row += [format(v, ".17g") for v in self.ref[k]]
                row += [str(int(self.qp_iters[k]))]
                row += ([format(self.lift_ms[k], ".4f"), format(self.solve_ms[k], ".4f")]
                        if timings else ["", ""])
                w.writerow(row)


MAX_CONSECUTIVE_FAILURES = 5


def closed_loop(vf: VectorField, pred: LinearPredictor, spec: MpcSpec, x0, duration: float,
                settings: Optional[AdmmSettings] = None, lift: Optional[Callable] = None):
    """Sampled-data Koopman MPC on the true plant.

    At every sampling instant the measured state is lifted, the condensed QP
    is solved warm-started from the previous plan shifted by one stage, and
    the first input is held for one sampling period on the nonlinear plant.
    """
    Ts = pred.Ts
    steps = duration / Ts
    if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
        raise ValueError("duration must be an integer multiple of the sampling period")
    steps = int(round(steps))
    lift = lift or pred.lifted
    x = np.asarray(x0, dtype=float).reshape(vf.state_dim)
    m, n_h = spec.m, spec.n_h
    ref_fn = spec.reference or ReferenceSchedule.constant(np.zeros(n_h))
    rows_per_stage = spec._bs[0].shape[0]
    base = condense(spec, pred, ref_fn(0.0))
    controllers = {}
    X, U, REF = np.zeros((steps, vf.state_dim)), np.zeros((steps, m)), np.zeros((steps, n_h))
    iters, lift_ms, solve_ms = np.zeros(steps, int), np.zeros(steps), np.zeros(steps)
    warm = None
    failures = consecutive = 0
    outside_before = getattr(getattr(pred.lift, "extension", None), "outside_hits", 0)
    for k in range(steps):
        t = k * Ts
        y_ref = ref_fn(t)
        key = tuple(y_ref)
        if key not in controllers:
            q_stack = np.concatenate(spec.linear_output_terms(y_ref))
            controllers[key] = MpcController(base.retarget(q_stack), settings)
        ctrl = controllers[key]
        t0 = time.perf_counter()
        z0 = np.asarray(lift(x[None, :]))[0]
        t1 = time.perf_counter()
        sol = ctrl.solve(z0, warm)
        t2 = time.perf_counter()
        if not sol.converged:
            failures += 1
            consecutive += 1
            log.warning("t=%.2f: QP not converged after %d iterations; applying best iterate",
                        t, sol.iterations)
            if consecutive > MAX_CONSECUTIVE_FAILURES:
                raise NumericalFailure(f"QP failed {consecutive} consecutive times at t={t:.2f}")
        else:
            consecutive = 0
        u0 = sol.u[:m]
        X[k], U[k], REF[k] = x, u0, y_ref
        iters[k], lift_ms[k], solve_ms[k] = sol.iterations, 1e3 * (t1 - t0), 1e3 * (t2 - t1)
        x = simulate_batch(vf, x[None, :], Ts, 1, u0.reshape(1, 1, m))[0, -1]
        warm = shift_solution(sol, m, spec.Np, rows_per_stage)
    hits = getattr(getattr(pred.lift, "extension", None), "outside_hits", 0) - outside_before
    if hits:
        log.info("closed loop: %d lift evaluations fell outside the sampled region "
                 "(nearest-value fallback)", hits)
    return ClosedLoopLog(np.arange(steps) * Ts, X, U, REF, iters, lift_ms, solve_ms, failures)


# --- nonlinear cost / constraint stacking ------------------------------------------------

@dataclass
class StackedObservable:
    """Observable ``[h(x); l(x); l_N(x); c(x); c_N(x); 1]`` plus the MPC wiring.

    The extra components make nonlinear stage costs and constraints affine in
    the predicted output: a linear cost picks ``l`` out of ``y``; constraint
    rows ``c(y) + D u <= 0`` become ``E y + F u <= b`` with ``E`` selecting
    the ``c`` components.  Input boxes use the constant component.
    """

    h: Callable
    n_base: int
    slices: dict
    n_h: int

    def __call__(self, x):
        return self.h(x)

    def cost_terms(self, Np: int):
        """Linear output costs ``(q, qN)`` selecting ``l`` and ``l_N``."""
        q = np.zeros(self.n_h)
        qN = np.zeros(self.n_h)
        if "l" in self.slices:
            q[self.slices["l"]] = 1.0
        if "l_N" in self.slices:
            qN[self.slices["l_N"]] = 1.0
        return q, qN

    def constraint_wiring(self, m: int, D=None, u_min=None, u_max=None):
        """Stage ``(E, F, b)`` and terminal ``(EN, bN)``."""
        Es, Fs, bs = [], [], []
        if u_min is not None or u_max is not None:
            u_min = -np.inf * np.ones(m) if u_min is None else np.broadcast_to(u_min, (m,))
            u_max = np.inf * np.ones(m) if u_max is None else np.broadcast_to(u_max, (m,))
            one = self.slices["one"].start
            for j in range(m):
                for sign, bound in ((1.0, u_max[j]), (-1.0, u_min[j])):
                    if np.isfinite(bound):
                        # sign*u_j - sign*bound * y_one <= 0
                        e = np.zeros(self.n_h)
                        e[one] = -sign * bound
                        f = np.zeros(m)
                        f[j] = sign
                        Es.append(e), Fs.append(f), bs.append(0.0)
        if "c" in self.slices:
            sl = self.slices["c"]
            n_c = sl.stop - sl.start
            Dm = np.zeros((n_c, m)) if D is None else np.asarray(D, dtype=float).reshape(n_c, m)
            for i in range(n_c):
                e = np.zeros(self.n_h)
                e[sl.start + i] = 1.0
                Es.append(e), Fs.append(Dm[i]), bs.append(0.0)
        E = np.array(Es).reshape(-1, self.n_h)
        F = np.array(Fs).reshape(-1, m)
        b = np.array(bs)
        EN = bN = None
        if "c_N" in self.slices:
            sl = self.slices["c_N"]
            EN = np.eye(self.n_h)[sl]
            bN = np.zeros(sl.stop - sl.start)
        return (E, F, b), (EN, bN)


def stack_observable(h: Callable, l: Optional[Callable] = None, l_N: Optional[Callable] = None,
                     c: Optional[Callable] = None, c_N: Optional[Callable] = None,
                     constant: Optional[bool] = None, state_dim: Optional[int] = None):
    """Concatenate the base observable with cost and constraint functions.

    Every argument maps ``(Q, n)`` states to ``(Q, k)`` values (scalar-valued
    functions may return ``(Q,)``).  A constant component is appended when
    ``constant`` is true; by default it is added whenever any extension is
    present so that input boxes can be expressed.  With no extensions the
    base observable is returned unchanged.
    """
    parts = [("h", h)] + [(name, f) for name, f in
                          (("l", l), ("l_N", l_N), ("c", c), ("c_N", c_N)) if f is not None]
    if constant is None:
        constant = len(parts) > 1
    if len(parts) == 1 and not constant:
        n_base = None
        if state_dim is not None:
            n_base = np.atleast_2d(h(np.zeros((1, state_dim)))).shape[1]
        return StackedObservable(h, n_base, {"h": slice(0, n_base)}, n_base)
    if state_dim is None:
        raise ValueError("state_dim is required to size the stacked observable")
    probe = np.zeros((1, state_dim))
    slices = {}
    start = 0
    for name, f in parts:
        k = np.asarray(f(probe)).reshape(1, -1).shape[1]
        slices[name] = slice(start, start + k)
        start += k
    if constant:
        slices["one"] = slice(start, start + 1)
        start += 1

    def stacked(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cols = [np.asarray(f(x), dtype=float).reshape(len(x), -1) for _, f in parts]
        if constant:
            cols.append(np.ones((len(x), 1)))
        return np.hstack(cols)

    return StackedObservable(stacked, slices["h"].stop, slices, start)
