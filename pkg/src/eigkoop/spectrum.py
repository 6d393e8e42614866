"""Eigenvalue seeding (DMD, lattice) and projection-error minimisation.

The per-output objective is the squared residual of projecting the target
samples onto the span of the trajectory-wise Vandermonde columns
``exp(lambda_j k Ts)``. Every trajectory shares the same Vandermonde block,
so the block-diagonal design matrix never has to be formed.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import TrajectoryDataset, make_rng
from .errors import DimensionError, ExponentialOverflow, IllConditioned
from .numerics import pinv_solve

log = logging.getLogger(__name__)

# exp() overflows double precision just above 709.78.
_LOG_MAX = 700.0
GRAM_COND_LIMIT = 1e14


@dataclass
class EigenvalueSet:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_1d(np.asarray(self.values, dtype=complex))

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    @property
    def closed_under_conjugation(self) -> bool:
        return is_conjugate_closed(self.values)


def is_conjugate_closed(values, tol: float = 1e-9) -> bool:
    vals = list(np.asarray(values, dtype=complex))
    while vals:
        v = vals.pop()
        if abs(v.imag) <= tol * (1 + abs(v)):
            continue
        dist = [abs(w - np.conj(v)) for w in vals]
        if not dist or min(dist) > tol * (1 + abs(v)):
            return False
        vals.pop(int(np.argmin(dist)))
    return True


# --- seeding ------------------------------------------------------------------------

def dmd_eigenvalues(ds: TrajectoryDataset) -> EigenvalueSet:
    """Continuous-time eigenvalues of the least-squares one-step linear map."""
    if ds.Ms < 1:
        raise ValueError("DMD needs at least two samples per trajectory")
    X = ds.states[:, :-1, :].reshape(-1, ds.n).T
    Y = ds.states[:, 1:, :].reshape(-1, ds.n).T
    K = pinv_solve(X.T, Y.T).T
    mu = np.linalg.eigvals(K)
    keep = np.abs(mu) > 1e-300
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} zero DMD eigenvalue(s)")
    lam = np.log(mu[keep].astype(complex)) / ds.Ts
    # Snap numerically-real eigenvalues onto the real axis.
    lam = np.where(np.abs(lam.imag) < 1e-12 * (1 + np.abs(lam)), lam.real + 0j, lam)
    return EigenvalueSet(lam)


def lattice_exponents(p: int, d: int):
    """Exponent tuples with total degree <= d.

    Ordered by total degree, then reverse-lexicographically so that the
    first base eigenvalue leads each degree.
    """
    out = []
    for deg in range(d + 1):
        level = [a for a in itertools.product(range(deg + 1), repeat=p) if sum(a) == deg]
        level.sort(reverse=True)
        out.extend(level)
    return out


def lattice(base, d: int, tol: float = 1e-12) -> EigenvalueSet:
    """All nonnegative integer combinations of ``base`` with degree <= d."""
    if d < 0:
        raise ValueError(f"lattice degree must be >= 0, got {d}")
    base = np.asarray(getattr(base, "values", base), dtype=complex)
    vals = []
    for alpha in lattice_exponents(len(base), d):
        v = complex(np.dot(alpha, base)) if len(base) else 0j
        if abs(v.imag) <= tol * (1 + abs(v)) * 1e3:
            v = complex(v.real, 0.0)
        if not any(abs(v - w) <= tol * max(1.0, abs(v)) for w in vals):
            vals.append(v)
    return EigenvalueSet(np.array(vals, dtype=complex))


def conjugate_closed_prefix(values, count: int, tol: float = 1e-9) -> Optional[np.ndarray]:
    """First ``count`` members of ``values`` chosen so that conjugate pairs stay together.

    Members are taken in order; a complex member brings its conjugate along.
    When a pair no longer fits, the most recently taken real member makes
    room for it. Returns ``None`` if ``values`` cannot supply ``count``
    members this way.
    """
    vals = list(np.asarray(getattr(values, "values", values), dtype=complex))
    used = [False] * len(vals)
    out = []
    is_real = lambda v: abs(v.imag) <= 1e-12 * (1 + abs(v))
    for j, v in enumerate(vals):
        if len(out) >= count:
            break
        if used[j]:
            continue
        used[j] = True
        if is_real(v):
            out.append(v)
            continue
        k = next((k for k in range(len(vals)) if not used[k]
                  and abs(vals[k] - np.conj(v)) <= tol * (1 + abs(v))), None)
        if k is None:
            continue                      # unpaired complex member: skip
        used[k] = True
        if len(out) + 2 > count:
            reals = [i for i, w in enumerate(out) if is_real(w)]
            if not reals:
                continue
            del out[reals[-1]]
        out += [v, vals[k]]
    return np.array(out, dtype=complex) if len(out) == count else None


def lattice_degree_for(count: int, p: int) -> int:
    """Smallest degree whose full lattice on ``p`` generators has >= count members."""
    d = 0
    while len(lattice_exponents(p, d)) < count:
        d += 1
    return d


# --- objective ------------------------------------------------------------------------

@dataclass
class LambdaObjective:
    """Projection-residual objective for one output component.

    Attributes
    ----------
    H : ndarray, shape (Ms + 1, Mt)
        Target samples, one column per trajectory.
    Ts : float
    Ni : int
        Number of eigenvalues for this component.
    """

    H: np.ndarray
    Ts: float
    Ni: int

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=complex)
        if self.H.ndim != 2:
            raise DimensionError("H must be (Ms+1, Mt)")

    @classmethod
    def from_dataset(cls, ds: TrajectoryDataset, hvals, Ni: int) -> "LambdaObjective":
        """``hvals`` holds the component on every sample, shape ``(Mt, Ms+1)`` or flat."""
        hv = np.asarray(hvals).reshape(ds.Mt, ds.Ms + 1)
        return cls(hv.T, ds.Ts, int(Ni))

    @property
    def Ms(self) -> int:
        return self.H.shape[0] - 1

    @property
    def Mt(self) -> int:
        return self.H.shape[1]

    @property
    def h(self) -> np.ndarray:
        """Targets stacked trajectory-by-trajectory."""
        return self.H.T.reshape(-1)


def vandermonde(lam, Ms: int, Ts: float) -> np.ndarray:
    """``V[k, j] = exp(lam_j k Ts)`` for ``k = 0..Ms``."""
    lam = np.atleast_1d(np.asarray(lam, dtype=complex))
    if not np.all(np.isfinite(lam)):
        raise ValueError("eigenvalues must be finite")
    worst = lam.real * Ms * Ts
    if np.any(worst > _LOG_MAX):
        j = int(np.argmax(worst))
        raise ExponentialOverflow(
            f"exp(lambda * {Ms} * Ts) overflows for lambda = {lam[j]}")
    k = np.arange(Ms + 1)[:, None]
    with np.errstate(under="ignore"):
        return np.exp(k * Ts * lam[None, :])


def _column_norms(V: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(V), axis=0)
    safe = np.where(peak > 0, peak, 1.0)
    return peak * np.linalg.norm(V / safe, axis=0)


def _normalized_gram_cond(V: np.ndarray) -> float:
    norms = _column_norms(V)
    if np.any(norms == 0):
        return np.inf
    s = np.linalg.svd(V / norms, compute_uv=False)
    if s[-1] == 0 or s[0] / s[-1] > 1e150:
        return np.inf
    return float((s[0] / s[-1]) ** 2)


def _coefficients(V: np.ndarray, H: np.ndarray, method: str):
    """Least-squares coefficients q (Ni x Mt) and the path taken."""
    if method not in ("auto", "gram", "svd"):
        raise ValueError(f"unknown method {method!r}")
    if method != "svd":
        cond = _normalized_gram_cond(V)
        if cond <= GRAM_COND_LIMIT:
            norms = _column_norms(V)
            Vn = V / norms
            G = Vn.conj().T @ Vn
            q = np.linalg.solve(G, Vn.conj().T @ H) / norms[:, None]
            return q, "gram"
        if method == "gram":
            raise IllConditioned(
                f"Gram matrix condition number {cond:.3g} exceeds {GRAM_COND_LIMIT:g}; "
                "use fewer or better-separated eigenvalues")
    return pinv_solve(V, H), "svd"


def _check(obj: LambdaObjective, lam) -> np.ndarray:
    lam = np.atleast_1d(np.asarray(lam, dtype=complex))
    if lam.ndim != 1 or len(lam) == 0:
        raise ValueError("eigenvalue vector must be a nonempty 1-D array")
    if not np.all(np.isfinite(lam)):
        raise ValueError("eigenvalues must be finite")
    return lam


def objective_value(obj: LambdaObjective, lam, method: str = "auto") -> float:
    """Squared projection residual ``||h||^2 - ||L L^+ h||^2``.

    ``method='gram'`` evaluates the Gram-matrix closed form verbatim and
    raises :class:`IllConditioned` when the Gram matrix is near singular;
    ``'svd'`` projects with an orthonormal basis of the column space;
    ``'auto'`` picks Gram when well conditioned and forms the residual
    explicitly, which avoids cancellation near zero.
    """
    lam = _check(obj, lam)
    H = obj.H
    hh = float(np.vdot(H, H).real)
    if hh == 0.0:
        return 0.0
    V = vandermonde(lam, obj.Ms, obj.Ts)
    if method == "gram":
        q, _ = _coefficients(V, H, "gram")
        val = hh - float(np.real(np.vdot(H, V @ q)))
    else:
        q, _ = _coefficients(V, H, method)
        R = H - V @ q
        val = float(np.vdot(R, R).real)
    if val < -1e-9 * hh:
        log.debug("objective %.3e below zero beyond tolerance", val)
    return max(val, 0.0)


def objective_per_trajectory(obj: LambdaObjective, lam) -> np.ndarray:
    """Residual of each trajectory's independent Vandermonde fit."""
    lam = _check(obj, lam)
    V = vandermonde(lam, obj.Ms, obj.Ts)
    out = np.empty(obj.Mt)
    for t in range(obj.Mt):
        h = obj.H[:, t]
        r = h - V @ pinv_solve(V, h)
        out[t] = float(np.vdot(r, r).real)
    return out


def objective_gradient(obj: LambdaObjective, lam, strict: bool = True) -> np.ndarray:
    """Analytic gradient w.r.t. real and imaginary parts, interleaved.

    Returns ``[dRe lam_0, dIm lam_0, dRe lam_1, ...]``. With ``strict`` the
    Gram-matrix path is required and near-singular Gram matrices raise
    :class:`IllConditioned`; otherwise the coefficients fall back to the
    pseudoinverse.
    """
    lam = _check(obj, lam)
    H = obj.H
    grad = np.zeros(2 * len(lam))
    if not np.any(H):
        return grad
    V = vandermonde(lam, obj.Ms, obj.Ts)
    q, _ = _coefficients(V, H, "gram" if strict else "auto")
    D = obj.Ts * np.arange(obj.Ms + 1)[:, None] * V     # dV / dRe(lam)
    # h^H dL q and (Lq)^H dL q, each summed over trajectories.
    a = np.sum((H.conj().T @ D) * q.T, axis=0)
    b = np.sum(((V @ q).conj().T @ D) * q.T, axis=0)
    grad[0::2] = -2.0 * a.real + 2.0 * b.real
    # d/dIm multiplies dV by sqrt(-1): Re(i z) = -Im(z).
    grad[1::2] = 2.0 * a.imag - 2.0 * b.imag
    return grad


# --- optimisation -------------------------------------------------------------------

@dataclass
class OptimizeOptions:
    restarts: int = 5
    seed: int = 0
    max_iter: int = 200
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_halvings: int = 40
    gtol: float = 1e-8
    perturb_scale: float = 0.25
    conjugate_symmetric: bool = True


class _Parametrization:
    """Map between real parameters and eigenvalue vectors.

    Conjugate pairs share one (Re, Im) pair, real eigenvalues keep a
    single real coordinate, unpaired complex ones get two free coordinates.
    """

    def __init__(self, lam: np.ndarray, symmetric: bool):
        self.N = len(lam)
        self.groups = []      # (kind, indices)
        used = set()
        for j, v in enumerate(lam):
            if j in used:
                continue
            used.add(j)
            if not symmetric:
                self.groups.append(("free", (j,)))
                continue
            if abs(v.imag) <= 1e-12 * (1 + abs(v)):
                self.groups.append(("real", (j,)))
                continue
            partner = None
            for k in range(j + 1, self.N):
                if k not in used and abs(lam[k] - np.conj(v)) <= 1e-9 * (1 + abs(v)):
                    partner = k
                    break
            if partner is None:
                self.groups.append(("free", (j,)))
            else:
                used.add(partner)
                self.groups.append(("pair", (j, partner)))

    def to_params(self, lam) -> np.ndarray:
        p = []
        for kind, idx in self.groups:
            v = lam[idx[0]]
            p.extend([v.real] if kind == "real" else [v.real, v.imag])
        return np.array(p, dtype=float)

    def to_lam(self, p) -> np.ndarray:
        lam = np.empty(self.N, dtype=complex)
        i = 0
        for kind, idx in self.groups:
            if kind == "real":
                lam[idx[0]] = p[i]
                i += 1
                continue
            v = complex(p[i], p[i + 1])
            i += 2
            lam[idx[0]] = v
            if kind == "pair":
                lam[idx[1]] = v.conjugate()
        return lam

    def pull_gradient(self, g_full) -> np.ndarray:
        gre, gim = g_full[0::2], g_full[1::2]
        g = []
        for kind, idx in self.groups:
            j = idx[0]
            if kind == "real":
                g.append(gre[j])
            elif kind == "free":
                g.extend([gre[j], gim[j]])
            else:
                k = idx[1]
                g.extend([gre[j] + gre[k], gim[j] - gim[k]])
        return np.array(g)

    def scales(self, lam) -> np.ndarray:
        s = []
        for kind, idx in self.groups:
            a = abs(lam[idx[0]])
            s.extend([a] if kind == "real" else [a, a])
        return np.array(s)


def _bfgs(fun, grad, p0, opts: OptimizeOptions):
    """Minimise with BFGS and Armijo backtracking; returns (p, f, iterations)."""
    p = p0.copy()
    f = fun(p)
    g = grad(p)
    n = len(p)
    Hinv = np.eye(n) / max(1.0, np.linalg.norm(g))
    it = 0
    reset = False
    last_step = 1.0
    while it < opts.max_iter:
        if np.linalg.norm(g, np.inf) <= opts.gtol * (1.0 + abs(f)):
            break
        d = -Hinv @ g
        slope = float(g @ d)
        if slope >= 0:
            Hinv = np.eye(n) / max(1.0, np.linalg.norm(g))
            d = -Hinv @ g
            slope = float(g @ d)
        # Restart near the last accepted step instead of at 1 every time.
        step = min(1.0, 4.0 * last_step)
        accepted = False
        for _ in range(opts.max_halvings + 1):
            trial = p + step * d
            ft = fun(trial)
            if np.isfinite(ft) and ft <= f + opts.armijo_c * step * slope:
                accepted = True
                break
            step *= opts.backtrack
        if not accepted:
            if reset:
                break
            reset = True
            last_step = 1.0
            Hinv = np.eye(n) / max(1.0, np.linalg.norm(g))
            continue
        reset = False
        last_step = step
        gt = grad(trial)
        s, y = trial - p, gt - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if it == 0:
                Hinv = np.eye(n) * (sy / float(y @ y))
            rho = 1.0 / sy
            I = np.eye(n)
            Hinv = (I - rho * np.outer(s, y)) @ Hinv @ (I - rho * np.outer(y, s)) \
                + rho * np.outer(s, s)
        p, f, g = trial, ft, gt
        it += 1
    return p, f, it


def optimize_eigenvalues(obj: LambdaObjective, init, opts: Optional[OptimizeOptions] = None):
    """Locally minimise the projection residual from ``init`` plus random restarts.

    Returns the eigenvalue vector with the lowest objective seen; never
    worse than ``init``.
    """
    opts = opts or OptimizeOptions()
    init = _check(obj, init)
    if len(init) != obj.Ni:
        raise DimensionError(f"init has {len(init)} eigenvalues, objective expects {obj.Ni}")
    par = _Parametrization(init, opts.conjugate_symmetric)

    def fun(p):
        try:
            return objective_value(obj, par.to_lam(p))
        except (ExponentialOverflow, ValueError, np.linalg.LinAlgError):
            return np.inf

    def grad(p):
        return par.pull_gradient(objective_gradient(obj, par.to_lam(p), strict=False))

    p0 = par.to_params(init)
    f0 = fun(p0)
    best_p, best_f = p0, f0
    rng = make_rng(opts.seed, 7)
    sigma = opts.perturb_scale * par.scales(init)
    any_progress = False
    for r in range(opts.restarts + 1):
        start = p0 if r == 0 else p0 + sigma * rng.standard_normal(len(p0))
        if not np.isfinite(fun(start)):
            continue
        try:
            p, f, it = _bfgs(fun, grad, start, opts)
        except (IllConditioned, ExponentialOverflow, np.linalg.LinAlgError) as exc:
            log.debug("start %d aborted: %s", r, exc)
            continue
        any_progress |= it > 0
        log.debug("start %d: objective %.6g after %d iterations", r, f, it)
        if f < best_f:
            best_p, best_f = p, f
    if not any_progress and best_f >= f0:
        g0 = grad(p0)
        if np.linalg.norm(g0, np.inf) > opts.gtol * (1.0 + abs(f0)):
            warnings.warn("eigenvalue optimisation made no progress from any start")
    return par.to_lam(best_p)
