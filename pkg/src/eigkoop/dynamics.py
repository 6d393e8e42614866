"""Vector fields, fixed-step RK4 integration and trajectory datasets."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, IntegrationBlowup, UnsupportedOperation

log = logging.getLogger(__name__)

#: Largest internal RK4 step, seconds.
MAX_SUBSTEP = 1e-3


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """PCG64 generator for the stream ``(seed, *key)``.

    All randomness in the package is drawn from streams built here, so a
    seed fully determines every dataset and test set.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class VectorField:
    """Right-hand side ``f(x, u)`` of ``dx/dt = f(x, u)``.

    ``func`` must broadcast over leading axes: ``x`` has shape ``(..., n)``
    and ``u`` has shape ``(..., m)``.
    """

    state_dim: int
    input_dim: int
    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    name: str = "custom"

    def eval(self, x, u=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if u is None:
            u = np.zeros(x.shape[:-1] + (self.input_dim,))
        u = np.asarray(u, dtype=float)
        return self.func(x, u)

    __call__ = eval


def _vanderpol(x, u):
    x1, x2 = x[..., 0], x[..., 1]
    u0 = u[..., 0] if u.shape[-1] else 0.0
    return np.stack([2.0 * x2, -0.8 * x1 + 2.0 * x2 - 10.0 * x1**2 * x2 + u0], axis=-1)


def _duffing(x, u):
    x1, x2 = x[..., 0], x[..., 1]
    u0 = u[..., 0] if u.shape[-1] else 0.0
    return np.stack([x2, -0.5 * x2 - x1 * (4.0 * x1**2 - 1.0) + 0.5 * u0], axis=-1)


VANDERPOL = VectorField(2, 1, _vanderpol, "vanderpol")
DUFFING = VectorField(2, 1, _duffing, "duffing")

PRESETS = {"vanderpol": VANDERPOL, "duffing": DUFFING}


def preset(name: str) -> VectorField:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown system preset {name!r}; "
                       f"choose from {sorted(PRESETS)}") from None


def inflate_state(vf: VectorField) -> VectorField:
    """Append the inputs to the state so the new input is their derivative.

    The inflated field has state ``[x, v]`` and obeys ``x' = f(x, v)``,
    ``v' = u``.
    """
    if vf.input_dim < 1:
        raise UnsupportedOperation(
            f"state inflation needs input_dim >= 1 ({vf.name} has none)")
    n, m = vf.state_dim, vf.input_dim

    def func(xv, u):
        x, v = xv[..., :n], xv[..., n:]
        return np.concatenate([vf.func(x, v), np.broadcast_to(u, v.shape)], axis=-1)

    return VectorField(n + m, m, func, f"{vf.name}_inflated")


def _n_substeps(dt: float) -> int:
    return max(1, math.ceil(dt / MAX_SUBSTEP - 1e-9))


def _rk4_interval(vf: VectorField, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    nsub = _n_substeps(dt)
    h = dt / nsub
    f = vf.func
    for _ in range(nsub):
        k1 = f(x, u)
        k2 = f(x + 0.5 * h * k1, u)
        k3 = f(x + 0.5 * h * k2, u)
        k4 = f(x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def simulate_batch(vf: VectorField, x0, dt: float, steps: int, inputs=None) -> np.ndarray:
    """Integrate many initial conditions at once under ZOH inputs.

    Parameters
    ----------
    x0 : array_like, shape (B, n)
    inputs : array_like, shape (B, steps, m), optional
        Input held constant over each interval; zero if omitted.

    Returns
    -------
    ndarray, shape (B, steps + 1, n)
    """
    X = np.array(x0, dtype=float, ndmin=2)
    B, n = X.shape
    if n != vf.state_dim:
        raise DimensionError(f"state has length {n}, field expects {vf.state_dim}")
    if dt <= 0 or steps < 0:
        raise ValueError("dt must be positive and steps nonnegative")
    if inputs is None:
        U = np.zeros((B, steps, vf.input_dim))
    else:
        U = np.asarray(inputs, dtype=float)
        if U.shape != (B, steps, vf.input_dim):
            raise DimensionError(
                f"inputs shape {U.shape} != {(B, steps, vf.input_dim)}")
    out = np.empty((B, steps + 1, n))
    out[:, 0] = X
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            X = _rk4_interval(vf, X, U[:, k], dt)
            if not np.all(np.isfinite(X)):
                bad = int(np.flatnonzero(~np.all(np.isfinite(X), axis=1))[0])
                raise IntegrationBlowup(
                    f"non-finite state at step {k + 1} (batch member {bad})",
                    step=k + 1, trajectory=bad)
            out[:, k + 1] = X
    return out


def integrate(vf: VectorField, x0, u=None, dt: float = 0.01, steps: int = 1) -> np.ndarray:
    """Classical RK4 with internal substeps of at most 1 ms.

    Returns the ``steps + 1`` sampled states, ``x0`` included. ``u`` is a
    constant input (zero when omitted).
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    inputs = None
    if u is not None:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        inputs = np.broadcast_to(u, (1, steps, vf.input_dim))
    return simulate_batch(vf, x0[None, :], dt, steps, inputs)[0]


# --- initial-condition samplers -------------------------------------------------

@dataclass(frozen=True)
class UniformCircle:
    """Points uniform on the circle of given radius (2-D states)."""

    radius: float = 1.0
    center: tuple = (0.0, 0.0)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        th = rng.uniform(0.0, 2.0 * np.pi, size=count)
        pts = self.radius * np.column_stack([np.cos(th), np.sin(th)])
        return pts + np.asarray(self.center)


@dataclass(frozen=True)
class UniformDisk:
    """Points uniform in the disk of given radius (2-D states)."""

    radius: float = 1.0
    center: tuple = (0.0, 0.0)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        th = rng.uniform(0.0, 2.0 * np.pi, size=count)
        r = self.radius * np.sqrt(rng.uniform(0.0, 1.0, size=count))
        pts = np.column_stack([r * np.cos(th), r * np.sin(th)])
        return pts + np.asarray(self.center)


@dataclass(frozen=True)
class ExplicitList:
    """Fixed list of points, returned in order."""

    points: np.ndarray

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or len(pts) < count:
            raise ValueError(f"need {count} explicit points, have {len(pts)}")
        return pts[:count].copy()


def _distinct_samples(sampler, rng, count: int, tol: float = 1e-12, max_rounds: int = 100):
    pts = sampler.sample(rng, count)
    if isinstance(sampler, ExplicitList):
        if _duplicate_mask(pts, tol).any():
            raise ValueError("explicit initial conditions contain duplicates")
        return pts
    for _ in range(max_rounds):
        dup = _duplicate_mask(pts, tol)
        if not dup.any():
            return pts
        pts[dup] = sampler.sample(rng, int(dup.sum()))
    raise RuntimeError("could not draw pairwise-distinct initial conditions")


def _duplicate_mask(pts: np.ndarray, tol: float) -> np.ndarray:
    dup = np.zeros(len(pts), dtype=bool)
    for i in range(1, len(pts)):
        d = np.max(np.abs(pts[:i] - pts[i]), axis=1)
        dup[i] = bool(np.any(d <= tol))
    return dup


# --- input policies ---------------------------------------------------------------

@dataclass(frozen=True)
class UniformRandomInput:
    """Fresh uniform value in ``[lo, hi]`` per sampling interval and channel."""

    lo: float = -1.0
    hi: float = 1.0

    def sequence(self, rng, steps: int, m: int, Ts: float) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(steps, m))


@dataclass(frozen=True)
class SignalInput:
    """Deterministic signal ``u(t)`` sampled at ``k * Ts`` and held."""

    func: Callable[[float], Sequence[float]]
    label: str = "signal"

    def sequence(self, rng, steps: int, m: int, Ts: float) -> np.ndarray:
        return np.array([np.broadcast_to(np.asarray(self.func(k * Ts), float), (m,))
                         for k in range(steps)]).reshape(steps, m)


def square_wave(amplitude: float = 1.0, period: float = 0.3) -> SignalInput:
    def f(t):
        # Offset keeps sample points off the switching instants.
        phase = math.fmod(t + 1e-9, period)
        return [amplitude if phase < 0.5 * period else -amplitude]
    return SignalInput(f, f"square({amplitude},{period})")


def sine_wave(amplitude: float = 1.0, period: float = 0.06) -> SignalInput:
    return SignalInput(lambda t: [amplitude * math.sin(2.0 * math.pi * t / period)],
                       f"sine({amplitude},{period})")


# --- datasets -----------------------------------------------------------------------

@dataclass
class TrajectoryDataset:
    """Equal-length, equidistantly sampled trajectories.

    Attributes
    ----------
    states : ndarray, shape (Mt, Ms + 1, n)
    Ts : float
    inputs : ndarray, shape (Mt, Ms, m), optional
        Input held over ``[k Ts, (k+1) Ts)``.
    """

    states: np.ndarray
    Ts: float
    inputs: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 3:
            raise DimensionError(f"states must be 3-D, got {self.states.shape}")
        if not self.Ts > 0:
            raise ValueError(f"Ts must be positive, got {self.Ts}")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("states contain non-finite values")
        if self.inputs is not None:
            self.inputs = np.asarray(self.inputs, dtype=float)
            want = (self.Mt, self.Ms)
            if self.inputs.ndim != 3 or self.inputs.shape[:2] != want:
                raise DimensionError(
                    f"inputs shape {self.inputs.shape} inconsistent with {want}")

    @property
    def Mt(self) -> int:
        return self.states.shape[0]

    @property
    def Ms(self) -> int:
        return self.states.shape[1] - 1

    @property
    def n(self) -> int:
        return self.states.shape[2]

    @property
    def m(self) -> int:
        return 0 if self.inputs is None else self.inputs.shape[2]

    @property
    def initial_conditions(self) -> np.ndarray:
        return self.states[:, 0, :]

    def samples(self) -> np.ndarray:
        """All states, trajectory-major and time-minor, shape ``(Mt (Ms+1), n)``."""
        return self.states.reshape(-1, self.n)

    def truncate(self, steps: int) -> "TrajectoryDataset":
        """Keep the first ``steps`` intervals of every trajectory."""
        inputs = None if self.inputs is None else self.inputs[:, :steps]
        return TrajectoryDataset(self.states[:, :steps + 1], self.Ts, inputs, dict(self.meta))

    # CSV layout: traj,k,t,x1..xn[,u1..um]; the last sample row has no input.
    def to_csv(self, path) -> None:
        n, m = self.n, self.m
        header = ["traj", "k", "t"] + [f"x{i + 1}" for i in range(n)] \
            + [f"u{i + 1}" for i in range(m)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for j in range(self.Mt):
                for k in range(self.Ms + 1):
                    row = [str(j), str(k), _fmt(k * self.Ts)]
                    row += [_fmt(v) for v in self.states[j, k]]
                    if m:
                        if k < self.Ms:
                            row += [_fmt(v) for v in self.inputs[j, k]]
                        else:
                            row += [""] * m
                    w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "TrajectoryDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[:3] != ["traj", "k", "t"]:
            raise ValueError(f"{path}: bad dataset header {header[:3]}")
        n = sum(1 for h in header if h.startswith("x"))
        m = sum(1 for h in header if h.startswith("u"))
        traj = np.array([int(r[0]) for r in body])
        ks = np.array([int(r[1]) for r in body])
        Mt = int(traj.max()) + 1
        Ms = int(ks.max())
        if len(body) != Mt * (Ms + 1):
            raise ValueError(f"{path}: trajectories have unequal lengths")
        states = np.array([[float(v) for v in r[3:3 + n]] for r in body]).reshape(Mt, Ms + 1, n)
        Ts = float(body[1][2]) - float(body[0][2]) if Ms >= 1 else float("nan")
        inputs = None
        if m:
            U = np.array([[float(v) if v != "" else 0.0 for v in r[3 + n:3 + n + m]]
                          for r in body]).reshape(Mt, Ms + 1, m)
            inputs = U[:, :Ms]
        return cls(states, Ts, inputs)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def generate_dataset(vf: VectorField, sampler, Mt: int, duration: float, Ts: float,
                     input_policy=None, seed: int = 0) -> TrajectoryDataset:
    """Simulate ``Mt`` trajectories of length ``duration`` sampled every ``Ts``.

    Initial conditions come from stream ``(seed, 0)``; the input sequence of
    trajectory ``j`` from stream ``(seed, 1, j)``.
    """
    if Mt < 1:
        raise ValueError(f"Mt must be >= 1, got {Mt}")
    ratio = duration / Ts
    Ms = int(round(ratio))
    if abs(ratio - Ms) > 1e-9 or Ms < 1:
        raise ValueError(f"duration/Ts = {ratio} is not a positive integer")
    X0 = _distinct_samples(sampler, make_rng(seed, 0), Mt)
    inputs = None
    if input_policy is not None:
        if vf.input_dim < 1:
            raise UnsupportedOperation(f"{vf.name} has no inputs to excite")
        inputs = np.stack([input_policy.sequence(make_rng(seed, 1, j), Ms, vf.input_dim, Ts)
                           for j in range(Mt)])
    try:
        states = simulate_batch(vf, X0, Ts, Ms, inputs)
    except IntegrationBlowup as exc:
        raise IntegrationBlowup(f"trajectory {exc.trajectory}: {exc}",
                                step=exc.step, trajectory=exc.trajectory) from exc
    meta = {"system": vf.name, "seed": int(seed), "duration": float(duration)}
    return TrajectoryDataset(states, float(Ts), inputs, meta)
