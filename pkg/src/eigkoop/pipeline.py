"""End-to-end learning and the prediction-error table protocol."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .boundary import OutputPartition, optimal_boundary, observable_values
from .dynamics import (DUFFING, VANDERPOL, ExplicitList, TrajectoryDataset, UniformCircle,
                       UniformDisk, UniformRandomInput, VectorField, generate_dataset,
                       make_rng, simulate_batch, sine_wave, square_wave, integrate)
from .eigfun import EigenfunctionSet
from .predictor import LinearPredictor, assemble_AC, fit_B, identity_observable, predict, rmse_error
from .spectrum import (LambdaObjective, OptimizeOptions, conjugate_closed_prefix,
                       dmd_eigenvalues, lattice,
                       lattice_degree_for, objective_value, optimize_eigenvalues)

log = logging.getLogger(__name__)


@dataclass
class LearnSettings:
    N: int = 20
    eigmode: str = "optimized"           # "lattice" | "optimized"
    extension: str = "auto"
    delta2: float = 0.0
    c_mode: str = "bdiag"                # "bdiag" | "l2_fit" | "sup_fit"
    c_noise: float = 0.0                 # half-width of uniform noise on C-fit samples
    b_steps: Optional[int] = None
    partition: Optional[tuple] = None     # per-output eigenvalue counts; even split if None
    products: tuple = ()                  # ((indices, powers), ...) appended after learning
    optimize: OptimizeOptions = field(default_factory=OptimizeOptions)
    seed: int = 0


@dataclass
class LearnReport:
    eigenvalues_init: list
    eigenvalues_final: list
    objective_init: list
    objective_final: list
    seconds: float = 0.0

    def to_dict(self):
        c = lambda v: [[float(z.real), float(z.imag)] for z in v]
        return {"eigenvalues_init": [c(v) for v in self.eigenvalues_init],
                "eigenvalues_final": [c(v) for v in self.eigenvalues_final],
                "objective_init": self.objective_init, "objective_final": self.objective_final,
                "seconds": self.seconds}


def initial_eigenvalues(ds: TrajectoryDataset, Ni: int) -> np.ndarray:
    """First ``Ni`` lattice members generated by the DMD eigenvalues.

    The selection keeps conjugate pairs together so that the resulting
    predictor is real.
    """
    base = dmd_eigenvalues(ds).values
    d = lattice_degree_for(Ni, len(base))
    for _ in range(64):
        lam = conjugate_closed_prefix(lattice(base, d), Ni)
        if lam is not None:
            return lam
        d += 1      # coincident combinations were merged or pairs did not fit
    raise ValueError(f"could not seed {Ni} eigenvalues from the DMD lattice")


def learn_eigenfunctions(ds: TrajectoryDataset, settings: LearnSettings,
                         h: Callable = identity_observable):
    """Select eigenvalues and boundary values, propagate and extend.

    Returns ``(EigenfunctionSet, LearnReport)``.
    """
    t0 = time.perf_counter()
    hv = observable_values(ds, h)
    n_h = hv.shape[2]
    if settings.partition is not None:
        part = OutputPartition(tuple(settings.partition))
        if part.N != settings.N or part.n_h != n_h:
            raise ValueError(f"partition {part.Ni} does not split N={settings.N} over {n_h} outputs")
    else:
        part = OutputPartition.even(settings.N, n_h)
    lam0 = initial_eigenvalues(ds, part.Ni[0])
    inits, finals, f_init, f_final = [], [], [], []
    for i, Ni in enumerate(part.Ni):
        init = lam0 if len(lam0) == Ni else initial_eigenvalues(ds, Ni)
        obj = LambdaObjective.from_dataset(ds, hv[:, :, i], Ni)
        fi = objective_value(obj, init)
        lam = init
        if settings.eigmode == "optimized":
            opts = replace(settings.optimize, seed=settings.optimize.seed + 1000 * i)
            lam = optimize_eigenvalues(obj, init, opts)
        elif settings.eigmode != "lattice":
            raise ValueError(f"unknown eigmode {settings.eigmode!r}")
        inits.append(init)
        finals.append(lam)
        f_init.append(fi)
        f_final.append(objective_value(obj, lam))
        log.info("output %d: objective %.4g -> %.4g", i, fi, f_final[-1])
    bm = optimal_boundary(ds, hv, part, finals)
    lift = EigenfunctionSet.from_boundary(ds, bm)
    if settings.products:
        lift = lift.with_products(settings.products)
    lift.fit_extensions(ds, settings.extension, settings.delta2)
    report = LearnReport(inits, finals, f_init, f_final, time.perf_counter() - t0)
    return lift, report


def learn_predictor(ds: TrajectoryDataset, settings: LearnSettings,
                    ds_c: Optional[TrajectoryDataset] = None,
                    h: Callable = identity_observable):
    """Uncontrolled eigenfunctions, ``A`` and ``C``, then ``B`` from controlled data."""
    lift, report = learn_eigenfunctions(ds, settings, h)
    samples = None
    if settings.c_mode != "bdiag":
        samples = ds.samples()
        if settings.c_noise > 0:
            rng = make_rng(settings.seed, 11)
            samples = samples + rng.uniform(-settings.c_noise, settings.c_noise, samples.shape)
    A, C = assemble_AC(lift, settings.c_mode, samples, h)
    pred = LinearPredictor.from_eigfun(lift, C)
    if ds_c is not None:
        _, Bd = fit_B(pred, ds_c, h, settings.b_steps)
        pred = LinearPredictor.from_eigfun(lift, C, Bd=Bd)
    pred.info = {"report": report.to_dict()}
    return pred, report


# --- table protocol ------------------------------------------------------------------

def _point_in_polygon(pts, poly):
    """Even-odd rule; ``pts (Q, 2)``, ``poly (P, 2)`` closed implicitly."""
    x, y = pts[:, 0][:, None], pts[:, 1][:, None]
    x1, y1 = poly[:, 0][None, :], poly[:, 1][None, :]
    x2, y2 = np.roll(poly[:, 0], -1)[None, :], np.roll(poly[:, 1], -1)[None, :]
    crosses = ((y1 > y) != (y2 > y))
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    return np.sum(crosses & (x < xint), axis=1) % 2 == 1


def vanderpol_limit_cycle(Ts: float = 0.01) -> np.ndarray:
    """One period of the attracting limit cycle as a polygon."""
    X = integrate(VANDERPOL, [0.05, 0.0], dt=Ts, steps=int(40 / Ts))
    tail = X[-int(8 / Ts):]
    # Cut one revolution: successive upward crossings of x2 = 0 with x1 > 0.
    s = np.flatnonzero((tail[:-1, 1] < 0) & (tail[1:, 1] >= 0) & (tail[:-1, 0] > 0))
    return tail[s[0]:s[1] + 1] if len(s) >= 2 else tail


class VanderpolInterior:
    """Uniform in a disk, keeping only points strictly inside the limit cycle."""

    def __init__(self, radius: float = 0.25):
        self.radius = radius
        self.poly = vanderpol_limit_cycle()

    def sample(self, rng, count):
        out = np.empty((0, 2))
        disk = UniformDisk(self.radius)
        while len(out) < count:
            pts = disk.sample(rng, count)
            out = np.vstack([out, pts[_point_in_polygon(pts, self.poly)]])
        return out[:count]


@dataclass(frozen=True)
class SystemProtocol:
    """Data-generation and test settings for one benchmark system."""

    vf: VectorField
    Mt: int
    duration: float
    Ts: float
    sampler: object
    control_duration: float
    test_sampler_factory: Callable
    c_mode: str
    c_noise: float
    N_grid: tuple


def protocol(name: str, Mt: Optional[int] = None) -> SystemProtocol:
    if name == "vanderpol":
        return SystemProtocol(VANDERPOL, Mt or 100, 5.0, 0.01, UniformCircle(0.05), 2.0,
                              VanderpolInterior, "l2_fit", 0.05, (4, 8, 12, 16, 20))
    if name == "duffing":
        return SystemProtocol(DUFFING, Mt or 100, 8.0, 0.01, UniformCircle(1.0), 2.0,
                              lambda: UniformDisk(1.0), "bdiag", 0.0, (12, 16, 20, 24, 28))
    raise KeyError(f"no protocol for system {name!r}")


def make_datasets(proto: SystemProtocol, seed: int, controlled: bool = True):
    ds = generate_dataset(proto.vf, proto.sampler, proto.Mt, proto.duration, proto.Ts, seed=seed)
    ds_c = None
    if controlled:
        ds_c = generate_dataset(proto.vf, ExplicitList(ds.initial_conditions), proto.Mt,
                                proto.control_duration, proto.Ts,
                                UniformRandomInput(-1.0, 1.0), seed=seed)
    return ds, ds_c


def control_signal(spec):
    """``None``, ``('square', amp, period)`` or ``('sine', amp, period)``."""
    if spec is None or spec == "none":
        return None
    kind, amp, period = spec
    return {"square": square_wave, "sine": sine_wave}[kind](amp, period)


def trial_errors(pred: LinearPredictor, vf: VectorField, X0, horizon: float, control=None):
    """Per-initial-condition percentage errors over ``horizon`` seconds."""
    Ts = pred.Ts
    steps = int(round(horizon / Ts))
    U = None
    if control is not None:
        U = np.broadcast_to(control.sequence(None, steps, vf.input_dim, Ts),
                            (len(X0), steps, vf.input_dim))
    Xtrue = simulate_batch(vf, X0, Ts, steps, U)
    Y = predict(pred, X0, None if U is None else U[0], steps)
    return np.array([rmse_error(Xtrue[q], Y[q]) for q in range(len(X0))]), Xtrue, Y


@dataclass
class TableCell:
    system: str
    N: int
    eigmode: str
    control: str
    mean: float
    std: float
    errors: np.ndarray = field(repr=False, default=None)
    test_points: np.ndarray = field(repr=False, default=None)


def evaluate_table(system: str, N_values: Optional[Sequence[int]] = None,
                   eigmodes: Sequence[str] = ("lattice", "optimized"),
                   controls: Sequence = (None,), trials: int = 500, horizon: float = 1.0,
                   seed: int = 0, Mt: Optional[int] = None,
                   optimize: Optional[OptimizeOptions] = None):
    """Mean and standard deviation of prediction errors per (N, eigmode, control)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    proto = protocol(system, Mt)
    need_b = any(c not in (None, "none") for c in controls)
    ds, ds_c = make_datasets(proto, seed, controlled=need_b)
    X0 = proto.test_sampler_factory().sample(make_rng(seed, 99), trials)
    cells = []
    for N in (N_values or proto.N_grid):
        for mode in eigmodes:
            settings = LearnSettings(N=N, eigmode=mode, c_mode=proto.c_mode,
                                     c_noise=proto.c_noise, seed=seed,
                                     optimize=optimize or OptimizeOptions(seed=seed))
            pred, _ = learn_predictor(ds, settings, ds_c if need_b else None)
            for ctrl in controls:
                errs, _, _ = trial_errors(pred, proto.vf, X0, horizon, control_signal(ctrl))
                label = "none" if ctrl in (None, "none") else f"{ctrl[0]}"
                cells.append(TableCell(system, N, mode, label, float(errs.mean()),
                                       float(errs.std()), errs, X0))
                log.info("%s N=%d %s %s: %.2f%% (sd %.2f)", system, N, mode, label,
                         cells[-1].mean, cells[-1].std)
    return cells
