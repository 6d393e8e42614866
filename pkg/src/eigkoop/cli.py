"""Command-line interface: ``eigkoop {generate,learn,predict,table,mpc,selftest}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .errors import ConfigError, EigkoopError

log = logging.getLogger("eigkoop")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class StageError(RuntimeError):
    """Failure inside a pipeline stage; the message carries the stage label."""

    def __init__(self, stage, exc, code=EXIT_NUMERIC):
        super().__init__(f"{stage}: {exc}")
        self.code = code


def git_blob_hash(data: bytes) -> str:
    """Content hash computed the way ``git hash-object`` does."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out: Path, name: str, cfg: dict, files) -> Path:
    entries = {}
    for f in files:
        p = Path(f)
        entries[p.name] = git_blob_hash(p.read_bytes())
    doc = {"seed": cfg["data"]["seed"],
           "config_hash": git_blob_hash(json.dumps(cfg, sort_keys=True).encode()),
           "files": dict(sorted(entries.items()))}
    path = out / name
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# --- builders from configuration ------------------------------------------------------

def _vector_field(cfg):
    from .dynamics import inflate_state, preset
    vf = preset(cfg["system"]["preset"])
    return inflate_state(vf) if cfg["system"]["inflate_input"] else vf


class _PadSampler:
    """Extend sampled base states with zeros for inflated input coordinates."""

    def __init__(self, base, extra):
        self.base, self.extra = base, extra

    def sample(self, rng, count):
        import numpy as np
        pts = self.base.sample(rng, count)
        return np.hstack([pts, np.zeros((len(pts), self.extra))])


def _sampler(cfg, vf):
    from .dynamics import UniformCircle, UniformDisk
    from .pipeline import VanderpolInterior
    s = cfg["data"]["sampler"]
    r = s.get("radius", 1.0)
    base = {"circle": lambda: UniformCircle(r), "disk": lambda: UniformDisk(r),
            "vanderpol_interior": lambda: VanderpolInterior(r)}[s["kind"]]()
    extra = vf.state_dim - 2
    return _PadSampler(base, extra) if extra else base


def _learn_settings(cfg):
    from .pipeline import LearnSettings
    from .spectrum import OptimizeOptions
    lift, prd = cfg["lift"], cfg["predictor"]
    seed = cfg["data"]["seed"]
    return LearnSettings(
        N=lift["N"], eigmode=lift["eigmode"], extension=lift["extension"],
        delta2=lift["delta2"], c_mode=prd["c_mode"], c_noise=prd["c_noise"],
        b_steps=prd["b_steps"], seed=seed,
        partition=None if lift["partition"] is None else tuple(lift["partition"]),
        products=tuple((tuple(p["indices"]), tuple(p["powers"])) for p in lift["products"]),
        optimize=OptimizeOptions(restarts=lift["restarts"], max_iter=lift["max_iter"], seed=seed))


def _control(spec):
    from .pipeline import control_signal
    if spec is None:
        return None
    return control_signal((spec["kind"], spec.get("amplitude", 1.0),
                           spec.get("period", 0.3 if spec["kind"] == "square" else 0.06)))


def _mpc_spec(cfg, n_h):
    import numpy as np
    from .mpc import MpcSpec, ReferenceSchedule, box_constraints
    m = cfg["mpc"]
    kw = {}
    if "u_min" in m or "u_max" in m:
        nu = len(m.get("u_max", m.get("u_min")))
        E, F, b = box_constraints(m.get("u_min", [-np.inf] * nu), m.get("u_max", [np.inf] * nu), n_h)
        keep = np.isfinite(b)
        kw.update(E=E[keep], F=F[keep], b=b[keep])
    ref = m.get("reference")
    if ref is not None:
        kw["reference"] = ReferenceSchedule(ref["times"], ref["values"])
    return MpcSpec(Np=m["Np"], Q=np.array(m["Q"]), R=np.array(m["R"]),
                   QN=None if m.get("QN") is None else np.array(m["QN"]), **kw)


# --- subcommands ---------------------------------------------------------------------

def cmd_generate(cfg, out: Path):
    from .dynamics import ExplicitList, UniformRandomInput, generate_dataset
    d = cfg["data"]
    vf = _vector_field(cfg)
    try:
        ds = generate_dataset(vf, _sampler(cfg, vf), d["trajectories"], d["duration"], d["Ts"],
                              seed=d["seed"])
        ds_c = None
        if d["controlled"] is not None:
            c = d["controlled"]
            ds_c = generate_dataset(vf, ExplicitList(ds.initial_conditions), d["trajectories"],
                                    c["duration"], d["Ts"], UniformRandomInput(c["low"], c["high"]),
                                    seed=d["seed"])
    except (EigkoopError, ArithmeticError) as exc:
        raise StageError("generate", exc) from exc
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "data.csv"]
    ds.to_csv(files[0])
    if ds_c is not None:
        files.append(out / "data_controlled.csv")
        ds_c.to_csv(files[1])
    write_manifest(out, "manifest.json", cfg, files)
    log.info("wrote %s", ", ".join(str(f) for f in files))
    return files


def cmd_learn(cfg, out: Path, data=None, data_controlled=None):
    from .dynamics import TrajectoryDataset
    from .pipeline import learn_predictor
    data = Path(data) if data else out / "data.csv"
    want_b = cfg["data"]["controlled"] is not None
    ds = TrajectoryDataset.from_csv(data)
    ds_c = None
    if want_b:
        path_c = Path(data_controlled) if data_controlled else out / "data_controlled.csv"
        if not path_c.exists():
            raise StageError("fit_B", f"controlled dataset required (no file {path_c})", EXIT_IO)
        ds_c = TrajectoryDataset.from_csv(path_c)
    if abs(ds.Ts - cfg["data"]["Ts"]) > 1e-12 or ds.n != _vector_field(cfg).state_dim:
        raise ConfigError(f"{data}: dataset does not match the configured system/sampling")
    try:
        pred, report = learn_predictor(ds, _learn_settings(cfg), ds_c)
    except (EigkoopError, ArithmeticError) as exc:
        raise StageError("learn", exc) from exc
    out.mkdir(parents=True, exist_ok=True)
    pred.save(out / "predictor.json")
    (out / "learn_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    for i, (a, b) in enumerate(zip(report.objective_init, report.objective_final)):
        log.info("output %d: objective %.6g -> %.6g", i, a, b)
    return [out / "predictor.json", out / "learn_report.json"]


def _load_predictor(out: Path, path=None):
    from .predictor import LinearPredictor
    return LinearPredictor.load(Path(path) if path else out / "predictor.json")


def cmd_predict(cfg, out: Path, predictor=None):
    import numpy as np
    from .dynamics import simulate_batch
    from .predictor import predict, rmse_error
    from .svgplot import Panel, write_svg
    pred = _load_predictor(out, predictor)
    p = cfg["predict"]
    vf = _vector_field(cfg)
    x0 = np.asarray(p["x0"], dtype=float)
    steps = int(round(p["horizon"] / pred.Ts))
    ctrl = _control(p["control"])
    U = None if ctrl is None else ctrl.sequence(None, steps, vf.input_dim, pred.Ts)
    try:
        if steps:
            X = simulate_batch(vf, x0[None, :], pred.Ts, steps,
                               None if U is None else U[None])[0]
        else:
            X = x0[None, :]
        Y = predict(pred, x0, U if (U is not None and pred.Bd is not None) else None, steps)
    except (EigkoopError, ArithmeticError) as exc:
        raise StageError("predict", exc) from exc
    n, m = X.shape[1], (0 if U is None else U.shape[1])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "predict.csv"
    with open(path, "w") as fh:
        fh.write(",".join(["t"] + [f"x{i + 1}" for i in range(n)]
                          + [f"xhat{i + 1}" for i in range(Y.shape[1])]
                          + [f"u{i + 1}" for i in range(m)]) + "\n")
        for k in range(steps + 1):
            row = [format(k * pred.Ts, ".17g")] + [format(v, ".17g") for v in X[k]]
            row += [format(v, ".17g") for v in Y[k]]
            row += ([format(v, ".17g") for v in U[k]] if (U is not None and k < steps)
                    else [""] * m)
            fh.write(",".join(row) + "\n")
    files = [path]
    if steps and n == Y.shape[1]:
        log.info("prediction error %.3f%%", rmse_error(X, Y))
    if cfg["outputs"]["plots"]:
        t = np.arange(steps + 1) * pred.Ts
        panels = [Panel(f"x{i + 1}", "t [s]", f"x{i + 1}").add(t, X[:, i], "true")
                  .add(t, Y[:, i], "predicted", dashed=True) for i in range(min(n, Y.shape[1]))]
        write_svg(out / "predict.svg", panels, cols=len(panels))
        files.append(out / "predict.svg")
    return files


def cmd_table(cfg, out: Path):
    from .pipeline import evaluate_table
    from .spectrum import OptimizeOptions
    t = cfg["table"]
    controls = [None if c is None else (c["kind"], c.get("amplitude", 1.0),
                                        c.get("period", 0.3 if c["kind"] == "square" else 0.06))
                for c in t["controls"]]
    seed = cfg["data"]["seed"]
    try:
        cells = evaluate_table(cfg["system"]["preset"], t["N"], t["eigmodes"], controls,
                               trials=t["trials"], horizon=t["horizon"], seed=seed,
                               Mt=cfg["data"]["trajectories"],
                               optimize=OptimizeOptions(restarts=cfg["lift"]["restarts"],
                                                        max_iter=cfg["lift"]["max_iter"],
                                                        seed=seed))
    except (EigkoopError, ArithmeticError) as exc:
        raise StageError("table", exc) from exc
    out.mkdir(parents=True, exist_ok=True)
    path = out / "table.csv"
    Ns = sorted({c.N for c in cells})
    rows = {}
    for c in cells:
        rows.setdefault((c.control, c.eigmode), {})[c.N] = c
    with open(path, "w") as fh:
        fh.write("control,eigenvalues," + ",".join(f"N={N}" for N in Ns) + "\n")
        for (ctrl, mode), byN in rows.items():
            fh.write(f"{ctrl},{mode}," + ",".join(
                f"{byN[N].mean:.4f}" if N in byN else "" for N in Ns) + "\n")
    long = out / "table_long.csv"
    with open(long, "w") as fh:
        fh.write("system,N,eigenvalues,control,mean,std\n")
        for c in cells:
            fh.write(f"{c.system},{c.N},{c.eigmode},{c.control},{c.mean:.6f},{c.std:.6f}\n")
    trials = out / "table_trials.csv"
    n = cells[0].test_points.shape[1] if cells else 0
    with open(trials, "w") as fh:
        fh.write("system,N,eigenvalues,control,trial," + ",".join(f"x0_{i + 1}" for i in range(n))
                 + ",error\n")
        for c in cells:
            for j, (x0, e) in enumerate(zip(c.test_points, c.errors)):
                fh.write(f"{c.system},{c.N},{c.eigmode},{c.control},{j},"
                         + ",".join(format(v, ".17g") for v in x0) + f",{e:.17g}\n")
    for (ctrl, mode), byN in rows.items():
        log.info("%-7s %-9s %s", ctrl, mode, "  ".join(f"{byN[N].mean:7.2f}%" for N in Ns if N in byN))
    return [path, long, trials]


def cmd_mpc(cfg, out: Path, predictor=None):
    import numpy as np
    from .mpc import closed_loop
    from .svgplot import Panel, write_svg
    if not cfg.get("mpc"):
        raise ConfigError("mpc section required for the mpc command")
    pred = _load_predictor(out, predictor)
    spec = _mpc_spec(cfg, pred.n_h)
    m = cfg["mpc"]
    vf = _vector_field(cfg)
    try:
        lg = closed_loop(vf, pred, spec, m.get("x0", [0.0] * vf.state_dim), m.get("duration", 30.0))
    except (EigkoopError, ArithmeticError) as exc:
        raise StageError("mpc", exc) from exc
    out.mkdir(parents=True, exist_ok=True)
    path = out / "mpc_log.csv"
    lg.to_csv(path, timings=cfg["outputs"]["timings"])
    files = [path]
    if len(lg.t):
        log.info("closed loop: %d steps, mean QP iterations %.1f, mean solve %.3f ms, "
                 "mean lift %.3f ms, max |u| %.6g", len(lg.t), lg.qp_iters.mean(),
                 lg.solve_ms.mean(), lg.lift_ms.mean(), np.abs(lg.u).max())
    if cfg["outputs"]["plots"] and len(lg.t):
        panels = [Panel("Phase space", "x1", "x2").add(lg.x[:, 0], lg.x[:, 1], "trajectory")
                  .add(lg.ref[:, 0], lg.ref[:, 1], "reference", dashed=True)]
        for i in range(min(2, lg.x.shape[1])):
            pnl = Panel(f"x{i + 1}", "t [s]", f"x{i + 1}").add(lg.t, lg.x[:, i], f"x{i + 1}")
            if i < lg.ref.shape[1]:
                pnl.add(lg.t, lg.ref[:, i], "reference", dashed=True)
            panels.append(pnl)
        panels.append(Panel("Control input", "t [s]", "u").add(lg.t, lg.u[:, 0], "u"))
        write_svg(out / "mpc.svg", panels, cols=2)
        files.append(out / "mpc.svg")
    return files


def cmd_selftest(seed: int = 0):
    from .selftest import run
    ok = True
    for name, passed, detail in run(seed):
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        ok &= passed
    return ok


# --- entry point ---------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory (overrides outputs.directory)")
    common.add_argument("--seed", type=int, help="override data.seed")
    common.add_argument("--threads", type=int, help="BLAS/OpenMP thread count")
    common.add_argument("--verbose", "-v", action="count", default=0)
    p = argparse.ArgumentParser(prog="eigkoop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate trajectory datasets")
    lp = sub.add_parser("learn", parents=[common], help="learn a predictor from datasets")
    lp.add_argument("--data", help="uncontrolled dataset CSV (default <out>/data.csv)")
    lp.add_argument("--data-controlled", help="controlled dataset CSV")
    for name, hlp in (("predict", "compare prediction with simulation"),
                      ("mpc", "run closed-loop Koopman MPC")):
        sp = sub.add_parser(name, parents=[common], help=hlp)
        sp.add_argument("--predictor", help="predictor JSON (default <out>/predictor.json)")
    sub.add_parser("table", parents=[common], help="prediction-error table sweep")
    sub.add_parser("selftest", parents=[common], help="run oracle-based self checks")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selftest":
            return EXIT_OK if cmd_selftest(args.seed or 0) else EXIT_NUMERIC
        if not args.config:
            raise ConfigError("--config is required")
        cfg = cfgmod.load(args.config, args.seed)
        out = Path(args.out or cfg["outputs"]["directory"])
        if args.command == "generate":
            files = cmd_generate(cfg, out)
        elif args.command == "learn":
            files = cmd_learn(cfg, out, args.data, args.data_controlled)
        elif args.command == "predict":
            files = cmd_predict(cfg, out, args.predictor)
        elif args.command == "table":
            files = cmd_table(cfg, out)
        else:
            files = cmd_mpc(cfg, out, args.predictor)
        if args.command != "generate":
            write_manifest(out, f"manifest_{args.command}.json", cfg, files)
        for f in files:
            print(f)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (EigkoopError, ArithmeticError, ValueError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
