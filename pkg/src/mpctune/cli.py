"""Command-line front end.

Subcommands ``simulate``, ``tune``, ``benchmark``, ``validate`` and
``grid``.  Every command that writes files puts the resolved configuration
next to its outputs as ``config.json``.

Exit codes: 0 success, 2 configuration error, 3 infeasible result
(``validate`` only), 4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bo, config as cfgmod
from .config import ConfigError, RunConfig
from .control import ControllerParams
from .dynamics import Context
from .closedloop import TIMING_MODES, write_trace_csv
from .tuner import (
    ALGORITHMS,
    Tuner,
    export_grid,
    search_space,
    step_time_grid,
    validation_seed,
    validate,
)

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_RUNTIME = 0, 2, 3, 4
BENCHMARK_COLUMNS = ("algorithm", "feasibility", "obj_validation", "obj_gap")


class ArtifactError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Output helpers


def write_atomic(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return path


def write_json(path: str | Path, obj) -> Path:
    return write_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _finite(v: float | None) -> float | None:
    return None if v is None or not math.isfinite(v) else float(v)


# --------------------------------------------------------------------------
# Parameter parsing


def controller_params(values: Sequence[float] | None, config: RunConfig) -> ControllerParams:
    """``(H_u, H_p, lambda_MPC, lambda_KF)``, checked against the configured bounds."""
    hu, hp, lm, lk = values if values is not None else (15, 15, -3.0, -1.0)
    if float(hu) != int(hu) or float(hp) != int(hp):
        raise ConfigError("theta", "horizons must be integers")
    s = config.tuner
    lo, hi = s.horizon_bounds
    checks = (
        ("theta.control_horizon", hu, lo, hi),
        ("theta.prediction_horizon", hp, lo, hi),
        ("theta.lambda_mpc", lm, *s.lambda_mpc_bounds),
        ("theta.lambda_kf", lk, *s.lambda_kf_bounds),
    )
    for name, v, a, b in checks:
        if not a <= v <= b:
            raise ConfigError(name, f"{v} outside bounds [{a}, {b}]")
    try:
        return ControllerParams(int(hu), int(hp), float(lm), float(lk))
    except ValueError as exc:
        raise ConfigError("theta", str(exc)) from None


def context_from(values: Sequence[float] | None, config: RunConfig) -> Context:
    if values is None:
        return Context.from_array(config.context.mean)
    try:
        return Context.from_array(values)
    except ValueError as exc:
        raise ConfigError("context", str(exc)) from None


def resolve_config(args) -> RunConfig:
    cfg = cfgmod.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.timing is not None:
        changes["timing"] = args.timing
    if args.out is not None:
        changes["out"] = args.out
    return cfg.replace(**changes) if changes else cfg


# --------------------------------------------------------------------------
# Commands


def cmd_simulate(config: RunConfig, theta=None, context=None, trace: bool = False, stdout=None) -> int:
    stdout = stdout or sys.stdout
    params = controller_params(theta, config)
    ctx = context_from(context, config)
    sim = config.simulator()
    out = sim.run(params, ctx, config.seed, timing=config.timing, record_trace=trace)
    result = {"params": list(params.as_tuple()), "context": [ctx.stiffness, ctx.damping], "seed": config.seed,
              "ite": _finite(out.ite), "overshoot": _finite(out.overshoot), "step_time": _finite(out.step_time),
              "failed": out.failed}
    stdout.write(json.dumps(result, sort_keys=True) + "\n")
    if trace:
        out_dir = Path(config.out)
        write_atomic(out_dir / "config.json", cfgmod.dumps(config))
        write_trace_csv(out, out_dir / "trace.csv")
    return EXIT_RUNTIME if out.failed else EXIT_OK


def run_one(config: RunConfig, algorithm: str, seed: int, out_dir: Path | None) -> dict:
    """Tune once; write history, data and summary when ``out_dir`` is given."""
    tuner = Tuner(config.tuner, config.simulator(), config.context, config.timing)
    log = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log = out_dir / "history.jsonl.tmp"
    result = tuner.run(algorithm, seed, log)
    summary = result.summary()
    summary["validation_seed"] = validation_seed(seed)
    if out_dir is not None:
        os.replace(log, out_dir / "history.jsonl")
        write_json(out_dir / "data.json", {"algorithm": algorithm, "seed": seed, "fit_seed": result.fit_seed,
                                           "observations": result.data.to_records()})
        write_json(out_dir / "summary.json", summary)
    return summary


def cmd_tune(config: RunConfig, algorithm: str = "IV", stdout=None) -> int:
    stdout = stdout or sys.stdout
    out_dir = Path(config.out)
    write_atomic(out_dir / "config.json", cfgmod.dumps(config))
    summary = run_one(config, algorithm, config.seed, out_dir)
    stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    return EXIT_OK


def _benchmark_job(job):
    text, algorithm, seed, out_dir = job
    return run_one(cfgmod.loads(text), algorithm, seed, None if out_dir is None else Path(out_dir))


def benchmark_table(summaries: Sequence[dict], algorithms: Sequence[str]) -> list[dict]:
    """Fraction of validation-feasible results, mean validation objective and mean gap."""
    rows = []
    for alg in algorithms:
        runs = [s for s in summaries if s["algorithm"] == alg]
        feas = [bool(s["validation"] and s["validation"]["feasible"]) for s in runs]
        vals = [s["validation"]["objective"] for s in runs if s["validation"] and _finite(s["validation"]["objective"]) is not None]
        gaps = [s["gap"] for s in runs if _finite(s["gap"]) is not None]
        rows.append({
            "algorithm": alg,
            "feasibility": float(np.mean(feas)) if feas else float("nan"),
            "obj_validation": float(np.mean(vals)) if vals else float("nan"),
            "obj_gap": float(np.mean(gaps)) if gaps else float("nan"),
        })
    return rows


def cmd_benchmark(config: RunConfig, workers: int = 1, stdout=None) -> int:
    stdout = stdout or sys.stdout
    out_dir = Path(config.out)
    write_atomic(out_dir / "config.json", cfgmod.dumps(config))
    text = cfgmod.dumps(config)
    jobs = [(text, a, s, str(out_dir / f"{a}_seed{s}")) for a in config.algorithms for s in config.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_benchmark_job, jobs))
    else:
        summaries = [_benchmark_job(j) for j in jobs]
    per_run = [{"algorithm": s["algorithm"], "seed": s["seed"],
                "feasible": bool(s["validation"] and s["validation"]["feasible"]),
                "obj_train": s["train_objective"],
                "obj_validation": s["validation"]["objective"] if s["validation"] else float("nan"),
                "obj_gap": s["gap"]} for s in summaries]
    table = benchmark_table(summaries, config.algorithms)
    write_atomic(out_dir / "runs.csv", rows_to_csv(per_run))
    write_atomic(out_dir / "benchmark.csv", rows_to_csv(table, BENCHMARK_COLUMNS))
    stdout.write(rows_to_csv(table, BENCHMARK_COLUMNS))
    return EXIT_OK


def cmd_validate(config: RunConfig, theta=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    params = controller_params(theta, config)
    s = config.tuner
    v = validate(params, config.simulator(), config.context, s.max_overshoot, s.max_step_time,
                 validation_seed(config.seed), s.n_validation, config.timing)
    stdout.write(json.dumps({"params": list(params.as_tuple()), "seed": config.seed,
                             "validation": {k: (_finite(x) if isinstance(x, float) else x) for k, x in v.as_dict().items()}},
                            sort_keys=True) + "\n")
    return EXIT_OK if v.feasible else EXIT_INFEASIBLE


def load_run(run_dir: str | Path) -> tuple[RunConfig, dict]:
    run_dir = Path(run_dir)
    for name in ("config.json", "data.json"):
        if not (run_dir / name).is_file():
            raise ArtifactError(f"missing tune artifact {run_dir / name} (run `tune --out {run_dir}` first)")
    cfg = cfgmod.loads((run_dir / "config.json").read_text())
    data = json.loads((run_dir / "data.json").read_text())
    return cfg, data


def cmd_grid(config: RunConfig, run_dir: str | Path, stdout=None) -> int:
    """Refit the final surrogates of a tune run and tabulate them on a grid."""
    stdout = stdout or sys.stdout
    run_cfg, artifacts = load_run(run_dir)
    s = run_cfg.tuner
    space = search_space(s)
    data = bo.Dataset.from_records(artifacts["observations"])
    sur = bo.fit_surrogates(data, space, s.stage1_config(artifacts["algorithm"]), artifacts["fit_seed"])
    rows = export_grid(sur, space, config.grid.dims, config.grid.resolution)
    out_dir = Path(config.out)
    write_atomic(out_dir / "grid.csv", rows_to_csv(rows))
    if s.case == "benchmark":
        write_atomic(out_dir / "step_time_grid.csv", rows_to_csv(step_time_grid(s, run_cfg.time_model, config.grid.resolution)))
    stdout.write(json.dumps({"rows": len(rows), "grid": str(out_dir / "grid.csv")}) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (comments allowed)")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--workers", type=int, default=1, help="parallel benchmark runs")
    common.add_argument("--timing", choices=TIMING_MODES, help="step-time mode (overrides the config)")
    common.add_argument("--trace", action="store_true", help="simulate: write the episode trace CSV")
    common.add_argument("--out", help="output directory (overrides the config)")

    p = argparse.ArgumentParser(prog="mpctune", description="Min-max BO tuning of an MPC velocity loop.")
    sub = p.add_subparsers(dest="command", required=True)
    theta_help = "controller parameters H_u H_p lambda_MPC lambda_KF"

    sp = sub.add_parser("simulate", parents=[common], help="run one closed-loop episode")
    sp.add_argument("--theta", nargs=4, type=float, metavar=("HU", "HP", "LMPC", "LKF"), help=theta_help)
    sp.add_argument("--context", nargs=2, type=float, metavar=("STIFF", "DAMP"), help="mismatch multipliers")

    sp = sub.add_parser("tune", parents=[common], help="run one tuning")
    sp.add_argument("--algorithm", choices=ALGORITHMS, default="IV")

    sub.add_parser("benchmark", parents=[common], help="all algorithms over all seeds")

    sp = sub.add_parser("validate", parents=[common], help="validate one controller")
    sp.add_argument("--theta", nargs=4, type=float, metavar=("HU", "HP", "LMPC", "LKF"), help=theta_help)

    sp = sub.add_parser("grid", parents=[common], help="surrogate grid of a finished tune run")
    sp.add_argument("--run", help="tune output directory (default: --out)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        if args.workers < 1:
            raise ConfigError("workers", "must be at least 1")
        if args.command == "simulate":
            return cmd_simulate(config, args.theta, args.context, args.trace)
        if args.command == "tune":
            return cmd_tune(config, args.algorithm)
        if args.command == "benchmark":
            return cmd_benchmark(config, args.workers)
        if args.command == "validate":
            return cmd_validate(config, args.theta)
        return cmd_grid(config, args.run or config.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
