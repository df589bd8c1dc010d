"""Command-line entry point: ``mscbf <config> [--out DIR] [--seed N] [--workers N]``.

Writes ``results.csv``, ``manifest.txt`` and ``summary.txt`` into the output
directory.  Exit status: 0 all checks pass, 1 some check failed, 2 invalid
configuration, 3 the run aborted (no outputs are written in cases 2 and 3).
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from .averaging import StderrBudgetExceeded
from .config import ConfigError, RunConfig, parse_config
from .coupling import AssumptionError
from .dynamics import BlowUpError
from .experiments import (
    ExperimentReport,
    Model,
    exp_aux_gap,
    exp_convergence,
    exp_fbar_oracle,
    exp_mixing,
    exp_moment_bounds,
    exp_monotonicity,
    exp_time_holder,
)
from .fields import random_field
from .stochastic import Channel, write_seed_manifest

EXIT_FAIL, EXIT_CONFIG, EXIT_ABORTED = 1, 2, 3


def build_model(cfg: RunConfig) -> Model:
    basis = cfg.basis()
    cov1, cov2 = cfg.covariances(basis)
    return Model(basis, cfg.params(), cfg.coupling(), cov1, cov2, cfg.integrator())


def initial_fields(cfg: RunConfig, basis):
    """Unit direction for the slow data and a separate one for the fast data, both seeded."""
    x_dir = random_field(basis, np.random.default_rng([cfg.seed, 1]))
    y_dir = random_field(basis, np.random.default_rng([cfg.seed, 2]))
    return x_dir, y_dir


def _channels(cfg: RunConfig) -> tuple[Channel, ...]:
    exp = cfg.experiment
    if exp == "monotonicity":
        return ()
    if exp in ("mixing", "fbar_oracle"):
        return (Channel.Q2BAR,)
    if exp == "convergence" and cfg["exp.fbar_mode"] == "hmm":
        return (Channel.Q1, Channel.Q2, Channel.Q2BAR)
    return (Channel.Q1, Channel.Q2)


def run_experiment(cfg: RunConfig) -> ExperimentReport:
    if cfg.experiment == "monotonicity":
        return exp_monotonicity(cfg.basis(), cfg.params(), cfg["exp.r_list"], cfg["exp.n_samples"], cfg.seed)
    model = build_model(cfg)
    x_dir, y_dir = initial_fields(cfg, model.basis)
    x0, y0 = x_dir * cfg["exp.x0_scale"], y_dir * cfg["exp.y0_scale"]
    common = dict(T=cfg["run.T"], n_rep=cfg["run.n_rep"], seed=cfg.seed, x0=x0, y0=y0, workers=cfg.workers)
    exp = cfg.experiment
    if exp == "mixing":
        xs = [x_dir * s for s in cfg["exp.x_scales"]]
        return exp_mixing(model, xs, cfg["exp.horizon"], cfg["run.n_rep"], cfg.seed, cfg["ergodic.dt"], cfg.ergodic())
    if exp == "fbar_oracle":
        return exp_fbar_oracle(model, x0, cfg["exp.repetitions"], cfg.ergodic(), cfg.seed)
    if exp == "moment_bounds":
        return exp_moment_bounds(model, cfg["exp.eps_ladder"], cfg["exp.p_list"], factor=cfg["exp.factor"], **common)
    if exp == "time_holder":
        return exp_time_holder(
            model, cfg["exp.delta_ladder"], max_spread=cfg["exp.max_spread"], min_slope=cfg["exp.min_slope"], **common
        )
    if exp == "aux_gap":
        return exp_aux_gap(model, cfg["exp.delta_ladder"], **common)
    if exp == "convergence":
        return exp_convergence(
            model, cfg["exp.eps_ladder"], cfg["exp.p_list"], fbar_mode=cfg["exp.fbar_mode"],
            ergodic=cfg.ergodic(), cache_tol=cfg["ergodic.cache_tol"], **common,
        )
    raise ValueError(f"unknown experiment {exp!r}")


def render_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=report.columns, lineterminator="\n")
    w.writeheader()
    w.writerows(report.rows)
    return buf.getvalue()


def render_manifest(cfg: RunConfig) -> str:
    buf = io.StringIO()
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    buf.write(f"package_version={version}\n")
    buf.write(cfg.dumps())
    n_ids = cfg["ergodic.n_rep"] if cfg.experiment == "fbar_oracle" else cfg["run.n_rep"]
    channels = _channels(cfg)
    if channels:
        write_seed_manifest(buf, cfg.seed, range(n_ids), channels)
    return buf.getvalue()


def render_summary(report: ExperimentReport) -> str:
    return "".join(f"{c.status} {report.name}.{c.name}: {c.detail}\n" for c in report.checks)


def run(cfg: RunConfig) -> int:
    """Run one experiment and write its outputs; returns the exit status."""
    try:
        report = run_experiment(cfg)
    except (AssumptionError, BlowUpError, StderrBudgetExceeded) as exc:
        print(f"error: run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "results.csv": render_csv(report),
        "manifest.txt": render_manifest(cfg),
        "summary.txt": render_summary(report),
    }
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8", newline="")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    sys.stdout.write(files["summary.txt"])
    return 0 if report.ok else EXIT_FAIL


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="mscbf", description="Run one multiscale averaging experiment from a key=value config.")
    ap.add_argument("config", type=Path)
    ap.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    ap.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    ap.add_argument("--workers", type=int, help="worker processes (overrides run.workers; 0 = all cores)")
    args = ap.parse_args(argv)
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    over = {}
    if args.out is not None:
        over["output.dir"] = str(args.out)
    if args.seed is not None:
        over["run.seed"] = args.seed
    if args.workers is not None:
        if args.workers < 0:
            print("error: --workers must be >= 0", file=sys.stderr)
            return EXIT_CONFIG
        over["run.workers"] = args.workers
    return run(cfg.with_overrides(**over))


if __name__ == "__main__":
    sys.exit(main())
