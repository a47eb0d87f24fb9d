"""Command-line interface.

    vpfb train    --config run.toml [--out-dir DIR] [--seed-override N] [--steps N]
    vpfb sample   --checkpoint CK [--method rk4|euler|adaptive_rk45|sgld] [--steps N]
                  [--horizon T] [--lambda L] [--n N] [--trajectories]
    vpfb density  --checkpoint CK [--resolution R]
    vpfb ood      --checkpoint CK [--in-set CSV] [--out-set uniform|DATASET|CSV]
    vpfb diagnose --checkpoint CK [--method sgld|ode] [--steps N] [--lambda L]
    vpfb verify   [--suite NAME ...]

Outputs go to --out-dir, else to the run directory of the checkpoint's
configuration (``$VPFB_OUT_ROOT`` or ./runs when that is unset).
Exit codes: 0 success, 1 failed verification, 2 configuration error,
3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .autodiff import load_checkpoint
from .data import Dataset2D, generate, prior_sample, read_points_csv, write_points_csv
from .evaluation import (
    auroc,
    density_grid,
    grid_coverage,
    write_grid_csv,
    write_heatmap_pgm,
    write_scores_csv,
)
from .loss import NumericalError
from .samplers import (
    BoltzmannEnergy,
    SamplerDivergence,
    StepSizeUnderflow,
    flow_sample,
    sgld_sample,
    write_diagnostics_csv,
    write_trajectories_csv,
)
from .trainer import fit, summarize
from .verify import SUITES, run_all

log = logging.getLogger("vpfb")

EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 1, 2, 3, 4


def _load_run(args):
    """(model, RunConfig) from --checkpoint, with the config it was trained under."""
    ck = load_checkpoint(args.checkpoint)
    raw = ck.meta.get("config")
    if not raw:
        raise cfgmod.ConfigError(f"{args.checkpoint}: checkpoint carries no run configuration")
    run = cfgmod.resolve(raw, getattr(args, "seed_override", None))
    return ck.model, run


def _out_dir(args, run) -> Path:
    out = Path(args.out_dir) if args.out_dir else run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _classes(model):
    return tuple(range(model.arch.num_classes)) if model.arch.num_classes else None


def cmd_train(args) -> int:
    run = cfgmod.load(args.config, args.seed_override)
    if args.out_dir:
        run.raw["paths"]["out_dir"] = args.out_dir
    if args.steps:
        run.raw["train"]["iterations"] = args.steps
    run = cfgmod.resolve(run.raw)
    out = run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump(run, out / "config.toml")
    torch.manual_seed(run.seed)
    result = fit(run.train, config_dict=run.raw)
    print(summarize(result))
    print(f"run directory: {out}")
    return 0


def cmd_sample(args) -> int:
    model, run = _load_run(args)
    out = _out_dir(args, run)
    n = args.n or run.eval.n_samples
    seed = run.seed if args.seed_override is None else args.seed_override
    prior = prior_sample(2, n, run.schedule.omega, seed + 1)
    if args.method == "sgld":
        sg = replace(run.sgld, **_sgld_overrides(args), record_every=1 if args.trajectories else 0)
        be = BoltzmannEnergy.from_model(model, run.schedule, _classes(model))
        res = sgld_sample(be, prior, sg, np.random.default_rng(seed + 2))
        samples, traj, times = res.samples, res.trajectory, None
    else:
        ode = replace(run.ode, method=args.method or run.ode.method, record_trajectory=args.trajectories,
                      **_ode_overrides(args))
        res = flow_sample(model, prior, ode, run.schedule, _classes(model))
        samples, traj, times = res.samples, res.trajectory, res.times
    path = write_points_csv(out / "samples.csv", samples)
    print(f"wrote {len(samples)} samples to {path}")
    if args.trajectories:
        print(f"wrote trajectories to {write_trajectories_csv(out / 'trajectories.csv', traj, times)}")
    return 0


def _ode_overrides(args) -> dict:
    kw = {}
    if args.steps:
        kw["steps"] = args.steps
    if args.horizon:
        kw["horizon"] = args.horizon
    return kw


def _sgld_overrides(args) -> dict:
    kw = {}
    if args.steps:
        kw["steps"] = args.steps
    if args.lam:
        kw["temperature"] = args.lam
    if getattr(args, "step_size", None):
        kw["step_size"] = args.step_size
    return kw


def cmd_density(args) -> int:
    model, run = _load_run(args)
    out = _out_dir(args, run)
    be = BoltzmannEnergy.from_model(model, run.schedule, _classes(model))
    grid = density_grid(be, run.eval.bounds, args.resolution or run.eval.resolution)
    write_grid_csv(out / "density_grid.csv", grid)
    write_heatmap_pgm(out / "density.pgm", grid)
    held_out = generate(run.data).test
    cov = grid_coverage(grid, held_out, run.eval.top_fraction)
    print(json.dumps({"coverage": cov, "top_fraction": run.eval.top_fraction, "grid": str(out / "density_grid.csv"),
                      "heatmap": str(out / "density.pgm")}))
    return 0


def _point_set(source: str, run, count: int, seed: int) -> np.ndarray:
    if source == "uniform":
        box = run.eval.box
        return np.random.default_rng(seed).uniform(-box, box, size=(count, 2))
    path = Path(source)
    if path.suffix == ".csv" or path.exists():
        return read_points_csv(path)[0]
    try:
        return generate(Dataset2D(name=source, seed=seed, n_train=1, n_test=count)).test
    except ValueError as exc:
        raise cfgmod.ConfigError(f"out-set {source!r}: {exc}") from exc


def cmd_ood(args) -> int:
    model, run = _load_run(args)
    out = _out_dir(args, run)
    n = run.eval.n_samples
    inside = read_points_csv(args.in_set)[0] if args.in_set else generate(run.data).test[:n]
    outside = _point_set(args.out_set, run, n, run.seed + 3)
    be = BoltzmannEnergy.from_model(model, run.schedule, _classes(model))
    s_in, s_out = be.energy(inside), be.energy(outside)
    write_scores_csv(out / "ood_scores.csv", {"in": s_in, "out": s_out})
    print(f"AUROC {auroc(s_in, s_out):.6f}")
    return 0


def cmd_diagnose(args) -> int:
    model, run = _load_run(args)
    out = _out_dir(args, run)
    seed = run.seed if args.seed_override is None else args.seed_override
    be = BoltzmannEnergy.from_model(model, run.schedule, _classes(model))
    init = prior_sample(2, run.sgld_chains, run.schedule.omega, seed + 4)
    if args.method == "ode":
        # long-run flow: norms of the Boltzmann energy along a fixed-step rk4 trajectory
        ode = replace(run.ode, method="rk4", record_trajectory=True, record_every=1, **_ode_overrides(args))
        res = flow_sample(model, init, ode, run.schedule, _classes(model))
        e_and_g = [be.energy_and_grad(x) for x in res.trajectory]
        grad_norm = np.array([np.mean(np.sum(g**2, axis=1)) for _, g in e_and_g])
        energy_norm = np.array([np.mean(e**2) for e, _ in e_and_g])
    else:
        sg = replace(run.sgld, **_sgld_overrides(args))
        if sg.init == "ode_output":
            init = flow_sample(model, init, run.ode, run.schedule, _classes(model)).samples
        res = sgld_sample(be, init, sg, np.random.default_rng(seed + 5))
        grad_norm, energy_norm = res.grad_norm, res.energy_norm
    path = write_diagnostics_csv(out / f"diagnostics_{args.method}.csv", grad_norm, energy_norm)
    k = max(1, len(grad_norm) // 10)
    print(json.dumps({"diagnostics": str(path), "grad_norm_first10": float(np.mean(grad_norm[:k])),
                      "grad_norm_last10": float(np.mean(grad_norm[-k:]))}))
    return 0


def cmd_verify(args) -> int:
    results = run_all(args.suite or None)
    failed = [r.check_id for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vpfb", description="Variational potential-flow generative modeling in 2D.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint .npz written by `vpfb train`")
        p.add_argument("--out-dir", default=None)
        p.add_argument("--seed-override", type=int, default=None)
        return p

    p = common(sub.add_parser("train", help="train an energy model"), checkpoint=False)
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--steps", type=int, default=None, help="override train.iterations")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("sample", help="draw samples by ODE flow or SGLD"))
    p.add_argument("--method", choices=("euler", "rk4", "adaptive_rk45", "sgld"), default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="SGLD temperature")
    p.add_argument("--step-size", type=float, default=None, help="SGLD step size")
    p.add_argument("--n", type=int, default=None, help="number of samples")
    p.add_argument("--trajectories", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = common(sub.add_parser("density", help="Boltzmann-energy log-density grid"))
    p.add_argument("--resolution", type=int, default=None)
    p.set_defaults(func=cmd_density)

    p = common(sub.add_parser("ood", help="score in/out sets and report AUROC"))
    p.add_argument("--in-set", default=None, help="CSV of in-distribution points (default: held-out split)")
    p.add_argument("--out-set", default="uniform", help="'uniform', a dataset name, or a CSV path")
    p.set_defaults(func=cmd_ood)

    p = common(sub.add_parser("diagnose", help="long-run gradient/energy norm diagnostics"))
    p.add_argument("--method", choices=("sgld", "ode"), default="sgld")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--step-size", type=float, default=None)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("verify", help="run the oracle check suites")
    p.add_argument("--suite", action="append", choices=sorted(SUITES), help="restrict to a suite (repeatable)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError, StepSizeUnderflow, SamplerDivergence) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
