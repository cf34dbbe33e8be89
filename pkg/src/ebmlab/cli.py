"""Command-line surface.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .data import DataError, make_constant, make_noise, make_oodomain, make_smoothness, make_two_moons, write_csv, LabeledTable
from .evaluate import EvalReport, norm_sweep, ood_report, unit_directions_through, write_series_csv
from .models import ModelError, load_checkpoint
from .objectives import make_energy_fn
from .rng import stream
from .samplers import likelihood_ascent
from .training import (
    ConfigError,
    RunConfig,
    build_bundle,
    gamma_sweep,
    run_experiment_suite,
    save_run,
    standard_ood_sets,
    train,
)


def _load_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def cmd_train(args) -> int:
    config = RunConfig.from_dict(_load_json(args.config))
    result = train(config)
    save_run(result, args.out)
    print(f"trained {config.objective} (gamma={config.gamma}, seed={config.seed}) -> {args.out}")
    for r in result.report.results:
        print(f"  {r['ood_set']:<20} AP={r['auc_pr']:.4f} [{r['group']}]")
    return 0


def cmd_evaluate(args) -> int:
    spec, params, metadata = load_checkpoint(args.checkpoint)
    config = RunConfig.from_dict(metadata["config"])
    bundle = build_bundle(config)
    ood_sets, groups = standard_ood_sets(bundle, config.seed)
    run_meta = {"objective": config.objective, "gamma": config.gamma,
                "bottleneck": config.bottleneck_factor, "seed": config.seed}
    report = ood_report(spec, params, bundle, ood_sets, groups, run_meta)
    os.makedirs(args.out, exist_ok=True)
    report.save(os.path.join(args.out, "report.json"))
    for r in report.results:
        print(f"  {r['ood_set']:<20} AP={r['auc_pr']:.4f} [{r['group']}]")
    return 0


def cmd_sweep_gamma(args) -> int:
    config = RunConfig.from_dict(_load_json(args.config))
    grid = [float(g) for g in args.grid.split(",")]
    seeds = list(range(args.seeds))
    results = gamma_sweep(config, grid, seeds)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for res in results:
        tag = "-S" if res.config.gamma == 1.0 else ""
        save_run(res, os.path.join(args.out, f"gamma{res.config.gamma:g}_seed{res.config.seed}"))
        for r in res.report.results:
            rows.append([res.config.gamma, repr(r["auc_pr"]),
                         f"{res.config.objective}{tag}:{r['ood_set']}:seed{res.config.seed}"])
    write_series_csv(os.path.join(args.out, "gamma_sweep.csv"), rows,
                     header=("gamma", "auc_pr", "series"))
    print(f"{len(results)} runs -> {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    rng = stream(args.seed, "data")
    if args.kind == "noise":
        table = LabeledTable(make_noise(args.n, args.dim, rng), source="noise")
    elif args.kind == "constant":
        table = LabeledTable(make_constant(args.n, args.dim, rng), source="constant")
    elif args.kind == "smoothness":
        table = LabeledTable(
            make_smoothness(args.n, args.side, args.pool_size, rng), source="smoothness"
        )
    elif args.kind == "two-moons":
        table = make_two_moons(args.n, args.noise_std, rng)
    elif args.kind == "oodomain":
        from .data import load_csv

        base = load_csv(args.input) if args.input else None
        if base is None:
            raise ConfigError("oodomain generation needs --input features")
        table = LabeledTable(make_oodomain(base.features, mode=args.mode), source="oodomain")
    else:
        raise ConfigError(f"unknown kind {args.kind!r}")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"{args.kind}.csv")
    write_csv(path, table, provenance=f"kind={args.kind} seed={args.seed} n={table.n}")
    print(f"wrote {table.n} rows -> {path}")
    return 0


def cmd_diagnose_norm(args) -> int:
    spec, params, metadata = load_checkpoint(args.checkpoint)
    config = RunConfig.from_dict(metadata["config"])
    bundle = build_bundle(config)
    radii = [float(r) for r in args.radii.split(",")]
    anchor = bundle.id_train.features.mean(axis=0)
    dirs = unit_directions_through(anchor, bundle.id_test.features[: args.n_directions])
    curve = norm_sweep(spec, params, anchor, dirs, radii)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "norm_sweep.csv")
    write_series_csv(path, [[r, repr(v), "heldout"] for r, v in zip(radii, curve)])
    for r, v in zip(radii, curve):
        print(f"  radius {r:>8.2f}  mean log p~ = {v:.4f}")
    return 0


def cmd_ascend(args) -> int:
    spec, params, metadata = load_checkpoint(args.checkpoint)
    config = RunConfig.from_dict(metadata["config"])
    bundle = build_bundle(config)
    energy = make_energy_fn(spec, params)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for i, x0 in enumerate(bundle.id_test.features[: args.n_points]):
        traj = likelihood_ascent(energy, x0, args.steps, args.lr)
        rows.extend([[t, repr(lp), f"point{i}"] for t, lp in enumerate(traj.logdensity)])
    path = os.path.join(args.out, "ascent.csv")
    write_series_csv(path, rows)
    print(f"wrote trajectories -> {path}")
    return 0


def cmd_suite(args) -> int:
    manifest = _load_json(args.manifest)
    summary = run_experiment_suite(manifest, args.out)
    print(f"suite complete: {len(summary['runs'])} runs, {len(summary['errors'])} errors")
    for name, err in summary["errors"].items():
        print(f"  FAILED {name}: {err}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ebmlab",
        description="Train and evaluate energy-based density models for OOD detection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a single model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the configured data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep-gamma", help="train over a grid of CE weights")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", default="0,0.1,0.5,1,2,5,10")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep_gamma)

    p = sub.add_parser("gen-data", help="emit a synthetic dataset as CSV")
    p.add_argument("--kind", required=True,
                   choices=["noise", "constant", "oodomain", "smoothness", "two-moons"])
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--side", type=int, default=16)
    p.add_argument("--pool-size", type=int, default=2, dest="pool_size")
    p.add_argument("--noise-std", type=float, default=0.1, dest="noise_std")
    p.add_argument("--mode", default="tabular", choices=["tabular", "image"])
    p.add_argument("--input", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("diagnose-norm", help="mean log-density at increasing radii")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--radii", default="0,1,2,5,10,20,50")
    p.add_argument("--n-directions", type=int, default=64, dest="n_directions")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_diagnose_norm)

    p = sub.add_parser("ascend", help="likelihood ascent on held-out inputs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--n-points", type=int, default=16, dest="n_points")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ascend)

    p = sub.add_parser("suite", help="run a manifest of experiments")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_suite)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DataError, ModelError, FileNotFoundError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
