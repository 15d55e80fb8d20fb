"""Command-line entry point: ``rescue {run,ablate,discover,hv,theory}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from rescue.benchmarks import REGISTRY, make_problem
from rescue.causal import ObservationalDataset, pc_discover
from rescue.core import DomainError
from rescue.pareto import hypervolume_exact, hypervolume_mc
from rescue.runner import METHOD_ALIASES, ConfigError, RunAborted, RunConfig, export_results, run, run_method_ablation

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("rescue")


def _load_config(args) -> RunConfig:
    d = {}
    if getattr(args, "config", None):
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
    if getattr(args, "problem", None):
        d["problem"] = args.problem
    if getattr(args, "delta_scale", None) is not None:
        d["problem_params"] = {**d.get("problem_params", {}), "delta_scale": args.delta_scale}
    for key in ("seed", "budget", "method"):
        if getattr(args, key, None) is not None:
            d[key] = getattr(args, key)
    if getattr(args, "dump_acquisition", False):
        d["dump_acquisition"] = True
    if getattr(args, "out", None):
        d["output_dir"] = args.out
    return RunConfig.from_dict(d)


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    out = cfg.output_dir or "results"
    cfg = dataclasses.replace(cfg, output_dir=out)
    try:
        runlog = run(cfg)
    except RunAborted as exc:
        export_results(exc.log, out)
        print(f"run aborted: {exc}; partial log written to {out}", file=sys.stderr)
        return EXIT_NUMERIC
    summary = export_results(runlog, out)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _load_config(args)
    methods = [METHOD_ALIASES.get(m.strip(), m.strip()) for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise ConfigError("at least one method is required")
    for m in methods:
        dataclasses.replace(cfg, method=m)  # validates the name before any run starts
    result = run_method_ablation(cfg, methods, list(range(args.seeds)))
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "ablation.json").write_text(text + "\n")
    print(json.dumps(result["table"], indent=2, sort_keys=True))
    return EXIT_OK


def _parse_tiers(spec: str | None, names) -> dict:
    if not spec:
        return {n: 0 for n in names}
    tiers = {}
    for item in spec.split(","):
        name, _, tier = item.partition(":")
        tiers[name.strip()] = int(tier)
    return tiers


def _cmd_discover(args) -> int:
    try:
        data = ObservationalDataset.from_csv(args.data)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{args.data}: {exc}") from exc
    exogenous = [e for e in (args.exogenous or "").split(",") if e]
    if args.problem:
        p = make_problem(args.problem)
        tiers, exogenous = p.tiers, exogenous or [p.fidelity_name]
        data = ObservationalDataset(p.node_names, data.select(p.node_names))
    else:
        tiers = _parse_tiers(args.tiers, data.names)
    graph = pc_discover(data, tiers, args.alpha, exogenous=exogenous)
    Path(args.out).write_text(graph.to_json() + "\n")
    print(f"{len(graph.edges)} edges written to {args.out}")
    return EXIT_OK


def _read_points(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return np.array([[float(v) for v in r] for r in rows], dtype=float)
    except ValueError:
        # first row is a header
        return np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)


def _cmd_hv(args) -> int:
    P = _read_points(args.points)
    ref = np.array([float(v) for v in args.ref.split(",")])
    if P.ndim != 2 or P.shape[1] != ref.size:
        raise ConfigError(f"points have {P.shape[-1]} columns but the reference has {ref.size}")
    out = {}
    if ref.size <= 3:
        out["exact"] = hypervolume_exact(P, ref)
    est, se = hypervolume_mc(P, ref, n=args.mc, seed=args.seed or 0)
    out["mc"], out["mc_std_error"] = est, se
    print(json.dumps(out))
    return EXIT_OK


def _cmd_theory(args) -> int:
    from rescue.theory import theory_check

    cfg = _load_config(args)
    report = theory_check(cfg, n_iterations=args.iterations)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rescue", description="Causal-prior multi-fidelity multi-objective BO")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_options(p, out_help):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--budget", type=float)
        p.add_argument("--problem", choices=sorted(REGISTRY))
        p.add_argument("--delta-scale", type=float, help="bias scale for the adversarial problem")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("run", help="run one optimization")
    run_options(p, "output directory (default: results)")
    p.add_argument("--method")
    p.add_argument("--dump-acquisition", action="store_true", help="write per-iteration acquisition tables")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("ablate", help="compare methods over seeds")
    run_options(p, "directory for ablation.json")
    p.add_argument("--methods", default="rescue,hvkg_noncausal,ehvi")
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("discover", help="causal discovery from observational CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--problem", choices=sorted(REGISTRY), help="take tiers and node order from a problem")
    p.add_argument("--tiers", help="name:tier pairs, comma separated")
    p.add_argument("--exogenous", help="comma-separated exogenous nodes")
    p.set_defaults(func=_cmd_discover)

    p = sub.add_parser("hv", help="hypervolume of a point set")
    p.add_argument("--points", required=True)
    p.add_argument("--ref", required=True, help="comma-separated reference point")
    p.add_argument("--mc", type=int, default=100_000, help="Monte Carlo samples")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_hv)

    p = sub.add_parser("theory", help="empirical regret-bound check")
    run_options(p, "file for the JSON report")
    p.add_argument("--iterations", type=int, default=30)
    p.set_defaults(func=_cmd_theory)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunAborted as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ArithmeticError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
