"""Command line entry point: ``feddd run | solve | oracle``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .allocation import AllocInstance, grid_oracle, solve_allocation, vertex_oracle
from .orchestrator import SCHEMES, ExperimentConfig, run_and_export


def _plan_json(plan) -> dict:
    return {
        "dropout": [float(d) for d in plan.dropout],
        "t_server": plan.t_server,
        "objective": plan.objective,
    }


def cmd_run(args: argparse.Namespace) -> dict:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.scheme:
        raw["scheme"] = args.scheme
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.rounds is not None:
        raw["rounds"] = args.rounds
    cfg = ExperimentConfig.from_dict(raw)
    result = run_and_export(cfg, args.out, targets=args.target)
    return {
        "out": str(args.out),
        "rounds": len(result.records),
        "final_accuracy": result.records[-1].test_acc,
        "cum_time_s": result.records[-1].cum_time_s,
    }


def cmd_solve(args: argparse.Namespace) -> dict:
    inst = AllocInstance.load(args.instance)
    plan = solve_allocation(inst)
    return _plan_json(plan)


def cmd_oracle(args: argparse.Namespace) -> dict:
    inst = AllocInstance.load(args.instance)
    out = {"vertex": _plan_json(vertex_oracle(inst))}
    if args.grid_step > 0:
        out["grid"] = _plan_json(grid_oracle(inst, args.grid_step))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one federated training experiment")
    p.add_argument("--config", type=Path, help="JSON experiment config (defaults if omitted)")
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--target", type=float, action="append", default=[], help="accuracy for the T2A table")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("solve", help="solve one dropout allocation instance")
    p.add_argument("--instance", type=Path, required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("oracle", help="brute-force reference for an allocation instance")
    p.add_argument("--instance", type=Path, required=True)
    p.add_argument("--grid-step", type=float, default=1e-2)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        out = args.func(args)
    except Exception as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    json.dump(out, sys.stdout, indent=2, default=lambda o: o.tolist() if isinstance(o, np.ndarray) else str(o))
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
