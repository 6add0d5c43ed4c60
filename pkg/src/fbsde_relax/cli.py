"""Command-line entry point: ``fbsde-relax run|list-builtins|describe|validate``."""
from __future__ import annotations

import argparse
import json
import sys

from .builtins import BUILTINS, get_builtin
from .errors import FBSDEError, ScenarioError
from .scenario import OUT_ENV, load_scenario, run


def _parser():
    p = argparse.ArgumentParser(
        prog="fbsde-relax",
        description="Relaxed control of forward-backward SDEs: scenario runner.",
        epilog=f"Output goes to --out, else the scenario's output_dir, else ${OUT_ENV} (default ./fbsde_runs).",
    )
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario file (or a builtin by name)")
    r.add_argument("scenario")
    r.add_argument("--paths", type=int, help="override n_paths")
    r.add_argument("--steps", type=int, help="override the number of time steps N")
    r.add_argument("--seed", type=int, help="override the seed")
    r.add_argument("--out", help="output directory")
    r.add_argument("--no-diagnostics", action="store_true", help="skip the tightness diagnostics")
    r.add_argument("--optimize", action="store_true", help="minimize over relaxed controls first")
    sub.add_parser("list-builtins", help="list the shipped problems")
    d = sub.add_parser("describe", help="show a builtin and its default settings")
    d.add_argument("builtin")
    v = sub.add_parser("validate", help="check a scenario file and print its hash")
    v.add_argument("scenario")
    return p


def _error_record(exc):
    rec = {"status": "invalid", "error_type": type(exc).__name__, "message": str(exc)}
    for key in ("field", "line", "column"):
        if getattr(exc, key, None) is not None:
            rec[key] = getattr(exc, key)
    return rec


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "list-builtins":
        for name in sorted(BUILTINS):
            print(f"{name:<24} {BUILTINS[name].description}")
        return 0
    if args.command == "describe":
        try:
            b = get_builtin(args.builtin)
        except ScenarioError as exc:
            print(json.dumps(_error_record(exc)), file=sys.stderr)
            return 2
        print(json.dumps({"name": b.name, "description": b.description, "params": b.params,
                          "defaults": b.defaults}, indent=2, sort_keys=True))
        return 0
    try:
        sc = load_scenario(args.scenario)
        if args.command == "run":
            sc = sc.with_overrides(n_paths=args.paths, N=args.steps, seed=args.seed,
                                   diagnostics=False if args.no_diagnostics else None,
                                   optimize=True if args.optimize else None)
    except (ScenarioError, FBSDEError) as exc:
        print(json.dumps(_error_record(exc)), file=sys.stderr)
        return 2
    if args.command == "validate":
        print(json.dumps({"status": "valid", "scenario_hash": sc.hash, "name": sc.config["name"]}))
        return 0
    status, out_dir = run(sc, args.out)
    print(json.dumps({"status": "ok" if status == 0 else "failed", "scenario_hash": sc.hash,
                      "output_dir": str(out_dir)}))
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
