"""Command-line entry point.

Subcommands: assemble (dump an AKR for inspection), spheres (fit and dump
a sphere set), plan (solve a single problem), validate (re-check an
exported dataset), batch (full pipeline), stats (aggregate existing
outputs). Exit codes: 0 success, 1 usage/config error, 2 all problems
infeasible, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .collision import fit_spheres
from .errors import AkrPlanError, InfeasibleError, ParseError
from .mesh import load_obj
from .pipeline import (
    compute_stats,
    import_jsonl,
    load_task_spec,
    prepare_batch,
    record_to_json,
    revalidate_dataset,
    run_batch,
    solve_indexed_problem,
)
from .validate import EffortStats

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_IO = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="akrplan",
        description="whole-body mobile-manipulation trajectory generation")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="task spec JSON")
        p.add_argument("--seed", type=int, default=None, help="override batch seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--format", choices=["jsonl", "binary"], default="jsonl")
        p.add_argument("--debug-trace", action="store_true",
                       help="write per-iteration optimizer traces")

    p = sub.add_parser("assemble", help="dump the assembled AKR for one grasp")
    add_common(p)
    p.add_argument("--grasp-index", type=int, default=0)

    p = sub.add_parser("spheres", help="fit collision spheres for a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--pitch", type=float, default=0.05)
    p.add_argument("--downscale", type=float, default=0.95)
    p.add_argument("--out", default=None)

    p = sub.add_parser("plan", help="solve a single (grasp, start, goal) problem")
    add_common(p)
    p.add_argument("--grasp-index", type=int, default=0)
    p.add_argument("--start-index", type=int, default=0)
    p.add_argument("--goal-index", type=int, default=0)

    p = sub.add_parser("validate", help="re-check an exported dataset")
    add_common(p)
    p.add_argument("--records", required=True, help="dataset.jsonl to re-check")

    p = sub.add_parser("batch", help="run the full generation pipeline")
    add_common(p)

    p = sub.add_parser("stats", help="aggregate stats from existing outputs")
    p.add_argument("--records", required=True, help="output directory of a batch run")

    return parser


def _load_spec(args):
    spec = load_task_spec(args.config)
    if args.seed is not None:
        from dataclasses import replace
        spec = replace(spec, generation=replace(spec.generation, seed=args.seed))
    return spec


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AkrPlanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def _dispatch(args) -> int:
    if args.command == "assemble":
        return _cmd_assemble(args)
    if args.command == "spheres":
        return _cmd_spheres(args)
    if args.command == "plan":
        return _cmd_plan(args)
    if args.command == "validate":
        return _cmd_validate(args)
    if args.command == "batch":
        return _cmd_batch(args)
    if args.command == "stats":
        return _cmd_stats(args)
    return EXIT_USAGE


def _write_or_print(payload: dict, out: str | None, filename: str) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        (path / filename).write_text(text + "\n")
    else:
        print(text)


def _cmd_assemble(args) -> int:
    spec = _load_spec(args)
    ctx = prepare_batch(spec)
    if not 0 <= args.grasp_index < len(ctx.akrs):
        print(f"error: grasp index {args.grasp_index} out of range", file=sys.stderr)
        return EXIT_USAGE
    akr = ctx.akrs[args.grasp_index]
    payload = {
        "root": akr.tree.root,
        "tcp_link": akr.tcp_link,
        "object_anchor_link": akr.object_anchor_link,
        "layout": {"base": [akr.base.start, akr.base.stop],
                   "manipulator": [akr.manipulator.start, akr.manipulator.stop],
                   "object": [akr.object.start, akr.object.stop]},
        "links": sorted(akr.tree.links),
        "joints": [
            {"name": j.name, "kind": j.kind, "parent": j.parent, "child": j.child,
             "axis": None if j.axis is None else j.axis.tolist(),
             "limits": list(j.limits), "reversed": j.reversed_motion,
             "origin": {"translation": j.origin.translation.tolist(),
                        "quaternion": j.origin.rotation.tolist()}}
            for j in akr.tree.dfs_joints
        ],
        "collision_pairs": sorted(list(p) for p in akr.collision_pairs),
    }
    _write_or_print(payload, args.out, f"akr_{args.grasp_index}.json")
    return EXIT_OK


def _cmd_spheres(args) -> int:
    mesh = load_obj(args.mesh)
    spheres = fit_spheres(mesh, args.pitch, args.downscale)
    payload = {
        "mesh": args.mesh,
        "pitch": args.pitch,
        "downscale": args.downscale,
        "count": len(spheres),
        "spheres": [{"center": c.tolist(), "radius": float(r)}
                    for c, r in zip(spheres.centers, spheres.radii)],
    }
    _write_or_print(payload, args.out, "spheres.json")
    return EXIT_OK


def _cmd_plan(args) -> int:
    spec = _load_spec(args)
    ctx = prepare_batch(spec, debug_trace=args.debug_trace)
    gen = spec.generation
    index = ((args.grasp_index * gen.start_representatives + args.start_index)
             * len(spec.goals) + args.goal_index)
    result = solve_indexed_problem(ctx, index, args.grasp_index, args.start_index,
                                   args.goal_index)
    if result.waypoints is None:
        print(f"infeasible: {result.failure_reason}", file=sys.stderr)
        return EXIT_INFEASIBLE
    out = Path(args.out) if args.out else Path.cwd()
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "binary":
        from .pipeline import export_binary
        path = export_binary(ctx, result, out)
    else:
        path = out / "plan.jsonl"
        path.write_text(json.dumps(record_to_json(ctx, result), sort_keys=True) + "\n")
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    spec = _load_spec(args)
    rows = revalidate_dataset(spec, args.records)
    failed = [(i, reason) for i, ok, reason in rows if not ok]
    for i, reason in failed:
        print(f"record {i}: FAIL ({reason})")
    print(f"{len(rows) - len(failed)}/{len(rows)} records pass")
    return EXIT_OK if not failed else EXIT_INFEASIBLE


def _cmd_batch(args) -> int:
    spec = _load_spec(args)
    out = args.out or "out"
    stats = run_batch(spec, workers=args.workers, out_dir=out,
                      export_format=args.format, debug_trace=args.debug_trace)
    print(json.dumps(stats.to_json(), indent=2))
    if stats.valid == 0:
        return EXIT_INFEASIBLE
    return EXIT_OK


def _cmd_stats(args) -> int:
    out_dir = Path(args.records)
    dataset = out_dir / "dataset.jsonl"
    failures_path = out_dir / "failures.json"
    if not dataset.exists() and not failures_path.exists():
        print(f"i/o error: no batch outputs under {out_dir}", file=sys.stderr)
        return EXIT_IO
    records = import_jsonl(dataset) if dataset.exists() else []
    failures = json.loads(failures_path.read_text()) if failures_path.exists() else []
    efforts = [EffortStats(**rec["effort"]) for rec in records]

    wall = 0.0
    stats_path = out_dir / "stats.json"
    if stats_path.exists():
        wall = json.loads(stats_path.read_text()).get("wall_time_s", 0.0)
    stats = compute_stats(efforts, failures, wall)
    print(json.dumps(stats.to_json(), indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
