"""Command-line entry points.

    gridpress run scenario.json [-o DIR] [--seeds ...] [--horizon N] ...
    gridpress compare RUN_DIR [RUN_DIR ...] [--baseline LABEL] [-o CSV]
    gridpress make-network --rows R --cols C -o net.json
    gridpress make-scenario --preset benchmark|overload -o scenario.json

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
from pathlib import Path

from . import __version__
from .network import GridConfig, ValidationError, build_grid, save_network
from .runner import load_run_dir, run_single, write_run_dir
from .scenario import (Scenario, benchmark_scenario, controller_to_dict,
                       load_scenario, overload_scenario, resolve_demand,
                       resolve_network, save_scenario, scenario_hash,
                       scenario_to_dict)


def run_scenario(sc: Scenario, out_root: Path, base_dir: Path | None = None,
                 echo=print) -> list[Path]:
    """Run the full controller x seed matrix; one artifact directory each."""
    net = resolve_network(sc, base_dir)
    profile = resolve_demand(sc, net)
    digest = scenario_hash(sc)
    out_root = Path(out_root)
    paths = []
    for config in sc.controllers:
        for seed in sc.seeds:
            result = run_single(
                net, profile, config, seed=seed, horizon=sc.horizon, mode=sc.mode,
                step_seconds=sc.step_seconds, dump_queues=sc.dump_queues,
                arrival_mode=sc.arrival_mode,
            )
            provenance = {
                "scenario_hash": digest,
                "scenario": scenario_to_dict(sc, include_output=False),
                "controller": controller_to_dict(config),
                "controller_label": config.label,
                "seed": seed,
                "gridpress_version": __version__,
            }
            run_dir = out_root / f"{config.label}__seed{seed}"
            write_run_dir(result, run_dir, provenance)
            paths.append(run_dir)
            echo(f"ran {config.label} seed={seed}: "
                 f"completed={result.summary.completed} "
                 f"mean_queue={result.summary.mean_total_queue:.2f} "
                 f"-> {run_dir}")
    return paths


class SystemExitWithCode(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def compare_runs(run_dirs: list[Path], baseline: str | None = None) -> dict:
    """Per-controller means across seeds, plus deltas against a baseline."""
    runs = [load_run_dir(p) for p in run_dirs]
    if len(runs) < 2:
        raise SystemExitWithCode("compare needs at least two run directories", 1)
    hashes = {r["provenance"]["scenario_hash"] for r in runs}
    if len(hashes) > 1:
        raise SystemExitWithCode(
            f"refusing to compare runs from different scenarios: {sorted(hashes)}", 1)

    groups: dict[str, list[dict]] = {}
    for r in runs:
        groups.setdefault(r["provenance"]["controller_label"], []).append(r)

    def mean(values):
        vals = [v for v in values if v is not None]
        return statistics.fmean(vals) if vals else None

    rows = {}
    for label, rs in sorted(groups.items()):
        rows[label] = {
            "runs": len(rs),
            "travel_time_mean_s": mean(r["summary"]["travel_time_mean_s"] for r in rs),
            "waiting_time_mean_s": mean(r["summary"]["waiting_time_mean_s"] for r in rs),
            "peak_occupancy": mean(r["summary"]["peak_occupancy"] for r in rs),
            "decide_mean_s": mean(r["timing"]["decide_mean_s"] for r in rs),
        }
    if baseline is not None:
        if baseline not in rows:
            raise SystemExitWithCode(f"baseline {baseline!r} not among {sorted(rows)}", 1)
        base = rows[baseline]
        for label, row in rows.items():
            for key in ("travel_time_mean_s", "waiting_time_mean_s"):
                b, v = base[key], row[key]
                row[f"{key}_vs_{baseline}_pct"] = (
                    None if not b or v is None else 100.0 * (v - b) / b)
    return rows


def _print_comparison(rows: dict, echo=print) -> None:
    cols = ["controller", "runs", "travel_time_mean_s", "waiting_time_mean_s",
            "peak_occupancy", "decide_mean_s"]
    extra = sorted({k for row in rows.values() for k in row if k.endswith("_pct")})
    header = cols + extra

    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)

    table = [[label] + [fmt(row.get(c)) for c in header[1:]] for label, row in rows.items()]
    widths = [max(len(h), *(len(r[i]) for r in table)) for i, h in enumerate(header)]
    echo("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for r in table:
        echo("  ".join(c.ljust(w) for c, w in zip(r, widths)))


def _write_comparison_csv(rows: dict, path: Path) -> None:
    keys = sorted({k for row in rows.values() for k in row})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["controller"] + keys)
        for label, row in sorted(rows.items()):
            w.writerow([label] + [row.get(k, "") for k in keys])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridpress", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="run a scenario's controller x seed matrix")
    pr.add_argument("scenario", type=Path)
    pr.add_argument("-o", "--output", type=Path, default=None,
                    help="output root (default: scenario output_dir or ./runs/<name>)")
    pr.add_argument("--seeds", type=int, nargs="+", default=None)
    pr.add_argument("--horizon", type=int, default=None)
    pr.add_argument("--mode", choices=("token", "fluid"), default=None)
    pr.add_argument("--controller", default=None,
                    help="run only the controller with this label")
    pr.add_argument("--algorithm", choices=("admm", "greedy", "exhaustive"), default=None,
                    help="override the consensus algorithm of cmpp controllers")
    pr.add_argument("--rho", type=float, default=None)
    pr.add_argument("--max-iters", type=int, default=None)
    pr.add_argument("--dump-queues", action="store_true")

    pc = sub.add_parser("compare", help="compare finished run directories")
    pc.add_argument("runs", type=Path, nargs="+")
    pc.add_argument("--baseline", default=None)
    pc.add_argument("-o", "--output", type=Path, default=None, help="also write CSV here")

    pn = sub.add_parser("make-network", help="emit a grid network file")
    pn.add_argument("--rows", type=int, required=True)
    pn.add_argument("--cols", type=int, required=True)
    pn.add_argument("--queue-threshold", type=float, default=12.0)
    pn.add_argument("--traversal-delay", type=int, default=1)
    pn.add_argument("-o", "--output", type=Path, required=True)

    ps = sub.add_parser("make-scenario", help="emit a preset scenario file")
    ps.add_argument("--preset", choices=("benchmark", "overload"), default="benchmark")
    ps.add_argument("--rows", type=int, default=None)
    ps.add_argument("--cols", type=int, default=None)
    ps.add_argument("--horizon", type=int, default=None)
    ps.add_argument("-o", "--output", type=Path, required=True)
    return p


def _apply_overrides(sc: Scenario, args) -> Scenario:
    from dataclasses import replace

    data = scenario_to_dict(sc)
    if args.seeds is not None:
        data["seeds"] = args.seeds
    if args.horizon is not None:
        data["horizon"] = args.horizon
    if args.mode is not None:
        data["mode"] = args.mode
    controllers = data["controllers"]
    if args.controller is not None:
        keep = []
        for c, cfg in zip(controllers, sc.controllers):
            if cfg.label == args.controller or c["kind"] == args.controller:
                keep.append(c)
        if not keep:
            raise SystemExitWithCode(
                f"no controller labelled {args.controller!r} in scenario", 1)
        controllers = keep
    for c in controllers:
        if c["kind"] == "cmpp":
            if args.algorithm is not None:
                c["algorithm"] = args.algorithm
            if args.rho is not None:
                c["rho"] = args.rho
            if args.max_iters is not None:
                c["max_iters"] = args.max_iters
    data["controllers"] = controllers
    if args.dump_queues:
        data["dump_queues"] = True
    from .scenario import scenario_from_dict
    return scenario_from_dict(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            sc = load_scenario(args.scenario)
            sc = _apply_overrides(sc, args)
            out = args.output or sc.output_dir or Path("runs") / sc.name
            run_scenario(sc, Path(out), base_dir=args.scenario.parent)
        elif args.command == "compare":
            rows = compare_runs(args.runs, baseline=args.baseline)
            _print_comparison(rows)
            if args.output is not None:
                _write_comparison_csv(rows, args.output)
        elif args.command == "make-network":
            net = build_grid(args.rows, args.cols, GridConfig(
                queue_threshold=args.queue_threshold,
                traversal_delay=args.traversal_delay))
            save_network(net, args.output)
            print(f"wrote {args.output}")
        elif args.command == "make-scenario":
            kwargs = {}
            if args.rows is not None:
                kwargs["rows"] = args.rows
            if args.cols is not None:
                kwargs["cols"] = args.cols
            if args.horizon is not None:
                kwargs["horizon"] = args.horizon
            sc = benchmark_scenario(**kwargs) if args.preset == "benchmark" \
                else overload_scenario(**kwargs)
            save_scenario(sc, args.output)
            print(f"wrote {args.output}")
    except SystemExitWithCode as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
