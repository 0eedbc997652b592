"""Scenario schema: one JSON document describing a full experiment matrix.

A scenario bundles a network (grid parameters, a network file reference,
or an inline network), a demand profile, one or more controller configs,
and the run matrix (horizon, seeds, mode).  Example:

    {
      "name": "grid2x2-demo",
      "network": {"grid": {"rows": 2, "cols": 2, "queue_threshold": 12.0}},
      "demand": {"entries": "all", "seed": 0,
                 "segments": [{"until": 100, "rate": 0.3},
                              {"until": 500, "rate": 0.6}]},
      "controllers": [
        {"kind": "fixed_time"},
        {"kind": "mp"},
        {"kind": "cmpp", "algorithm": "greedy", "overflow_weight": 4.0,
         "spillover_weight": 2.0, "repeat_green_weight": 0.1,
         "history_horizon": 3, "penalty_weight": 1.0}
      ],
      "horizon": 500,
      "seeds": [0, 1, 2],
      "mode": "token",
      "step_seconds": 20.0
    }

Every run directory embeds the scenario content hash; comparisons refuse
to mix runs whose hashes differ.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Mapping, Sequence

from .controllers import ControllerConfig, validate_config
from .dynamics import DemandProfile, DemandSegment
from .network import (GridConfig, Network, ValidationError, Violation,
                      build_grid, network_from_dict)

MODES = ("token", "fluid")


@dataclass(frozen=True)
class Scenario:
    name: str
    network: Mapping            # {"grid": {...}} | {"file": path} | {"inline": {...}}
    demand: Mapping             # {"entries": "all"|[...], "segments": [...], "seed": n}
    controllers: tuple[ControllerConfig, ...]
    horizon: int
    seeds: tuple[int, ...]
    mode: str = "token"
    step_seconds: float = 20.0
    arrival_mode: str = "poisson"
    output_dir: str | None = None
    dump_queues: bool = False


_CONTROLLER_KEYS = {
    "kind", "overflow_weight", "spillover_weight", "repeat_green_weight",
    "history_horizon", "penalty_weight", "plan", "cabp_gating", "algorithm",
    "rho", "max_iters", "exhaustive_limit", "cap_repeat_term",
}


def controller_from_dict(d: Mapping) -> ControllerConfig:
    unknown = set(d) - _CONTROLLER_KEYS
    if unknown:
        raise ValidationError([Violation("controller", "unknown-keys", str(sorted(unknown)))],
                              context="scenario")
    kwargs = {k: v for k, v in d.items() if k not in ("plan",)}
    if "plan" in d:
        kwargs["fixed_time_plan"] = tuple(int(x) for x in d["plan"])
    if "history_horizon" in kwargs:
        kwargs["history_horizon"] = int(kwargs["history_horizon"])
    if "max_iters" in kwargs:
        kwargs["max_iters"] = int(kwargs["max_iters"])
    return ControllerConfig(**kwargs)


def controller_to_dict(c: ControllerConfig) -> dict:
    d = asdict(c)
    plan = d.pop("fixed_time_plan")
    if plan is not None:
        d["plan"] = list(plan)
    return d


def scenario_from_dict(data: Mapping) -> Scenario:
    problems: list[Violation] = []
    for key in ("name", "network", "demand", "controllers", "horizon", "seeds"):
        if key not in data:
            problems.append(Violation("scenario", "missing-key", key))
    if problems:
        raise ValidationError(problems, context="scenario")

    controllers = tuple(controller_from_dict(d) for d in data["controllers"])
    sc = Scenario(
        name=str(data["name"]),
        network=data["network"],
        demand=data["demand"],
        controllers=controllers,
        horizon=int(data["horizon"]),
        seeds=tuple(int(s) for s in data["seeds"]),
        mode=data.get("mode", "token"),
        step_seconds=float(data.get("step_seconds", 20.0)),
        arrival_mode=data.get("arrival_mode", "poisson"),
        output_dir=data.get("output_dir"),
        dump_queues=bool(data.get("dump_queues", False)),
    )
    problems = validate_scenario(sc)
    if problems:
        raise ValidationError(problems, context="scenario")
    return sc


def scenario_to_dict(sc: Scenario, include_output: bool = True) -> dict:
    d = {
        "name": sc.name,
        "network": sc.network,
        "demand": sc.demand,
        "controllers": [controller_to_dict(c) for c in sc.controllers],
        "horizon": sc.horizon,
        "seeds": list(sc.seeds),
        "mode": sc.mode,
        "step_seconds": sc.step_seconds,
        "arrival_mode": sc.arrival_mode,
    }
    if include_output:
        if sc.output_dir is not None:
            d["output_dir"] = sc.output_dir
        if sc.dump_queues:
            d["dump_queues"] = True
    return d


def validate_scenario(sc: Scenario) -> list[Violation]:
    out: list[Violation] = []
    if sc.horizon < 1:
        out.append(Violation("scenario", "horizon", "must be >= 1"))
    if not sc.controllers:
        out.append(Violation("scenario", "controllers", "at least one controller required"))
    if not sc.seeds:
        out.append(Violation("scenario", "seeds", "at least one seed required"))
    if sc.mode not in MODES:
        out.append(Violation("scenario", "mode", f"unknown mode {sc.mode!r}"))
    if sc.arrival_mode not in ("poisson", "deterministic"):
        out.append(Violation("scenario", "arrival-mode", f"unknown {sc.arrival_mode!r}"))
    if not isinstance(sc.network, Mapping) or not (
            {"grid", "file", "inline"} & set(sc.network)):
        out.append(Violation("scenario", "network", "needs one of grid/file/inline"))
    for c in sc.controllers:
        for msg in validate_config(c):
            out.append(Violation(f"controller {c.label}", "config", msg))
    labels = [c.label for c in sc.controllers]
    if len(set(labels)) != len(labels):
        out.append(Violation("scenario", "controllers", f"duplicate labels in {labels}"))
    return out


def scenario_hash(sc: Scenario) -> str:
    """Content hash over everything that affects results (not output paths)."""
    canonical = json.dumps(scenario_to_dict(sc, include_output=False),
                           sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))


def save_scenario(sc: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(sc), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Resolution


def resolve_network(sc: Scenario, base_dir: Path | None = None) -> Network:
    spec = sc.network
    if "grid" in spec:
        g = dict(spec["grid"])
        rows, cols = int(g.pop("rows")), int(g.pop("cols"))
        kwargs = {}
        for key in ("capacities", "turn_ratios", "queue_threshold", "traversal_delay"):
            if key in g:
                kwargs[key] = g.pop(key)
        if "closed_sides" in g:
            kwargs["closed_sides"] = frozenset(g.pop("closed_sides"))
        if g:
            raise ValidationError([Violation("network.grid", "unknown-keys", str(sorted(g)))],
                                  context="scenario")
        if "traversal_delay" in kwargs:
            kwargs["traversal_delay"] = int(kwargs["traversal_delay"])
        return build_grid(rows, cols, GridConfig(**kwargs))
    if "file" in spec:
        path = Path(spec["file"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        from .network import load_network
        return load_network(path)
    if "inline" in spec:
        return network_from_dict(spec["inline"])
    raise ValidationError([Violation("scenario", "network", "needs one of grid/file/inline")])


def resolve_demand(sc: Scenario, net: Network) -> DemandProfile:
    spec = sc.demand
    seed = int(spec.get("seed", 0))
    segments = tuple(
        DemandSegment(until=int(s["until"]), rate=float(s["rate"]))
        for s in spec.get("segments", ())
    )
    entries = spec.get("entries", "all")
    if entries == "all":
        return DemandProfile.uniform(net, segments, seed=seed)
    if isinstance(entries, Mapping):  # per-link segment lists
        per_link = {
            lid: tuple(DemandSegment(int(s["until"]), float(s["rate"])) for s in segs)
            for lid, segs in entries.items()
        }
        profile = DemandProfile(segments=per_link, seed=seed)
    else:
        profile = DemandProfile(segments={lid: segments for lid in entries}, seed=seed)
    errors = profile.validate_against(net)
    if errors:
        raise ValidationError([Violation("demand", "links", e) for e in errors],
                              context="scenario")
    return profile


# ---------------------------------------------------------------------------
# Presets (desk-scale benchmark scenarios)


def benchmark_scenario(rows: int = 4, cols: int = 4, horizon: int = 2000,
                       seeds: Sequence[int] = (0, 1, 2, 3, 4),
                       plateau_rate: float = 0.85, warmup: int = 200,
                       include_cabp: bool = False,
                       include_admm: bool = False) -> Scenario:
    """Token-mode comparison matrix on a grid, ramp-up then plateau demand.

    The plateau rate is calibrated to roughly 80% of the load the adaptive
    controllers can serve on the default 4x4 geometry; fixed-time saturates
    well below that.
    """
    controllers: list[dict] = [
        {"kind": "fixed_time"},
        {"kind": "mp"},
    ]
    if include_cabp:
        controllers.append({"kind": "cabp"})
    controllers.append({
        "kind": "cmpp", "algorithm": "greedy", "overflow_weight": 4.0,
        "spillover_weight": 2.0, "repeat_green_weight": 0.1,
        "history_horizon": 3, "penalty_weight": 1.0,
    })
    if include_admm:
        controllers.append({
            "kind": "cmpp", "algorithm": "admm", "overflow_weight": 4.0,
            "spillover_weight": 2.0, "repeat_green_weight": 0.1,
            "history_horizon": 3, "penalty_weight": 1.0, "rho": 1.0, "max_iters": 10,
        })
    return scenario_from_dict({
        "name": f"benchmark-grid{rows}x{cols}",
        "network": {"grid": {"rows": rows, "cols": cols, "queue_threshold": 12.0,
                             "traversal_delay": 1}},
        "demand": {"entries": "all", "seed": 7,
                   "segments": [{"until": warmup, "rate": plateau_rate / 2},
                                {"until": horizon, "rate": plateau_rate}]},
        "controllers": controllers,
        "horizon": horizon,
        "seeds": list(seeds),
        "mode": "token",
        "step_seconds": 20.0,
    })


def overload_scenario(rows: int = 2, cols: int = 2, horizon: int = 400,
                      rate: float = 4.0, seeds: Sequence[int] = (0,)) -> Scenario:
    """Deliberately infeasible demand: every controller's queues must grow."""
    return scenario_from_dict({
        "name": f"overload-grid{rows}x{cols}",
        "network": {"grid": {"rows": rows, "cols": cols, "queue_threshold": 12.0,
                             "traversal_delay": 1}},
        "demand": {"entries": "all", "seed": 3,
                   "segments": [{"until": horizon, "rate": rate}]},
        "controllers": [
            {"kind": "fixed_time"},
            {"kind": "mp"},
            {"kind": "cabp"},
            {"kind": "cmpp", "algorithm": "greedy"},
            {"kind": "cmpp", "algorithm": "admm"},
        ],
        "horizon": horizon,
        "seeds": list(seeds),
        "mode": "token",
        "step_seconds": 20.0,
    })
