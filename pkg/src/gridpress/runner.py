"""Simulation driver: one (controller, seed) run and its artifacts.

A run steps the chosen dynamics mode for the scenario horizon, asking the
controller for one action per step and logging metrics.  Only the
controller call is timed, isolating decision cost from simulation cost.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import analysis
from .analysis import MetricsLog, StepRecord
from .controllers import (ControllerConfig, ObjectiveBuilder, cabp_select,
                          fixed_time_select, mp_select)
from .consensus import ConsensusProblem, solve
from .dynamics import (ControlAction, DemandProfile, QueueState, TokenState,
                       flows, make_initial_state, step_fluid, step_tokens)
from .network import Network


@dataclass
class StepInfo:
    iterations: int = 0
    residual: float = 0.0
    objective: float | None = None
    penalty_total: float | None = None
    penalty_max: float | None = None


class FixedTimeController:
    def __init__(self, net: Network, config: ControllerConfig):
        self.net = net
        self.plans = {}
        for iid in net.intersection_order:
            k = net.phase_count(iid)
            plan = config.fixed_time_plan
            if plan is not None and len(plan) != k:
                plan = None  # mismatched plan falls back to uniform durations
            self.plans[iid] = plan or (1,) * k

    def decide(self, state: QueueState, t: int, demand: Mapping[str, float]):
        phases = {
            iid: fixed_time_select(t, self.net.intersections[iid], self.plans[iid])
            for iid in self.net.intersection_order
        }
        return ControlAction(phases), StepInfo()


class MaxPressureController:
    def __init__(self, net: Network, config: ControllerConfig):
        self.net = net

    def decide(self, state: QueueState, t: int, demand: Mapping[str, float]):
        phases = {iid: mp_select(self.net, state, iid)
                  for iid in self.net.intersection_order}
        return ControlAction(phases), StepInfo()


class CapacityAwareController:
    def __init__(self, net: Network, config: ControllerConfig):
        self.net = net
        self.mode = config.cabp_gating

    def decide(self, state: QueueState, t: int, demand: Mapping[str, float]):
        phases = {iid: cabp_select(self.net, state, iid, self.mode)
                  for iid in self.net.intersection_order}
        return ControlAction(phases), StepInfo()


class CmppController:
    def __init__(self, net: Network, config: ControllerConfig):
        self.net = net
        self.config = config
        self.builder = ObjectiveBuilder(net, config)

    def decide(self, state: QueueState, t: int, demand: Mapping[str, float]):
        objectives = self.builder.build(state, demand)
        problem = ConsensusProblem(self.net, objectives)
        assignment, info = solve(
            problem, self.config.algorithm, rho=self.config.rho,
            max_iters=self.config.max_iters,
            exhaustive_limit=self.config.exhaustive_limit,
        )
        penalties = [objectives[iid].penalty_value(assignment)
                     for iid in self.net.intersection_order]
        residual = info.residual_trace[-1] if info.residual_trace else 0.0
        return ControlAction(assignment), StepInfo(
            iterations=info.iterations, residual=residual, objective=info.objective,
            penalty_total=sum(penalties), penalty_max=max(penalties),
        )


def make_controller(net: Network, config: ControllerConfig):
    table = {
        "fixed_time": FixedTimeController,
        "mp": MaxPressureController,
        "cabp": CapacityAwareController,
        "cmpp": CmppController,
    }
    if config.kind not in table:
        raise ValueError(f"unknown controller kind {config.kind!r}")
    return table[config.kind](net, config)


# ---------------------------------------------------------------------------
# Single run


@dataclass
class RunResult:
    label: str
    seed: int
    log: MetricsLog
    summary: analysis.Summary
    stability: analysis.StabilityReport
    timing: analysis.TimingStats
    queue_dump: list[tuple] | None = None


def run_single(net: Network, profile: DemandProfile, config: ControllerConfig,
               seed: int, horizon: int, mode: str = "token",
               step_seconds: float = 20.0, dump_queues: bool = False,
               arrival_mode: str = "poisson") -> RunResult:
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    history_limit = max(config.history_horizon + 1, 1)
    controller = make_controller(net, config)
    log = MetricsLog(net, mode, controller_label=config.label)
    dump: list[tuple] | None = [] if dump_queues else None

    rng = np.random.default_rng(np.random.SeedSequence([profile.seed, seed]))
    entered = 0.0

    if mode == "token":
        tstate = TokenState(net, history_limit=history_limit)
    elif mode == "fluid":
        fstate = make_initial_state(net, history_limit=history_limit)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    capacities = {mv: net.movements[mv].capacity for mv in net.movement_order}

    for t in range(horizon):
        demand = profile.rates(t)
        view = tstate.as_queue_state() if mode == "token" else fstate
        if t == 0:
            log.initial_lyapunov = analysis.lyapunov(net, view.q)
            log.initial_total_queue = sum(view.q.values())
            log.initial_occupancy = (
                tstate.occupancy() if mode == "token"
                else sum(view.q.values()) + sum(map(sum, view.transit.values()))
            )

        tic = time.perf_counter()
        action, step_info = controller.decide(view, t, demand)
        decide_seconds = time.perf_counter() - tic

        a, b = flows(net, view, action, demand)
        greens = action.green_set(net)
        offered = {mv: (capacities[mv] if mv in greens else 0.0)
                   for mv in net.movement_order}

        if mode == "token":
            completed = step_tokens(net, tstate, action, demand, rng,
                                    arrival_mode=arrival_mode)
            log.add_vehicles(completed)
            counts = tstate.queue_counts()
            q_after = {mv: float(c) for mv, c in counts.items()}
            total_queue = float(sum(counts.values()))
            occupancy = float(tstate.occupancy())
            entered = float(tstate.entered)
            exited = float(tstate.exited)
        else:
            fstate = step_fluid(net, fstate, action, demand)
            q_after = dict(fstate.q)
            total_queue = sum(q_after.values())
            entered += sum(demand.values())
            occupancy = total_queue + sum(map(sum, fstate.transit.values()))
            exited = entered - occupancy  # conservation identity

        lyap, lyap_w = analysis.lyapunov(net, q_after)
        log.add_step(StepRecord(
            t=t, total_queue=total_queue, occupancy=occupancy,
            entered=entered, exited=exited, lyapunov=lyap, lyapunov_weighted=lyap_w,
            penalty_total=step_info.penalty_total, penalty_max=step_info.penalty_max,
            solver_iterations=step_info.iterations, solver_residual=step_info.residual,
            solver_objective=step_info.objective,
        ), solve_time=decide_seconds, inflow=a, outflow=b, offered=offered)

        if dump is not None:
            for mv in net.movement_order:
                dump.append((t, mv[0], mv[1], q_after[mv]))

    return RunResult(
        label=config.label, seed=seed, log=log,
        summary=analysis.summarize(log, step_seconds),
        stability=analysis.stability_report(log, config, net),
        timing=analysis.timing_stats(log),
        queue_dump=dump,
    )


# ---------------------------------------------------------------------------
# Artifacts


def write_run_dir(result: RunResult, out_dir: Path, provenance: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    analysis.write_steps_csv(result.log, out_dir / "steps.csv")
    if result.log.mode == "token":
        analysis.write_vehicles_csv(result.log, out_dir / "vehicles.csv")
    analysis.write_timing_csv(result.log, out_dir / "timing.csv")
    (out_dir / "summary.json").write_text(
        json.dumps(result.summary.to_dict(), indent=2, sort_keys=True) + "\n")
    (out_dir / "stability.json").write_text(
        json.dumps(result.stability.to_dict(), indent=2, sort_keys=True) + "\n")
    (out_dir / "timing.json").write_text(
        json.dumps(result.timing.to_dict(), indent=2, sort_keys=True) + "\n")
    (out_dir / "provenance.json").write_text(
        json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    if result.queue_dump is not None:
        with open(out_dir / "queues.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("t", "from_link", "to_link", "queue"))
            w.writerows(result.queue_dump)
    return out_dir


def load_run_dir(run_dir: Path) -> dict:
    run_dir = Path(run_dir)
    out = {"path": str(run_dir)}
    for name in ("summary", "stability", "timing", "provenance"):
        f = run_dir / f"{name}.json"
        if not f.exists():
            raise FileNotFoundError(f"{run_dir} is not a run directory (missing {name}.json)")
        out[name] = json.loads(f.read_text())
    return out
