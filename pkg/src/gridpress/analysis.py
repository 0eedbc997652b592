"""Stability diagnostics and experiment metrics.

Collects one record per simulation step (queue totals, occupancy,
Lyapunov values, realized penalties, solver statistics) plus one record
per completed vehicle in token mode, and post-processes them into run
summaries and a stability report.

Wall-clock solver times are tracked separately from the step records so
that the metric tables stay byte-identical across reruns.
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .controllers import ControllerConfig, penalty_upper_bound
from .network import MovementKey, Network


def lyapunov(net: Network, q: Mapping[MovementKey, float]) -> tuple[float, float]:
    """Half the sum of squared queues, plain and multiplicity-weighted."""
    plain = 0.0
    weighted = 0.0
    for mv in net.movement_order:
        sq = q[mv] * q[mv]
        plain += 0.5 * sq
        weighted += 0.5 * net.multiplicity[mv] * sq
    return plain, weighted


def drift_series(values: Sequence[float]) -> list[float]:
    """One-step differences of a Lyapunov series."""
    if len(values) < 2:
        raise ValueError("need at least two steps to form drifts")
    return [values[i + 1] - values[i] for i in range(len(values) - 1)]


@dataclass
class StepRecord:
    t: int
    total_queue: float
    occupancy: float
    entered: float
    exited: float
    lyapunov: float
    lyapunov_weighted: float
    penalty_total: float | None = None
    penalty_max: float | None = None
    solver_iterations: int = 0
    solver_residual: float = 0.0
    solver_objective: float | None = None


@dataclass
class VehicleRecord:
    id: int
    entry_step: int
    exit_step: int
    travel_steps: int
    waiting_steps: int


class MetricsLog:
    """Per-run collector; post-step values per row, action stats alongside."""

    def __init__(self, net: Network, mode: str, controller_label: str = ""):
        self.net = net
        self.mode = mode
        self.controller_label = controller_label
        self.records: list[StepRecord] = []
        self.vehicles: list[VehicleRecord] = []
        self.solve_times: list[float] = []
        self.initial_lyapunov: tuple[float, float] = (0.0, 0.0)
        self.initial_total_queue: float = 0.0
        self.initial_occupancy: float = 0.0
        self._inflow_sum = {mv: 0.0 for mv in net.movement_order}
        self._outflow_sum = {mv: 0.0 for mv in net.movement_order}
        self._offered_sum = {mv: 0.0 for mv in net.movement_order}

    @property
    def steps(self) -> int:
        return len(self.records)

    def add_step(self, record: StepRecord, solve_time: float,
                 inflow: Mapping[MovementKey, float],
                 outflow: Mapping[MovementKey, float],
                 offered: Mapping[MovementKey, float]) -> None:
        self.records.append(record)
        self.solve_times.append(solve_time)
        for mv in self.net.movement_order:
            self._inflow_sum[mv] += inflow[mv]
            self._outflow_sum[mv] += outflow[mv]
            self._offered_sum[mv] += offered[mv]

    def add_vehicles(self, completed) -> None:
        for tok in completed:
            self.vehicles.append(VehicleRecord(
                id=tok.id, entry_step=tok.entry_step, exit_step=tok.exit_step,
                travel_steps=tok.exit_step - tok.entry_step, waiting_steps=tok.waiting,
            ))

    def lyapunov_series(self, weighted: bool = False) -> list[float]:
        first = self.initial_lyapunov[1 if weighted else 0]
        key = "lyapunov_weighted" if weighted else "lyapunov"
        return [first] + [getattr(r, key) for r in self.records]

    def occupancy_series(self) -> list[float]:
        return [r.occupancy for r in self.records]

    def conservation_ok(self) -> bool:
        return all(r.entered == r.occupancy + r.exited for r in self.records)

    def mean_flows(self) -> tuple[dict, dict, dict]:
        n = max(self.steps, 1)
        a = {mv: v / n for mv, v in self._inflow_sum.items()}
        b = {mv: v / n for mv, v in self._outflow_sum.items()}
        c = {mv: v / n for mv, v in self._offered_sum.items()}
        return a, b, c


# ---------------------------------------------------------------------------
# Reports


@dataclass
class StabilityReport:
    average_total_queue: float
    final_total_queue: float
    penalty_bound: float
    penalty_weight: float
    multiplicity_min: int
    multiplicity_max: int
    feasibility_margin: float        # min over movements of mean(outflow - inflow)
    offered_margin: float            # min over movements of mean(offered service - inflow)
    infeasible: bool                 # feasibility_margin <= 0
    q3_occupancy_mean: float
    q4_occupancy_mean: float
    stationarity_gap: float          # |q4 - q3| / max(q3, eps)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def stability_report(log: MetricsLog, config: ControllerConfig,
                     net: Network) -> StabilityReport:
    """Measurable stability diagnostics for one logged run.

    The feasibility margin uses realized flows, so any run that accumulates
    queue from an empty start reports a (slightly) non-positive margin; the
    offered margin (capacity granted while green minus inflow) is the
    interpretable service-slack figure.  Overloaded runs show a clearly
    negative feasibility margin and a failing stationarity check.
    """
    a, b, offered = log.mean_flows()
    margin = min((b[mv] - a[mv] for mv in net.movement_order), default=0.0)
    offered_margin = min((offered[mv] - a[mv] for mv in net.movement_order), default=0.0)

    totals = [r.total_queue for r in log.records]
    occ = log.occupancy_series()
    n = len(occ)
    q3 = occ[n // 2: 3 * n // 4]
    q4 = occ[3 * n // 4:]
    q3_mean = sum(q3) / len(q3) if q3 else 0.0
    q4_mean = sum(q4) / len(q4) if q4 else 0.0
    gap = abs(q4_mean - q3_mean) / max(q3_mean, 1e-9)

    mults = [net.multiplicity[mv] for mv in net.movement_order] or [1]
    return StabilityReport(
        average_total_queue=sum(totals) / len(totals) if totals else 0.0,
        final_total_queue=totals[-1] if totals else 0.0,
        penalty_bound=penalty_upper_bound(net, config),
        penalty_weight=config.penalty_weight,
        multiplicity_min=min(mults),
        multiplicity_max=max(mults),
        feasibility_margin=margin,
        offered_margin=offered_margin,
        infeasible=margin <= 0.0,
        q3_occupancy_mean=q3_mean,
        q4_occupancy_mean=q4_mean,
        stationarity_gap=gap,
    )


@dataclass
class Summary:
    mode: str
    steps: int
    entered: float
    exited: float
    completed: int
    has_vehicle_metrics: bool
    travel_time_mean_s: float | None
    travel_time_median_s: float | None
    waiting_time_mean_s: float | None
    peak_occupancy: float
    final_occupancy: float
    mean_total_queue: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def summarize(log: MetricsLog, step_seconds: float = 20.0) -> Summary:
    """Travel/waiting/occupancy summary; vehicle metrics need token mode."""
    occ = log.occupancy_series()
    totals = [r.total_queue for r in log.records]
    has_vehicles = log.mode == "token"
    if has_vehicles and log.vehicles:
        travel = [v.travel_steps * step_seconds for v in log.vehicles]
        waiting = [v.waiting_steps * step_seconds for v in log.vehicles]
        travel_mean, travel_median = statistics.fmean(travel), statistics.median(travel)
        waiting_mean = statistics.fmean(waiting)
    else:
        travel_mean = travel_median = waiting_mean = (0.0 if has_vehicles else None)
    last = log.records[-1] if log.records else None
    return Summary(
        mode=log.mode,
        steps=log.steps,
        entered=last.entered if last else 0.0,
        exited=last.exited if last else 0.0,
        completed=len(log.vehicles),
        has_vehicle_metrics=has_vehicles,
        travel_time_mean_s=travel_mean,
        travel_time_median_s=travel_median,
        waiting_time_mean_s=waiting_mean,
        peak_occupancy=max(occ) if occ else 0.0,
        final_occupancy=occ[-1] if occ else 0.0,
        mean_total_queue=sum(totals) / len(totals) if totals else 0.0,
    )


@dataclass
class TimingStats:
    decide_mean_s: float
    decide_max_s: float
    decide_total_s: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def timing_stats(log: MetricsLog) -> TimingStats:
    times = log.solve_times or [0.0]
    return TimingStats(
        decide_mean_s=statistics.fmean(times),
        decide_max_s=max(times),
        decide_total_s=sum(times),
    )


# ---------------------------------------------------------------------------
# Tabular output (deterministic; wall times go to their own file)

STEP_COLUMNS = ("t", "total_queue", "occupancy", "entered", "exited", "lyapunov",
                "lyapunov_weighted", "penalty_total", "penalty_max",
                "solver_iterations", "solver_residual", "solver_objective")


def write_steps_csv(log: MetricsLog, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(STEP_COLUMNS)
        for r in log.records:
            out.writerow([
                r.t, r.total_queue, r.occupancy, r.entered, r.exited,
                r.lyapunov, r.lyapunov_weighted,
                "" if r.penalty_total is None else r.penalty_total,
                "" if r.penalty_max is None else r.penalty_max,
                r.solver_iterations, r.solver_residual,
                "" if r.solver_objective is None else r.solver_objective,
            ])


def write_vehicles_csv(log: MetricsLog, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(("id", "entry_step", "exit_step", "travel_steps", "waiting_steps"))
        for v in log.vehicles:
            out.writerow([v.id, v.entry_step, v.exit_step, v.travel_steps, v.waiting_steps])


def write_timing_csv(log: MetricsLog, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(("t", "decide_seconds"))
        for t, s in enumerate(log.solve_times):
            out.writerow([t, s])
