"""Per-step signal decision logic.

Four controller families share the movement-weight/phase-pressure core:

* fixed-time: cyclic predefined plan,
* max pressure (MP): activate the phase with the largest capacity-weighted
  queue differential,
* capacity-aware backpressure (CA-BP): MP with movement contributions
  gated to zero when all downstream queues are predicted to overflow,
* coordinated max-pressure-plus-penalty (CMPP): each intersection scores
  a full neighborhood phase assignment by total neighborhood pressure
  minus a weighted penalty; the consensus module reconciles overlapping
  neighborhoods.

The CMPP penalty charges each movement of the center intersection for
(1) its own predicted queue exceeding the overflow threshold, (2) each
downstream queue whose inflow upper bound exceeds the threshold, and
(3) repeated green: the number of times the chosen phase appeared in the
recent activation window, current step included.  Term (2) is the only
coupling to neighbor phases: the downstream service signal comes from the
neighbor's assigned phase when the downstream intersection is a neighbor,
and is conservatively red otherwise.  Term (1) likewise treats upstream
signals as red and uses expected demand only, so it depends on the center
phase alone.

The repeat-green run is capped at ``history_horizon`` by default so the
penalty respects its closed-form upper bound; the uncapped literal window
(which can reach horizon + 1) remains available for diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dynamics import QueueState
from .network import Intersection, MovementKey, Network

CONTROLLER_KINDS = ("fixed_time", "mp", "cabp", "cmpp")
CMPP_ALGORITHMS = ("admm", "greedy", "exhaustive")


@dataclass(frozen=True)
class ControllerConfig:
    kind: str = "mp"
    overflow_weight: float = 4.0       # own predicted-overflow penalty weight
    spillover_weight: float = 2.0      # downstream-overflow penalty weight
    repeat_green_weight: float = 0.1   # repeated-green penalty weight
    history_horizon: int = 3           # steps of history in the repeat term
    penalty_weight: float = 1.0        # pressure vs penalty trade-off
    fixed_time_plan: tuple[int, ...] | None = None  # per-phase durations (steps)
    cabp_gating: str = "all"           # gate when "all" (or "any") downstream overflow
    algorithm: str = "greedy"          # cmpp consensus solver
    rho: float = 1.0                   # admm penalty parameter
    max_iters: int = 10                # admm iteration budget
    exhaustive_limit: int = 1_000_000  # oracle search-space cap
    cap_repeat_term: bool = True       # keep repeat-green run <= history_horizon

    @property
    def label(self) -> str:
        return f"cmpp-{self.algorithm}" if self.kind == "cmpp" else self.kind


def validate_config(config: ControllerConfig) -> list[str]:
    """Scenario-level checks (the library itself tolerates e.g. V = 0)."""
    out = []
    if config.kind not in CONTROLLER_KINDS:
        out.append(f"unknown controller kind {config.kind!r}")
    for name in ("overflow_weight", "spillover_weight", "repeat_green_weight"):
        if getattr(config, name) < 0:
            out.append(f"{name} must be >= 0")
    if config.history_horizon < 0:
        out.append("history_horizon must be >= 0")
    if config.kind == "cmpp":
        if not config.penalty_weight > 0:
            out.append("penalty_weight must be > 0 for cmpp")
        if config.algorithm not in CMPP_ALGORITHMS:
            out.append(f"unknown cmpp algorithm {config.algorithm!r}")
        if not config.rho > 0:
            out.append("rho must be > 0")
        if config.max_iters < 1:
            out.append("max_iters must be >= 1")
    if config.cabp_gating not in ("all", "any"):
        out.append(f"unknown cabp gating mode {config.cabp_gating!r}")
    if config.fixed_time_plan is not None:
        if not config.fixed_time_plan or any(
                not isinstance(d, int) or d <= 0 for d in config.fixed_time_plan):
            out.append("fixed_time_plan must be positive whole-step durations")
    return out


# ---------------------------------------------------------------------------
# Pressure core (reference scalar implementations)


def movement_weight(net: Network, state: QueueState, movement: MovementKey) -> float:
    """Queue differential: own queue minus ratio-weighted downstream queues."""
    w = state.q[movement]
    for down in net.downstream_movements[movement[1]]:
        w -= net.movements[down].turning_ratio * state.q[down]
    return w


def phase_pressure(net: Network, state: QueueState, intersection_id: str,
                   phase_index: int) -> float:
    """Capacity-weighted sum of movement weights over the phase's members."""
    total = 0.0
    for mv in sorted(net.green_movements(intersection_id, phase_index)):
        total += net.movements[mv].capacity * movement_weight(net, state, mv)
    return total


def mp_select(net: Network, state: QueueState, intersection_id: str) -> int:
    """Max-pressure phase choice; ties go to the lowest phase index."""
    best, best_val = 0, None
    for k in range(net.phase_count(intersection_id)):
        val = phase_pressure(net, state, intersection_id, k)
        if best_val is None or val > best_val:
            best, best_val = k, val
    return best


def _movement_gated(net: Network, state: QueueState, movement: MovementKey,
                    mode: str) -> bool:
    """No-residual-space gate: the inflow upper bound (downstream signal
    assumed red) exceeds the threshold for all (or any) downstream queues."""
    downs = net.downstream_movements[movement[1]]
    if not downs:
        return False
    m = net.movements[movement]
    y = min(state.q[movement], m.capacity)
    over = [state.q[d] + y > net.movements[d].queue_threshold for d in downs]
    return all(over) if mode == "all" else any(over)


def cabp_select(net: Network, state: QueueState, intersection_id: str,
                mode: str = "all") -> int:
    """Capacity-aware backpressure: MP with gated movement contributions.

    When every phase is fully gated there is nothing left to discriminate
    on, so the choice falls back to the plain MP ordering.
    """
    inter = net.intersections[intersection_id]
    gated = {mv: _movement_gated(net, state, mv, mode) for mv in inter.movements}
    if all(all(gated[mv] for mv in p.movements) for p in inter.phases):
        return mp_select(net, state, intersection_id)
    best, best_val = 0, None
    for k in range(len(inter.phases)):
        val = 0.0
        for mv in sorted(inter.phases[k].movements):
            if not gated[mv]:
                val += net.movements[mv].capacity * movement_weight(net, state, mv)
        if best_val is None or val > best_val:
            best, best_val = k, val
    return best


def fixed_time_select(t: int, intersection: Intersection,
                      plan: Sequence[int] | None = None) -> int:
    """Cyclic schedule position at step t (durations in whole steps)."""
    k = len(intersection.phases)
    if plan is None:
        plan = (1,) * k
    if len(plan) != k or any(d <= 0 for d in plan):
        raise ValueError(f"plan {plan!r} must give a positive duration per phase ({k})")
    pos = t % sum(plan)
    for idx, dur in enumerate(plan):
        if pos < dur:
            return idx
        pos -= dur
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# CMPP penalty (reference implementation)


def penalty(net: Network, state: QueueState, config: ControllerConfig,
            demand: Mapping[str, float] | None, intersection_id: str,
            assignment: Mapping[str, int], cap_repeat: bool | None = None) -> float:
    """Penalty of the center intersection under a neighborhood assignment.

    ``assignment`` must give the center's phase; neighbor phases are used
    for the downstream-overflow term when present and assumed red when
    absent.  With too little history the repeat-green window shrinks to
    the available steps.
    """
    cap = config.cap_repeat_term if cap_repeat is None else cap_repeat
    demand = demand or {}
    inter = net.intersections[intersection_id]
    k_center = assignment[intersection_id]
    greens = net.green_movements(intersection_id, k_center)

    horizon = config.history_horizon
    hist = state.history.get(intersection_id, ())
    window = hist[-horizon:] if horizon > 0 else ()
    run = 1 + sum(1 for k in window if k == k_center)
    if cap:
        run = min(run, horizon)

    down_greens: dict[str, frozenset[MovementKey]] = {}
    for nb in inter.neighbors:
        if nb in assignment:
            down_greens[nb] = net.green_movements(nb, assignment[nb])

    total = 0.0
    for mv in sorted(inter.movements):
        m = net.movements[mv]
        q = state.q[mv]
        y = min(q, m.capacity)
        s = 1.0 if mv in greens else 0.0
        predicted = q - y * s + demand.get(mv[0], 0.0) * m.turning_ratio
        own_overflow = 1.0 if predicted > m.queue_threshold else 0.0

        downstream_overflow = 0.0
        for down in net.downstream_movements[mv[1]]:
            dm = net.movements[down]
            q_down = state.q[down]
            owner = net.owner[down]
            s_down = 1.0 if down in down_greens.get(owner, ()) else 0.0
            bound = q_down - min(q_down, dm.capacity) * s_down + y * s
            if bound > dm.queue_threshold:
                downstream_overflow += 1.0

        repeat_green = float(run) if s else 0.0
        total += (config.overflow_weight * own_overflow
                  + config.spillover_weight * downstream_overflow
                  + config.repeat_green_weight * repeat_green)
    return total


def penalty_upper_bound(net: Network, config: ControllerConfig) -> float:
    """Closed-form bound: movements x (own + downstream + repeat) maxima."""
    return net.max_movements_per_intersection * (
        config.overflow_weight
        + net.max_downstream_links * config.spillover_weight
        + config.repeat_green_weight * config.history_horizon
    )


# ---------------------------------------------------------------------------
# Neighborhood objective (table form used by the consensus solvers)


@dataclass
class LocalObjective:
    """Score for one neighborhood phase assignment.

    The objective is total selected-phase pressure over the members minus
    ``penalty_weight`` times the center's penalty.  The penalty decomposes
    into a term of the center phase alone (``penalty_unary``) plus one
    pairwise table per neighbor that owns downstream queues of the center
    (``penalty_pairs``); this mirrors the red-by-default signal rule above.
    """

    center: str
    members: tuple[str, ...]          # center first, then neighbors in id order
    dims: tuple[int, ...]
    gammas: tuple[np.ndarray, ...]    # per-member phase pressures
    penalty_unary: np.ndarray         # (K_center,)
    penalty_pairs: dict[str, np.ndarray]  # neighbor -> (K_center, K_neighbor)
    red_unary: np.ndarray             # penalty with every neighbor held red
    penalty_weight: float

    def penalty_value(self, assignment: Mapping[str, int]) -> float:
        k = assignment[self.center]
        pen = float(self.penalty_unary[k])
        for j in self.members[1:]:
            pen += float(self.penalty_pairs[j][k, assignment[j]])
        return pen

    def value(self, assignment: Mapping[str, int]) -> float:
        total = float(self.gammas[0][assignment[self.center]])
        for j, g in zip(self.members[1:], self.gammas[1:]):
            total += float(g[assignment[j]])
        return total - self.penalty_weight * self.penalty_value(assignment)

    def value_tensor(self) -> np.ndarray:
        """Dense objective over every member phase combination.

        Cell arithmetic mirrors value(): pressures accumulate in member
        order, then the penalty is subtracted once.
        """
        n = len(self.dims)

        def along(vec: np.ndarray, axis: int) -> np.ndarray:
            shape = [1] * n
            shape[axis] = vec.shape[0]
            return vec.reshape(shape)

        total = np.broadcast_to(along(self.gammas[0], 0), self.dims).copy()
        for pos, g in enumerate(self.gammas[1:], start=1):
            total = total + along(g, pos)
        pen = np.broadcast_to(along(self.penalty_unary, 0), self.dims).copy()
        for pos, j in enumerate(self.members[1:], start=1):
            table = self.penalty_pairs[j]
            shape = [1] * n
            shape[0] = table.shape[0]
            shape[pos] = table.shape[1]
            pen = pen + table.reshape(shape)
        return total - self.penalty_weight * pen

    def argmax(self, fixed: Mapping[str, int] | None = None) -> tuple[dict[str, int], float]:
        """Exact maximizer over the non-fixed members.

        Given the center phase, each free neighbor separates, so the search
        is center-conditioned: pick each neighbor's best response per center
        phase, then compare the resulting totals.  Ties resolve to the
        lowest phase indices (center first), matching plain enumeration.
        """
        fixed = fixed or {}
        responses: dict[str, np.ndarray] = {}
        for j, g in zip(self.members[1:], self.gammas[1:]):
            if j not in fixed:
                scores = g[np.newaxis, :] - self.penalty_weight * self.penalty_pairs[j]
                responses[j] = scores.argmax(axis=1)

        center_options = (fixed[self.center],) if self.center in fixed \
            else range(self.dims[0])
        best: dict[str, int] | None = None
        best_val = -np.inf
        for k in center_options:
            choice = {self.center: int(k)}
            for j in self.members[1:]:
                choice[j] = int(fixed[j]) if j in fixed else int(responses[j][k])
            val = self.value(choice)
            if best is None or val > best_val:
                best, best_val = choice, val
        assert best is not None
        return best, best_val


class ObjectiveBuilder:
    """Static index structure for building per-step neighborhood objectives.

    Construction is per (network, config); build() is called once per step
    and returns one LocalObjective per intersection.  The per-step work is
    a handful of small vectorized operations per intersection.
    """

    def __init__(self, net: Network, config: ControllerConfig):
        self.net = net
        self.config = config
        order = net.movement_order
        self.index = {mv: i for i, mv in enumerate(order)}
        n = len(order)
        self.capacity = np.array([net.movements[mv].capacity for mv in order])
        self.threshold = np.array([net.movements[mv].queue_threshold for mv in order])

        # Downstream turning-ratio matrix for the weight vector w = q - D q.
        self.down_matrix = np.zeros((n, n))
        for mv in order:
            for down in net.downstream_movements[mv[1]]:
                self.down_matrix[self.index[mv], self.index[down]] = \
                    net.movements[down].turning_ratio

        # Demand routing: (row, entry link, ratio) for entry-fed movements.
        self.entry_rows = [
            (self.index[mv], mv[0], net.movements[mv].turning_ratio)
            for mv in order if net.links[mv[0]].kind == "entry"
        ]

        self.member_rows: dict[str, np.ndarray] = {}      # movement rows per intersection
        self.membership: dict[str, np.ndarray] = {}       # (|moves|, K) phase membership
        self.phase_sizes: dict[str, np.ndarray] = {}      # movements per phase
        # Downstream-overflow groups per intersection, one per downstream
        # owner: (owner-or-None, upstream rows, downstream rows, upstream
        # membership rows, downstream membership rows).  Owner None collects
        # exit/non-neighbor targets whose signal is always red.
        self.pair_groups: dict[str, list[tuple[str | None, np.ndarray, np.ndarray,
                                               np.ndarray, np.ndarray | None]]] = {}

        phase_rows: dict[MovementKey, np.ndarray] = {}
        for iid in net.intersection_order:
            inter = net.intersections[iid]
            moves = sorted(inter.movements)
            rows = np.array([self.index[mv] for mv in moves], dtype=int)
            k = len(inter.phases)
            memb = np.zeros((len(moves), k))
            for r, mv in enumerate(moves):
                for p in net.movement_phases[mv]:
                    memb[r, p] = 1.0
                phase_rows[mv] = memb[r]
            self.member_rows[iid] = rows
            self.membership[iid] = memb
            self.phase_sizes[iid] = memb.sum(axis=0)

        for iid in net.intersection_order:
            inter = net.intersections[iid]
            groups: dict[str | None, tuple[list[MovementKey], list[MovementKey]]] = {}
            for mv in sorted(inter.movements):
                for down in net.downstream_movements[mv[1]]:
                    owner = net.owner[down]
                    key = owner if owner in inter.neighbors else None
                    lst = groups.setdefault(key, ([], []))
                    lst[0].append(mv)
                    lst[1].append(down)
            packed = []
            for key in sorted(groups, key=lambda x: (x is not None, x)):
                ups, downs = groups[key]
                up_rows = np.array([self.index[mv] for mv in ups], dtype=int)
                down_rows = np.array([self.index[mv] for mv in downs], dtype=int)
                up_memb = np.stack([phase_rows[mv] for mv in ups])
                down_memb = np.stack([phase_rows[mv] for mv in downs]) if key else None
                packed.append((key, up_rows, down_rows, up_memb, down_memb))
            self.pair_groups[iid] = packed

    def build(self, state: QueueState, demand: Mapping[str, float] | None = None
              ) -> dict[str, LocalObjective]:
        net, cfg = self.net, self.config
        demand = demand or {}
        order = net.movement_order
        q = np.array([state.q[mv] for mv in order])
        y = np.minimum(q, self.capacity)
        w = q - self.down_matrix @ q
        cw = self.capacity * w

        inflow = np.zeros(len(order))
        for row, link, ratio in self.entry_rows:
            inflow[row] = demand.get(link, 0.0) * ratio

        gammas = {
            iid: self.membership[iid].T @ cw[self.member_rows[iid]]
            for iid in net.intersection_order
        }

        horizon = cfg.history_horizon
        objectives: dict[str, LocalObjective] = {}
        for iid in net.intersection_order:
            inter = net.intersections[iid]
            rows = self.member_rows[iid]
            memb = self.membership[iid]
            k = len(inter.phases)

            # Own-overflow: predicted queue (upstream red, expected demand)
            # over threshold, per candidate phase.
            base = (q + inflow - self.threshold)[rows]
            own = ((base[:, None] - y[rows, None] * memb) > 0).sum(axis=0).astype(float)

            # Repeat-green run per candidate phase.
            hist = state.history.get(iid, ())
            window = hist[-horizon:] if horizon > 0 else ()
            counts = np.zeros(k)
            for kk in window:
                counts[kk] += 1.0
            run = 1.0 + counts
            if cfg.cap_repeat_term:
                run = np.minimum(run, float(horizon))

            unary = cfg.overflow_weight * own \
                + cfg.repeat_green_weight * (self.phase_sizes[iid] * run)

            pairs: dict[str, np.ndarray] = {}
            red_extra = np.zeros(k)
            for key, up_rows, down_rows, up_memb, down_memb in self.pair_groups[iid]:
                a = y[up_rows, None] * up_memb                      # upstream outflow if green
                gap = self.threshold[down_rows] - q[down_rows]      # residual space
                red_count = ((a - gap[:, None]) > 0).sum(axis=0).astype(float)
                if key is None:
                    unary = unary + cfg.spillover_weight * red_count
                    continue
                red_extra = red_extra + red_count
                b = y[down_rows, None] * down_memb                  # downstream service if green
                table = ((a[:, :, None] - b[:, None, :]) > gap[:, None, None]) \
                    .sum(axis=0).astype(float)
                pairs[key] = cfg.spillover_weight * table

            neighbors = tuple(sorted(inter.neighbors))
            for nb in neighbors:
                pairs.setdefault(nb, np.zeros((k, len(net.intersections[nb].phases))))

            members = (iid,) + neighbors
            objectives[iid] = LocalObjective(
                center=iid,
                members=members,
                dims=tuple(len(net.intersections[m].phases) for m in members),
                gammas=tuple(gammas[m] for m in members),
                penalty_unary=unary,
                penalty_pairs=pairs,
                red_unary=unary + cfg.spillover_weight * red_extra,
                penalty_weight=cfg.penalty_weight,
            )
        return objectives


def local_objective(net: Network, state: QueueState, config: ControllerConfig,
                    demand: Mapping[str, float] | None, intersection_id: str
                    ) -> LocalObjective:
    """Neighborhood objective for one intersection (one-shot convenience)."""
    return ObjectiveBuilder(net, config).build(state, demand)[intersection_id]
