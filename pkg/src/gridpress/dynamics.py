"""Discrete-time store-and-forward queue dynamics.

Two execution modes share one timing model:

* fluid mode: real-valued queues, exact expected arrivals; the oracle-
  checkable update ``q' = q - y*s + (sum of upstream served flow + demand)
  * turning_ratio`` with ``y = min(q, capacity)``, evaluated simultaneously
  from the pre-step state.
* token mode: integral vehicles served FIFO, Poisson (or deterministic)
  arrivals, per-vehicle travel and waiting counters for the experiment
  metrics.

Links may impose a traversal delay: flow served into a link joins the
downstream queues (split by turning ratios) only after that many steps.
With zero delays the fluid update reduces to the plain one-step
store-and-forward recursion.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .network import MovementKey, Network


class ConfigurationError(Exception):
    pass


@dataclass(frozen=True)
class ControlAction:
    """One-hot phase selection per intersection for one signal period."""

    phases: Mapping[str, int]

    def green_set(self, net: Network) -> set[MovementKey]:
        greens: set[MovementKey] = set()
        for iid, k in self.phases.items():
            greens.update(net.green_movements(iid, k))
        return greens


@dataclass(frozen=True)
class QueueState:
    """Fluid-mode state: queues, in-transit flow, and phase history.

    ``transit[link][d]`` is the flow amount that joins the link's
    downstream queues after ``d`` more steps; ``history[i]`` holds the most
    recent phase activations, latest last, truncated to ``history_limit``.
    """

    t: int
    q: Mapping[MovementKey, float]
    history: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    transit: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    history_limit: int = 8


def make_initial_state(net: Network, queues: Mapping[MovementKey, float] | None = None,
                       history_limit: int = 8) -> QueueState:
    q = {mv: 0.0 for mv in net.movement_order}
    if queues:
        for mv, v in queues.items():
            q[mv] = float(v)
    transit = {
        lid: (0.0,) * net.links[lid].traversal_delay
        for lid in net.link_order if net.links[lid].traversal_delay > 0
    }
    history = {iid: () for iid in net.intersection_order}
    return QueueState(t=0, q=q, history=history, transit=transit,
                      history_limit=history_limit)


def _check_action(net: Network, action: ControlAction) -> None:
    for iid in net.intersection_order:
        k = action.phases.get(iid)
        if k is None or not 0 <= k < net.phase_count(iid):
            raise ValueError(f"action must pick one valid phase for {iid}, got {k!r}")


def _append_history(net: Network, state: QueueState, action: ControlAction) -> dict[str, tuple[int, ...]]:
    limit = state.history_limit
    out = {}
    for iid in net.intersection_order:
        prev = state.history.get(iid, ())
        out[iid] = (prev + (action.phases[iid],))[-limit:]
    return out


def service_outflows(net: Network, q: Mapping[MovementKey, float],
                     greens: set[MovementKey]) -> dict[MovementKey, float]:
    """Served flow per movement: min(queue, capacity) when green, else 0."""
    out = {}
    for mv in net.movement_order:
        if mv in greens:
            out[mv] = min(q[mv], net.movements[mv].capacity)
        else:
            out[mv] = 0.0
    return out


def step_fluid(net: Network, state: QueueState, action: ControlAction,
               demand: Mapping[str, float]) -> QueueState:
    """Advance the fluid queues one step under the given action.

    Arithmetic order contract (relied on by the exactness tests): per-link
    inflow accumulates upstream served flow in canonical movement order,
    then adds demand; each queue update is ``q - out + inflow * ratio``.
    """
    _check_action(net, action)
    for lid, d in demand.items():
        if d < 0:
            raise ValueError(f"negative demand {d!r} on {lid}")
        if d and net.links[lid].kind != "entry":
            raise ValueError(f"demand on non-entry link {lid}")

    greens = action.green_set(net)
    out = service_outflows(net, state.q, greens)

    inflow: dict[str, float] = {lid: 0.0 for lid in net.link_order}
    for mv in net.movement_order:
        inflow[mv[1]] += out[mv]
    for lid in net.link_order:
        inflow[lid] += demand.get(lid, 0.0)

    # Push this step's inflow through the traversal pipelines.
    arriving: dict[str, float] = {}
    transit: dict[str, tuple[float, ...]] = {}
    for lid in net.link_order:
        pipe = state.transit.get(lid, ())
        if pipe:
            arriving[lid] = pipe[0]
            transit[lid] = pipe[1:] + (inflow[lid],)
        else:
            arriving[lid] = inflow[lid]

    q = {}
    for mv in net.movement_order:
        ratio = net.movements[mv].turning_ratio
        value = state.q[mv] - out[mv] + arriving[mv[0]] * ratio
        assert value >= -1e-12, f"negative queue on {mv}: {value}"
        q[mv] = value

    return QueueState(t=state.t + 1, q=q, history=_append_history(net, state, action),
                      transit=transit, history_limit=state.history_limit)


# ---------------------------------------------------------------------------
# Predictions and flow accounting (controller inputs, analysis inputs)


@dataclass(frozen=True)
class PredictedQueues:
    """One-step queue predictions under a candidate action.

    ``own`` is the plain store-and-forward forecast per movement.
    ``downstream_bound`` maps an (upstream movement, downstream movement)
    pair sharing a middle link to the inflow upper bound that charges the
    whole upstream outflow to that single downstream queue.
    """

    own: dict[MovementKey, float]
    downstream_bound: dict[tuple[MovementKey, MovementKey], float]


def predict_queue(net: Network, state: QueueState, action: ControlAction,
                  demand: Mapping[str, float] | None = None) -> PredictedQueues:
    _check_action(net, action)
    demand = demand or {}
    greens = action.green_set(net)
    out = service_outflows(net, state.q, greens)

    own = {}
    for mv in net.movement_order:
        frm = mv[0]
        upstream = 0.0
        for up in net.upstream[frm]:
            upstream += out[up]
        upstream += demand.get(frm, 0.0)
        own[mv] = state.q[mv] - out[mv] + upstream * net.movements[mv].turning_ratio

    bound = {}
    for mv in net.movement_order:
        for down in net.downstream_movements[mv[1]]:
            bound[(mv, down)] = state.q[down] - out[down] + out[mv]
    return PredictedQueues(own=own, downstream_bound=bound)


def flows(net: Network, state: QueueState, action: ControlAction,
          demand: Mapping[str, float] | None = None
          ) -> tuple[dict[MovementKey, float], dict[MovementKey, float]]:
    """Per-movement total inflow and realized outflow for this step."""
    _check_action(net, action)
    demand = demand or {}
    greens = action.green_set(net)
    out = service_outflows(net, state.q, greens)
    inflow: dict[str, float] = {lid: 0.0 for lid in net.link_order}
    for mv in net.movement_order:
        inflow[mv[1]] += out[mv]
    for lid in net.link_order:
        inflow[lid] += demand.get(lid, 0.0)
    a = {mv: inflow[mv[0]] * net.movements[mv].turning_ratio for mv in net.movement_order}
    b = dict(out)
    return a, b


# ---------------------------------------------------------------------------
# Token (per-vehicle) mode


@dataclass
class Token:
    id: int
    entry_step: int
    waiting: int = 0
    exit_step: int | None = None


class TokenState:
    """Mutable per-vehicle simulation state (single-owner, single-thread)."""

    def __init__(self, net: Network, history_limit: int = 8):
        self.net = net
        self.t = 0
        self.queues: dict[MovementKey, deque[Token]] = {
            mv: deque() for mv in net.movement_order
        }
        self.transit: dict[str, deque[list[Token]]] = {
            lid: deque([] for _ in range(net.links[lid].traversal_delay))
            for lid in net.link_order
        }
        self.history: dict[str, tuple[int, ...]] = {i: () for i in net.intersection_order}
        self.history_limit = history_limit
        self.entered = 0
        self.exited = 0
        self._next_id = 0
        # Static turning tables: downstream movement keys and cumulative
        # ratios per link; a link whose split is all 0/1 needs no sampling.
        self._turn_table: dict[str, tuple[tuple[MovementKey, ...], np.ndarray, bool]] = {}
        for lid in net.link_order:
            downs = net.downstream_movements[lid]
            if not downs:
                continue
            ratios = [net.movements[mv].turning_ratio for mv in downs]
            cum = np.cumsum(ratios)
            deterministic = all(r in (0.0, 1.0) for r in ratios)
            self._turn_table[lid] = (downs, cum, deterministic)

    def queue_counts(self) -> dict[MovementKey, int]:
        return {mv: len(dq) for mv, dq in self.queues.items()}

    def occupancy(self) -> int:
        in_queues = sum(len(dq) for dq in self.queues.values())
        in_transit = sum(len(b) for pipe in self.transit.values() for b in pipe)
        return in_queues + in_transit

    def as_queue_state(self) -> QueueState:
        """Controller-facing snapshot (counts as floats)."""
        q = {mv: float(len(dq)) for mv, dq in self.queues.items()}
        transit = {
            lid: tuple(float(len(b)) for b in pipe)
            for lid, pipe in self.transit.items() if len(pipe)
        }
        return QueueState(t=self.t, q=q, history=dict(self.history),
                          transit=transit, history_limit=self.history_limit)

    def _new_token(self) -> Token:
        tok = Token(id=self._next_id, entry_step=self.t)
        self._next_id += 1
        self.entered += 1
        return tok


def step_tokens(net: Network, state: TokenState, action: ControlAction,
                demand: Mapping[str, float], rng: np.random.Generator | None,
                arrival_mode: str = "poisson") -> list[Token]:
    """Advance the token simulation one step; returns vehicles that exited.

    Green movements serve up to floor(capacity) tokens FIFO; served tokens
    traverse the downstream link and then join a queue sampled by turning
    ratios (or leave through an exit link).  Every queued token that is not
    served this step accrues one step of waiting.
    """
    _check_action(net, action)
    needs_rng = arrival_mode == "poisson" or any(
        not det for (_, _, det) in state._turn_table.values()
    )
    if rng is None and needs_rng:
        raise ConfigurationError(
            "an rng is required for poisson arrivals or fractional turning ratios")

    t = state.t
    insertions: dict[str, list[Token]] = {lid: [] for lid in net.link_order}

    # Arrivals are sampled up front (fixed rng order: sorted entry links).
    for lid in net.link_order:
        if net.links[lid].kind != "entry":
            continue
        rate = demand.get(lid, 0.0)
        if rate < 0:
            raise ValueError(f"negative demand {rate!r} on {lid}")
        if arrival_mode == "poisson":
            count = int(rng.poisson(rate))
        elif arrival_mode == "deterministic":
            count = int(round(rate))
        else:
            raise ConfigurationError(f"unknown arrival mode {arrival_mode!r}")
        insertions[lid].extend(state._new_token() for _ in range(count))

    # Service, then waiting accrual for the tokens left behind.
    greens = action.green_set(net)
    for mv in net.movement_order:
        dq = state.queues[mv]
        if mv in greens and dq:
            n = min(len(dq), int(net.movements[mv].capacity))
            for _ in range(n):
                insertions[mv[1]].append(dq.popleft())
        for tok in dq:
            tok.waiting += 1

    # Advance traversal pipelines; completed tokens join queues or exit.
    completed: list[Token] = []
    for lid in net.link_order:
        pipe = state.transit[lid]
        if len(pipe):
            arriving = pipe.popleft()
            pipe.append(insertions[lid])
        else:
            arriving = insertions[lid]
        if not arriving:
            continue
        table = state._turn_table.get(lid)
        if table is None:  # exit link
            for tok in arriving:
                tok.exit_step = t
                state.exited += 1
                completed.append(tok)
            continue
        downs, cum, deterministic = table
        for tok in arriving:
            if deterministic:
                idx = int(np.argmax(cum >= 1.0))
            else:
                idx = int(np.searchsorted(cum, rng.random(), side="right"))
                idx = min(idx, len(downs) - 1)
            state.queues[downs[idx]].append(tok)

    for iid in net.intersection_order:
        state.history[iid] = (state.history[iid] + (action.phases[iid],))[-state.history_limit:]
    state.t = t + 1

    assert state.entered == state.occupancy() + state.exited, "vehicle conservation broken"
    return completed


# ---------------------------------------------------------------------------
# Demand profiles


@dataclass(frozen=True)
class DemandSegment:
    until: int   # applies to steps t < until
    rate: float  # vehicles per step


@dataclass(frozen=True)
class DemandProfile:
    """Piecewise-constant arrival rates per entry link (0 beyond the end)."""

    segments: Mapping[str, tuple[DemandSegment, ...]]
    seed: int = 0

    def __post_init__(self):
        for lid, segs in self.segments.items():
            last = 0
            for seg in segs:
                if seg.rate < 0:
                    raise ConfigurationError(f"negative rate {seg.rate} on {lid}")
                if seg.until <= last:
                    raise ConfigurationError(f"segments on {lid} must have increasing 'until'")
                last = seg.until

    def rate(self, link_id: str, t: int) -> float:
        for seg in self.segments.get(link_id, ()):
            if t < seg.until:
                return seg.rate
        return 0.0

    def rates(self, t: int) -> dict[str, float]:
        return {lid: self.rate(lid, t) for lid in self.segments}

    @staticmethod
    def uniform(net: Network, segments: Sequence[DemandSegment | tuple[int, float]],
                seed: int = 0) -> "DemandProfile":
        """Same piecewise rate on every entry link of the network."""
        segs = tuple(s if isinstance(s, DemandSegment) else DemandSegment(*s) for s in segments)
        entries = [lid for lid in net.link_order if net.links[lid].kind == "entry"]
        return DemandProfile(segments={lid: segs for lid in entries}, seed=seed)

    def validate_against(self, net: Network) -> list[str]:
        out = []
        for lid in self.segments:
            link = net.links.get(lid)
            if link is None:
                out.append(f"demand references unknown link {lid!r}")
            elif link.kind != "entry":
                out.append(f"demand on non-entry link {lid!r}")
        return out
