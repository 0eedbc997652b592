"""Road-network topology for signalized-grid simulation.

A network is a directed graph of road links joined at intersections.
Traffic crosses an intersection through *movements* (from-link, to-link
pairs), each with its own queue, saturation capacity, turning ratio and
overflow threshold.  Movements are grouped into *phases*, the unit of
signal control: exactly one phase per intersection is green at each step.

Besides the raw topology this module derives the bookkeeping shared by
the controllers and diagnostics:

* neighborhoods (directly connected intersections) and their symmetric
  closure,
* per-movement queue multiplicities (1 + neighbor count of the owning
  intersection) used by the weighted Lyapunov diagnostics,
* index maps between the global control vector and the per-neighborhood
  slices consumed by the consensus solvers.

Networks are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

MovementKey = tuple[str, str]

LINK_KINDS = ("entry", "internal", "exit")
RATIO_TOL = 1e-9

SIDES = ("N", "E", "S", "W")
TURNS = ("left", "through", "right")

_OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}
_LEFT_EXIT = {"N": "E", "E": "S", "S": "W", "W": "N"}
_RIGHT_EXIT = {"N": "W", "W": "S", "S": "E", "E": "N"}
_SIDE_STEP = {"N": (-1, 0), "S": (1, 0), "E": (0, 1), "W": (0, -1)}

# Dual-ring style 8-phase plan for a 4-way intersection: paired opposing
# throughs, paired opposing lefts, then through+left per single approach.
# Right turns are green in every phase and are appended separately.
_PHASE_TEMPLATES = (
    (("N", "through"), ("S", "through")),
    (("N", "left"), ("S", "left")),
    (("E", "through"), ("W", "through")),
    (("E", "left"), ("W", "left")),
    (("N", "through"), ("N", "left")),
    (("S", "through"), ("S", "left")),
    (("E", "through"), ("E", "left")),
    (("W", "through"), ("W", "left")),
)


@dataclass(frozen=True)
class Link:
    id: str
    kind: str  # entry | internal | exit
    traversal_delay: int = 0  # whole simulation steps spent on the link


@dataclass(frozen=True)
class Movement:
    from_link: str
    to_link: str
    capacity: float        # max vehicles served per green step
    turning_ratio: float   # share of the from-link flow routed here
    queue_threshold: float  # overflow threshold used by penalty terms

    @property
    def key(self) -> MovementKey:
        return (self.from_link, self.to_link)


@dataclass(frozen=True)
class Phase:
    index: int
    movements: frozenset[MovementKey]


@dataclass(frozen=True)
class Intersection:
    id: str
    phases: tuple[Phase, ...]
    movements: frozenset[MovementKey]
    neighbors: frozenset[str]
    # Known conflicting movement pairs; empty means "no conflict data",
    # in which case phase conflict validation is skipped.
    conflicts: frozenset[frozenset[MovementKey]] = frozenset()


@dataclass(frozen=True)
class Violation:
    entity: str
    rule: str
    detail: str

    def __str__(self) -> str:
        return f"{self.entity}: {self.rule}: {self.detail}"


class ValidationError(Exception):
    """Raised when a network or scenario fails structural validation."""

    def __init__(self, violations: Sequence[Violation] | Sequence[str], context: str = ""):
        self.violations = list(violations)
        lines = "\n  ".join(str(v) for v in self.violations)
        prefix = f"{context}: " if context else ""
        super().__init__(f"{prefix}{len(self.violations)} violation(s)\n  {lines}")


@dataclass(frozen=True)
class NeighborhoodMap:
    """Index map between the global control vector and one neighborhood.

    Plays the role of an incidence matrix without materializing it: the
    neighborhood vector stacks one phase block per member, center first,
    then neighbors in canonical order.
    """

    center: str
    members: tuple[str, ...]
    dims: tuple[int, ...]
    offsets: tuple[int, ...]            # block start inside the neighborhood vector
    global_spans: tuple[tuple[int, int], ...]  # block (start, stop) in the global vector
    dim: int

    def block(self, member: str) -> slice:
        i = self.members.index(member)
        return slice(self.offsets[i], self.offsets[i] + self.dims[i])

    def gather(self, z: np.ndarray) -> np.ndarray:
        """Project the global control vector onto this neighborhood."""
        out = np.empty(self.dim, dtype=float)
        for off, k, (s0, s1) in zip(self.offsets, self.dims, self.global_spans):
            out[off:off + k] = z[s0:s1]
        return out

    def scatter(self, x: np.ndarray, out: np.ndarray) -> np.ndarray:
        """Write the neighborhood slice back into a global-sized vector."""
        for off, k, (s0, s1) in zip(self.offsets, self.dims, self.global_spans):
            out[s0:s1] = x[off:off + k]
        return out


class Network:
    """Immutable road network with derived control/analysis structure."""

    def __init__(self, links: Iterable[Link], movements: Iterable[Movement],
                 intersections: Iterable[Intersection]):
        self.links: dict[str, Link] = {l.id: l for l in links}
        self.movements: dict[MovementKey, Movement] = {m.key: m for m in movements}
        self.intersections: dict[str, Intersection] = {i.id: i for i in intersections}

        self.link_order: tuple[str, ...] = tuple(sorted(self.links))
        self.movement_order: tuple[MovementKey, ...] = tuple(sorted(self.movements))
        self.intersection_order: tuple[str, ...] = tuple(sorted(self.intersections))

        # Movement ownership (first owner wins; validate() flags duplicates).
        self.owner: dict[MovementKey, str] = {}
        for iid in self.intersection_order:
            for mv in self.intersections[iid].movements:
                self.owner.setdefault(mv, iid)

        # Upstream movements per link (movements flowing into the link) and
        # downstream movements/links per link (movements leaving it).
        ups: dict[str, list[MovementKey]] = {l: [] for l in self.links}
        downs: dict[str, list[MovementKey]] = {l: [] for l in self.links}
        for mv in self.movement_order:
            frm, to = mv
            if to in downs:
                ups[to].append(mv)
            if frm in ups:
                downs[frm].append(mv)
        self.upstream: dict[str, tuple[MovementKey, ...]] = {l: tuple(v) for l, v in ups.items()}
        self.downstream_movements: dict[str, tuple[MovementKey, ...]] = {
            l: tuple(v) for l, v in downs.items()
        }
        self.downstream_links: dict[str, tuple[str, ...]] = {
            l: tuple(m for (_, m) in v) for l, v in downs.items()
        }

        # Phase membership per movement (phase indices of the owning
        # intersection whose movement set contains it).
        self.movement_phases: dict[MovementKey, tuple[int, ...]] = {}
        for iid in self.intersection_order:
            inter = self.intersections[iid]
            for mv in inter.movements:
                self.movement_phases[mv] = tuple(
                    p.index for p in inter.phases if mv in p.movements
                )

        # Queue multiplicity: how many neighborhood sums count this queue.
        self.multiplicity: dict[MovementKey, int] = {}
        for mv in self.movement_order:
            iid = self.owner.get(mv)
            n = len(self.intersections[iid].neighbors) if iid else 0
            self.multiplicity[mv] = 1 + n

        self.max_movements_per_intersection: int = max(
            (len(i.movements) for i in self.intersections.values()), default=0
        )
        self.max_downstream_links: int = max(
            (len(v) for v in self.downstream_links.values()), default=0
        )

        # Global control-vector layout: one block per intersection in
        # canonical order.
        self.block_offset: dict[str, int] = {}
        off = 0
        for iid in self.intersection_order:
            self.block_offset[iid] = off
            off += len(self.intersections[iid].phases)
        self.control_dim: int = off

        self._neighborhoods: dict[str, NeighborhoodMap] = {}

    # -- phase helpers ---------------------------------------------------

    def phase_count(self, intersection_id: str) -> int:
        return len(self.intersections[intersection_id].phases)

    def green_movements(self, intersection_id: str, phase_index: int) -> frozenset[MovementKey]:
        return self.intersections[intersection_id].phases[phase_index].movements

    # -- neighborhood index maps ----------------------------------------

    def neighborhood(self, intersection_id: str) -> NeighborhoodMap:
        if intersection_id not in self.intersections:
            raise KeyError(f"unknown intersection {intersection_id!r}")
        cached = self._neighborhoods.get(intersection_id)
        if cached is not None:
            return cached
        inter = self.intersections[intersection_id]
        members = (intersection_id,) + tuple(sorted(inter.neighbors))
        dims = tuple(self.phase_count(m) for m in members)
        offsets = tuple(int(x) for x in np.concatenate([[0], np.cumsum(dims)[:-1]]))
        spans = tuple(
            (self.block_offset[m], self.block_offset[m] + self.phase_count(m))
            for m in members
        )
        nm = NeighborhoodMap(
            center=intersection_id, members=members, dims=dims,
            offsets=offsets, global_spans=spans, dim=int(sum(dims)),
        )
        self._neighborhoods[intersection_id] = nm
        return nm


def neighborhood_controls_dimension(network: Network, intersection_id: str) -> int:
    """Total number of phase slots controlled by one neighborhood."""
    return network.neighborhood(intersection_id).dim


# ---------------------------------------------------------------------------
# Validation


def validate(network: Network) -> list[Violation]:
    """Check all structural invariants; violations are data, not failures."""
    out: list[Violation] = []

    for lid in network.link_order:
        link = network.links[lid]
        if link.kind not in LINK_KINDS:
            out.append(Violation(lid, "link-kind", f"unknown kind {link.kind!r}"))
        if not isinstance(link.traversal_delay, int) or link.traversal_delay < 0:
            out.append(Violation(lid, "traversal-delay",
                                 f"must be a whole number of steps >= 0, got {link.traversal_delay!r}"))

    for mv in network.movement_order:
        m = network.movements[mv]
        name = f"{mv[0]}->{mv[1]}"
        if m.from_link not in network.links:
            out.append(Violation(name, "movement-links", f"unknown from_link {m.from_link!r}"))
        if m.to_link not in network.links:
            out.append(Violation(name, "movement-links", f"unknown to_link {m.to_link!r}"))
        if not m.capacity > 0:
            out.append(Violation(name, "capacity-positive", f"capacity {m.capacity!r} must be > 0"))
        if not m.queue_threshold > 0:
            out.append(Violation(name, "threshold-positive",
                                 f"queue_threshold {m.queue_threshold!r} must be > 0"))
        if not 0.0 <= m.turning_ratio <= 1.0:
            out.append(Violation(name, "ratio-range", f"turning_ratio {m.turning_ratio!r} not in [0, 1]"))

    for lid in network.link_order:
        downs = network.downstream_movements.get(lid, ())
        if downs:
            total = sum(network.movements[mv].turning_ratio for mv in downs)
            if abs(total - 1.0) > RATIO_TOL:
                out.append(Violation(lid, "turning-ratios-sum",
                                     f"downstream ratios sum to {total!r}, expected 1"))
        link = network.links.get(lid)
        if link is None:
            continue
        if link.kind == "entry" and network.upstream.get(lid):
            out.append(Violation(lid, "entry-no-upstream",
                                 f"entry link has upstream movements {sorted(network.upstream[lid])}"))
        if link.kind == "exit" and downs:
            out.append(Violation(lid, "exit-no-downstream",
                                 f"exit link has downstream movements {sorted(downs)}"))

    # Ownership: every movement in exactly one intersection.
    seen: dict[MovementKey, str] = {}
    for iid in network.intersection_order:
        inter = network.intersections[iid]
        for mv in sorted(inter.movements):
            if mv not in network.movements:
                out.append(Violation(iid, "unknown-movement", f"references missing movement {mv}"))
            elif mv in seen:
                out.append(Violation(f"{mv[0]}->{mv[1]}", "single-owner",
                                     f"claimed by both {seen[mv]} and {iid}"))
            else:
                seen[mv] = iid
    for mv in network.movement_order:
        if mv not in seen:
            out.append(Violation(f"{mv[0]}->{mv[1]}", "single-owner", "not owned by any intersection"))

    # Endpoint consistency: all movements out of a link share one owner, and
    # all movements into a link feed a single intersection.
    for lid in network.link_order:
        owners = {seen.get(mv) for mv in network.downstream_movements.get(lid, ()) if seen.get(mv)}
        if len(owners) > 1:
            out.append(Violation(lid, "link-endpoint", f"leaves toward several intersections {sorted(owners)}"))
        sources = {seen.get(mv) for mv in network.upstream.get(lid, ()) if seen.get(mv)}
        if len(sources) > 1:
            out.append(Violation(lid, "link-endpoint", f"fed from several intersections {sorted(sources)}"))

    for iid in network.intersection_order:
        inter = network.intersections[iid]
        if len(inter.phases) < 1:
            out.append(Violation(iid, "phase-count", "intersection has no phases"))
        for pos, phase in enumerate(inter.phases):
            if phase.index != pos:
                out.append(Violation(iid, "phase-index",
                                     f"phase at position {pos} carries index {phase.index}"))
            extra = phase.movements - inter.movements
            if extra:
                out.append(Violation(iid, "phase-movements",
                                     f"phase {pos} uses foreign movements {sorted(extra)}"))
            if inter.conflicts:
                for a, b in itertools.combinations(sorted(phase.movements), 2):
                    if frozenset((a, b)) in inter.conflicts:
                        out.append(Violation(iid, "phase-conflict",
                                             f"phase {pos} combines conflicting movements {a} and {b}"))
        for nb in sorted(inter.neighbors):
            if nb not in network.intersections:
                out.append(Violation(iid, "neighbor-exists", f"unknown neighbor {nb!r}"))
            elif iid not in network.intersections[nb].neighbors:
                out.append(Violation(iid, "neighbor-symmetry",
                                     f"{iid} lists {nb} but {nb} does not list {iid}"))
        if iid in inter.neighbors:
            out.append(Violation(iid, "neighbor-self", "intersection neighbors itself"))

    return out


# ---------------------------------------------------------------------------
# Grid builder


@dataclass(frozen=True, eq=True)
class GridConfig:
    """Parameters for the synthetic rows x cols signal grid."""

    capacities: Mapping[str, float] = field(
        default_factory=lambda: {"left": 2.0, "through": 4.0, "right": 2.0})
    turn_ratios: Mapping[str, float] = field(
        default_factory=lambda: {"left": 0.25, "through": 0.5, "right": 0.25})
    queue_threshold: float = 12.0
    traversal_delay: int = 1
    # Boundary sides without entry/exit links; approaches and phases that
    # would use them are pruned.
    closed_sides: frozenset[str] = frozenset()


def _check_grid_config(config: GridConfig) -> list[Violation]:
    out = []
    for turn in TURNS:
        cap = config.capacities.get(turn)
        if cap is None or not cap > 0:
            out.append(Violation("config", "capacity-positive",
                                 f"capacity for {turn!r} must be > 0, got {cap!r}"))
        ratio = config.turn_ratios.get(turn)
        if ratio is None or ratio < 0:
            out.append(Violation("config", "ratio-range",
                                 f"turn ratio for {turn!r} must be >= 0, got {ratio!r}"))
    total = sum(config.turn_ratios.get(t, 0.0) for t in TURNS)
    if total <= 0:
        out.append(Violation("config", "turning-ratios-sum",
                             f"turn ratios must have positive sum, got {total!r}"))
    if not config.queue_threshold > 0:
        out.append(Violation("config", "threshold-positive",
                             f"queue_threshold must be > 0, got {config.queue_threshold!r}"))
    if not isinstance(config.traversal_delay, int) or config.traversal_delay < 0:
        out.append(Violation("config", "traversal-delay",
                             f"must be a whole number of steps >= 0, got {config.traversal_delay!r}"))
    bad_sides = set(config.closed_sides) - set(SIDES)
    if bad_sides:
        out.append(Violation("config", "closed-sides", f"unknown sides {sorted(bad_sides)}"))
    return out


def _grid_id(r: int, c: int) -> str:
    return f"i{r:02d}{c:02d}"


def build_grid(rows: int, cols: int, config: GridConfig | None = None) -> Network:
    """Build a validated rows x cols four-way grid.

    Every pair of adjacent intersections is connected by one internal link
    per direction.  Open boundary sides get an entry link (inbound) and an
    exit link (outbound) so that, by default, every intersection keeps the
    full 12-movement / 8-phase layout.  Closing a side removes the affected
    movements and prunes the phases whose through/left members no longer
    exist; right turns stay green in every remaining phase.
    """
    if rows < 1 or cols < 1:
        raise ValidationError([Violation("grid", "size", f"rows={rows}, cols={cols} must be >= 1")])
    config = config or GridConfig()
    problems = _check_grid_config(config)
    if problems:
        raise ValidationError(problems, context=f"grid {rows}x{cols}")

    delay = config.traversal_delay
    links: dict[str, Link] = {}
    movements: list[Movement] = []
    intersections: list[Intersection] = []

    def inside(r: int, c: int) -> bool:
        return 0 <= r < rows and 0 <= c < cols

    # incoming[iid][side] / outgoing[iid][side]: link id at that compass side.
    incoming: dict[str, dict[str, str]] = {}
    outgoing: dict[str, dict[str, str]] = {}

    for r in range(rows):
        for c in range(cols):
            iid = _grid_id(r, c)
            incoming[iid] = {}
            outgoing[iid] = {}
            for side in SIDES:
                dr, dc = _SIDE_STEP[side]
                nr, nc = r + dr, c + dc
                if inside(nr, nc):
                    nid = _grid_id(nr, nc)
                    lin = f"ln_{nid}_{iid}"
                    lout = f"ln_{iid}_{nid}"
                    links.setdefault(lin, Link(lin, "internal", delay))
                    links.setdefault(lout, Link(lout, "internal", delay))
                    incoming[iid][side] = lin
                    outgoing[iid][side] = lout
                elif side not in config.closed_sides:
                    lin = f"ent_{iid}_{side}"
                    lout = f"ext_{iid}_{side}"
                    links[lin] = Link(lin, "entry", delay)
                    links[lout] = Link(lout, "exit", delay)
                    incoming[iid][side] = lin
                    outgoing[iid][side] = lout

    for r in range(rows):
        for c in range(cols):
            iid = _grid_id(r, c)
            moves: dict[MovementKey, Movement] = {}
            geometry: dict[MovementKey, tuple[str, str]] = {}  # key -> (approach, turn)
            for side in SIDES:
                lin = incoming[iid].get(side)
                if lin is None:
                    continue
                exits = {
                    "through": _OPPOSITE[side],
                    "left": _LEFT_EXIT[side],
                    "right": _RIGHT_EXIT[side],
                }
                present = [t for t in TURNS if outgoing[iid].get(exits[t]) is not None
                           and config.turn_ratios.get(t, 0.0) >= 0]
                ratio_sum = sum(config.turn_ratios[t] for t in present)
                if not present or ratio_sum <= 0:
                    continue
                for turn in present:
                    lout = outgoing[iid][exits[turn]]
                    key = (lin, lout)
                    moves[key] = Movement(
                        from_link=lin, to_link=lout,
                        capacity=float(config.capacities[turn]),
                        turning_ratio=config.turn_ratios[turn] / ratio_sum,
                        queue_threshold=float(config.queue_threshold),
                    )
                    geometry[key] = (side, turn)

            rights = sorted(k for k, (_, t) in geometry.items() if t == "right")
            phases: list[Phase] = []
            for template in _PHASE_TEMPLATES:
                primaries = []
                ok = True
                for side, turn in template:
                    lin = incoming[iid].get(side)
                    if lin is None:
                        ok = False
                        break
                    exits = {"through": _OPPOSITE[side], "left": _LEFT_EXIT[side]}
                    lout = outgoing[iid].get(exits[turn])
                    if lout is None or (lin, lout) not in moves:
                        ok = False
                        break
                    primaries.append((lin, lout))
                if ok:
                    phases.append(Phase(len(phases), frozenset(primaries) | frozenset(rights)))
            if not phases:
                raise ValidationError(
                    [Violation(iid, "phase-count",
                               "closed sides leave no usable phases at this intersection")],
                    context=f"grid {rows}x{cols}")

            conflicts = set()
            for a, b in itertools.combinations(sorted(moves), 2):
                (sa, ta), (sb, tb) = geometry[a], geometry[b]
                if ta == "right" or tb == "right":
                    continue
                compatible = sa == sb or (_OPPOSITE[sa] == sb and ta == tb)
                if not compatible:
                    conflicts.add(frozenset((a, b)))

            neighbors = set()
            for side in SIDES:
                dr, dc = _SIDE_STEP[side]
                if inside(r + dr, c + dc):
                    neighbors.add(_grid_id(r + dr, c + dc))

            movements.extend(moves.values())
            intersections.append(Intersection(
                id=iid, phases=tuple(phases), movements=frozenset(moves),
                neighbors=frozenset(neighbors), conflicts=frozenset(conflicts),
            ))

    net = Network(links.values(), movements, intersections)
    problems = validate(net)
    if problems:  # defensive: builder bug, not user error
        raise ValidationError(problems, context=f"grid {rows}x{cols}")
    return net


# ---------------------------------------------------------------------------
# Serialization (shared by generated and hand-written networks)


def network_to_dict(network: Network) -> dict:
    return {
        "links": [
            {"id": l.id, "kind": l.kind, "traversal_delay": l.traversal_delay}
            for l in (network.links[lid] for lid in network.link_order)
        ],
        "movements": [
            {
                "from": m.from_link, "to": m.to_link, "capacity": m.capacity,
                "turning_ratio": m.turning_ratio, "queue_threshold": m.queue_threshold,
            }
            for m in (network.movements[mv] for mv in network.movement_order)
        ],
        "intersections": [
            {
                "id": i.id,
                "movements": [list(mv) for mv in sorted(i.movements)],
                "phases": [[list(mv) for mv in sorted(p.movements)] for p in i.phases],
                "neighbors": sorted(i.neighbors),
                "conflicts": [sorted([list(a), list(b)]) for a, b in
                              (tuple(sorted(pair)) for pair in sorted(i.conflicts, key=sorted))],
            }
            for i in (network.intersections[iid] for iid in network.intersection_order)
        ],
    }


def network_from_dict(data: Mapping) -> Network:
    links = [Link(d["id"], d["kind"], int(d.get("traversal_delay", 0))) for d in data["links"]]
    movements = [
        Movement(d["from"], d["to"], float(d["capacity"]), float(d["turning_ratio"]),
                 float(d["queue_threshold"]))
        for d in data["movements"]
    ]
    intersections = []
    for d in data["intersections"]:
        phases = tuple(
            Phase(idx, frozenset(tuple(mv) for mv in p)) for idx, p in enumerate(d["phases"])
        )
        conflicts = frozenset(
            frozenset(tuple(mv) for mv in pair) for pair in d.get("conflicts", [])
        )
        intersections.append(Intersection(
            id=d["id"], phases=phases,
            movements=frozenset(tuple(mv) for mv in d["movements"]),
            neighbors=frozenset(d.get("neighbors", [])),
            conflicts=conflicts,
        ))
    net = Network(links, movements, intersections)
    problems = validate(net)
    if problems:
        raise ValidationError(problems, context="network file")
    return net


def save_network(network: Network, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(network_to_dict(network), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_network(path) -> Network:
    with open(path, encoding="utf-8") as fh:
        return network_from_dict(json.load(fh))
