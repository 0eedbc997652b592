"""Consensus solvers for the per-step coordinated control problem.

Each intersection scores full neighborhood assignments with its local
objective; neighborhoods overlap, so the per-step problem is to pick one
global assignment maximizing the sum of local objectives subject to every
intersection's copy agreeing with the global choice.  Three solvers:

* solve_admm: alternating updates of local copies, global blocks and dual
  variables.  The local update enumerates every member phase combination
  (the combination tensor is built once per step and reused across
  iterations); the global update picks, per intersection, the phase with
  the largest summed dual-plus-scaled-local coefficient, so the returned
  assignment is always feasible.
* solve_greedy: iterative determination rounds.  Undetermined
  intersections propose their best neighborhood assignment given already
  determined neighbors; fully agreeing neighborhoods lock in, and among
  the rest the local objective minimizers adopt the majority vote of
  their neighbors' proposals for their own phase.  At least one
  intersection is determined per round, so the loop ends in at most N
  rounds.
* solve_exhaustive: brute-force oracle over all global assignments, for
  small problems and testing.

All solvers are deterministic: iteration follows the canonical
intersection order and every tie resolves to the lowest phase index
(lowest lexicographic assignment for full enumerations).
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .controllers import LocalObjective
from .network import Network


class ExhaustiveLimitError(Exception):
    def __init__(self, size: int, limit: int):
        self.size = size
        self.limit = limit
        super().__init__(f"search space of {size} assignments exceeds the limit {limit}")


@dataclass
class SolveInfo:
    algorithm: str
    iterations: int = 0
    converged: bool = True
    objective: float = 0.0
    objective_trace: list[float] = field(default_factory=list)
    residual_trace: list[float] = field(default_factory=list)
    votes: int = 0
    evaluated: int = 0
    determined_trace: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class ConsensusProblem:
    """One per-step instance: the network plus one objective per center."""

    net: Network
    objectives: dict[str, LocalObjective]

    def objective(self, assignment: Mapping[str, int]) -> float:
        total = 0.0
        for iid in self.net.intersection_order:
            total += self.objectives[iid].value(assignment)
        return total

    def size(self) -> int:
        n = 1
        for iid in self.net.intersection_order:
            n *= self.net.phase_count(iid)
        return n


@dataclass
class AdmmState:
    """Per-iteration solver state (exposed for tests and diagnostics)."""

    x: dict[str, dict[str, int]]        # local copies: center -> member phases
    duals: dict[str, np.ndarray]        # center -> dual vector over its members
    z: dict[str, int]                   # global blocks, always one-hot
    rho: float
    iteration: int = 0


@dataclass
class GreedyState:
    determined: dict[str, int] = field(default_factory=dict)
    proposals: dict[str, dict[str, int]] = field(default_factory=dict)
    values: dict[str, float] = field(default_factory=dict)
    iteration: int = 0


def _one_hot(k: int, dim: int) -> np.ndarray:
    v = np.zeros(dim)
    v[k] = 1.0
    return v


# ---------------------------------------------------------------------------
# Exhaustive oracle


def solve_exhaustive(problem: ConsensusProblem, limit: int = 1_000_000
                     ) -> tuple[dict[str, int], SolveInfo]:
    """Enumerate every global assignment; first (lowest-lex) maximizer wins."""
    size = problem.size()
    if size > limit:
        raise ExhaustiveLimitError(size, limit)
    order = problem.net.intersection_order
    ranges = [range(problem.net.phase_count(i)) for i in order]
    best: dict[str, int] | None = None
    best_val = -np.inf
    count = 0
    for combo in itertools.product(*ranges):
        assignment = dict(zip(order, combo))
        val = problem.objective(assignment)
        count += 1
        if best is None or val > best_val:
            best, best_val = assignment, val
    assert best is not None
    return best, SolveInfo(algorithm="exhaustive", iterations=1, objective=best_val,
                           evaluated=count)


# ---------------------------------------------------------------------------
# ADMM


def admm_x_update(objective: LocalObjective, dual: np.ndarray, z: Mapping[str, int],
                  rho: float, tensor: np.ndarray | None = None) -> dict[str, int]:
    """Best local copy: objective minus dual alignment minus proximity cost.

    Enumerates every member combination via the dense objective tensor; a
    candidate block matching the global choice saves the proximity charge
    rho per block.  Ties resolve to the lowest-lex combination.
    """
    if tensor is None:
        tensor = objective.value_tensor()
    scored = tensor.copy()
    n = len(objective.dims)
    off = 0
    for pos, (member, k) in enumerate(zip(objective.members, objective.dims)):
        addend = -dual[off:off + k] - rho * (1.0 - _one_hot(z[member], k))
        shape = [1] * n
        shape[pos] = k
        scored += addend.reshape(shape)
        off += k
    combo = np.unravel_index(int(np.argmax(scored)), objective.dims)
    return {m: int(c) for m, c in zip(objective.members, combo)}


def admm_z_update(coefficients: Sequence[np.ndarray]) -> int:
    """Pick the phase with the largest summed coefficient vector."""
    total = np.zeros_like(coefficients[0])
    for c in coefficients:
        total = total + c
    return int(np.argmax(total))


def solve_admm(problem: ConsensusProblem, rho: float = 1.0, max_iters: int = 10,
               tolerance: float = 0.0) -> tuple[dict[str, int], SolveInfo]:
    """Consensus by alternating local/global/dual updates.

    Terminates early once every local copy agrees with the global blocks
    (squared disagreement <= tolerance); otherwise returns the final
    global blocks, which are feasible by construction, flagged as
    non-converged.  Warm start: duals at zero, global blocks at each
    intersection's independent best phase with all neighbors held red.
    """
    if rho <= 0:
        raise ValueError("rho must be > 0")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    net = problem.net
    order = net.intersection_order

    state = AdmmState(
        x={},
        duals={i: np.zeros(sum(problem.objectives[i].dims)) for i in order},
        z={
            i: int(np.argmax(problem.objectives[i].gammas[0]
                             - problem.objectives[i].penalty_weight
                             * problem.objectives[i].red_unary))
            for i in order
        },
        rho=rho,
    )
    tensors = {i: problem.objectives[i].value_tensor() for i in order}

    info = SolveInfo(algorithm="admm", converged=False)
    info.objective_trace.append(problem.objective(state.z))

    for it in range(1, max_iters + 1):
        state.iteration = it
        for i in order:
            state.x[i] = admm_x_update(problem.objectives[i], state.duals[i],
                                       state.z, rho, tensor=tensors[i])

        new_z: dict[str, int] = {}
        for i in order:
            k = net.phase_count(i)
            coeffs = []
            f_i = problem.objectives[i]
            for j in f_i.members:  # j ranges over i and its neighbors
                f_j = problem.objectives[j]
                blk = f_j.members.index(i)
                off = sum(f_j.dims[:blk])
                dual_block = state.duals[j][off:off + k]
                coeffs.append(dual_block + rho * _one_hot(state.x[j][i], k))
            new_z[i] = admm_z_update(coeffs)
        state.z = new_z

        residual = 0.0
        for i in order:
            f_i = problem.objectives[i]
            off = 0
            for member, k in zip(f_i.members, f_i.dims):
                diff = _one_hot(state.x[i][member], k) - _one_hot(state.z[member], k)
                state.duals[i][off:off + k] += rho * diff
                residual += float(diff @ diff)
                off += k

        info.iterations = it
        info.residual_trace.append(residual)
        info.objective_trace.append(problem.objective(state.z))
        if residual <= tolerance:
            info.converged = True
            break

    info.objective = problem.objective(state.z)
    return dict(state.z), info


# ---------------------------------------------------------------------------
# Greedy with majority vote


def solve_greedy(problem: ConsensusProblem) -> tuple[dict[str, int], SolveInfo]:
    """Determination rounds with consensus locking and majority votes.

    Within a round, proposals and checks all read the state from the start
    of the round (the parallel-execution contract); consensus additions
    take precedence over vote additions.  Objective-minimizer comparisons
    break ties by intersection order, which guarantees at least one
    determination per round.
    """
    net = problem.net
    order = net.intersection_order
    rank = {iid: pos for pos, iid in enumerate(order)}
    gs = GreedyState()
    info = SolveInfo(algorithm="greedy")

    while len(gs.determined) < len(order):
        gs.iteration += 1
        undetermined = [i for i in order if i not in gs.determined]

        for i in undetermined:
            f = problem.objectives[i]
            fixed = {j: gs.determined[j] for j in f.members if j in gs.determined}
            choice, val = f.argmax(fixed)
            gs.proposals[i] = choice
            gs.values[i] = val

        # Consensus locking: a neighborhood whose members all agree on the
        # center's and each other's phases fixes the center and neighbors.
        consensus_fix: dict[str, int] = {}
        for i in undetermined:
            mine = gs.proposals[i]
            neighbors = problem.objectives[i].members[1:]
            agreed = all(
                mine[i] == gs.proposals[j].get(i) and mine[j] == gs.proposals[j][j]
                for j in neighbors
            )
            if agreed:
                for j in (i, *neighbors):
                    if j not in gs.determined:
                        consensus_fix[j] = gs.proposals[j][j]

        # Majority vote: an undetermined intersection whose objective is
        # the (tie-ranked) minimum among its undetermined neighbors adopts
        # its neighbors' majority proposal for its own phase.
        vote_fix: dict[str, int] = {}
        for i in undetermined:
            if i in consensus_fix:
                continue
            neighbors = problem.objectives[i].members[1:]
            open_neighbors = [j for j in neighbors if j not in gs.determined]
            is_minimum = all(
                (gs.values[i], rank[i]) < (gs.values[j], rank[j])
                for j in open_neighbors
            )
            if not is_minimum:
                continue
            if neighbors:
                ballots = Counter(gs.proposals[j][i] for j in neighbors)
                top = max(ballots.values())
                vote_fix[i] = min(k for k, n in ballots.items() if n == top)
                info.votes += 1
            else:
                vote_fix[i] = gs.proposals[i][i]

        for j, k in consensus_fix.items():
            gs.determined[j] = k
            gs.proposals[j] = {**gs.proposals[j], j: k}
        for j, k in vote_fix.items():
            if j not in gs.determined:
                gs.determined[j] = k
                gs.proposals[j] = {**gs.proposals[j], j: k}
        added = len(consensus_fix) + sum(1 for j in vote_fix if j not in consensus_fix)
        info.determined_trace.append((len(consensus_fix), len(vote_fix)))
        assert added >= 1, "greedy round made no progress"
        info.objective_trace.append(problem.objective({
            i: gs.determined.get(i, gs.proposals[i][i]) for i in order
        }))

    info.iterations = gs.iteration
    assignment = {i: gs.determined[i] for i in order}
    info.objective = problem.objective(assignment)
    return assignment, info


# ---------------------------------------------------------------------------
# Dispatch


def solve(problem: ConsensusProblem, algorithm: str, rho: float = 1.0,
          max_iters: int = 10, tolerance: float = 0.0,
          exhaustive_limit: int = 1_000_000) -> tuple[dict[str, int], SolveInfo]:
    if algorithm == "admm":
        return solve_admm(problem, rho=rho, max_iters=max_iters, tolerance=tolerance)
    if algorithm == "greedy":
        return solve_greedy(problem)
    if algorithm == "exhaustive":
        return solve_exhaustive(problem, limit=exhaustive_limit)
    raise ValueError(f"unknown consensus algorithm {algorithm!r}")
