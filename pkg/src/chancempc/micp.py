"""Branch-and-bound over binary marks, and the exhaustive-search baseline.

The solver explores continuous conic relaxations with per-node variable
bounds, branching on one-hot groups when possible (fixing a member to 1
propagates zeros to the rest of its group).  Node selection is best-first
with FIFO tie-breaking, so runs are deterministic.  Exhaustive search
enumerates every one-hot combination and solves each fixed convex
problem, serving as the cross-method oracle.
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .conic_ir import ConicProgram, Solution, SolveStatus, solve_relaxation


@dataclass(frozen=True)
class BnBConfig:
    integrality_tol: float = 1e-6
    relative_gap_tol: float = 1e-6
    node_selection: str = "best_first"     # or "depth_first"
    branch_rule: str = "group_aware"       # or "most_fractional"
    node_cap: int = 100_000
    audit_bounds: bool = False

    def __post_init__(self):
        if self.integrality_tol <= 0 or self.relative_gap_tol < 0:
            raise ValueError("tolerances must be positive")
        if self.node_cap < 1:
            raise ValueError("node_cap must be >= 1")


@dataclass
class Incumbent:
    assignment: dict[int, int]
    objective: float
    primal: np.ndarray


@dataclass
class BnBStats:
    nodes_explored: int = 0
    incumbent_updates: int = 0
    gap: float = math.inf
    wall_time: float = 0.0
    gap_closed: bool = True
    numerical_failures: int = 0
    pruned_bounds: list[float] = field(default_factory=list)
    incumbent_objectives: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "nodes": self.nodes_explored,
            "incumbentUpdates": self.incumbent_updates,
            "gap": None if math.isinf(self.gap) else self.gap,
            "wallTime": self.wall_time,
            "gapClosed": self.gap_closed,
            "numericalFailures": self.numerical_failures,
        }


def _group_of(program: ConicProgram) -> dict[int, list[int]]:
    member = {}
    for group in program.onehot_groups:
        for vid in group:
            if vid in member:
                raise ValueError(f"binary {vid} belongs to more than one one-hot group")
            member[vid] = group
    return member


def _fractional_binaries(program, x, tol):
    out = {}
    for vid in program.binary_marks:
        frac = abs(x[vid] - round(x[vid]))
        if frac > tol:
            out[vid] = frac
    return out


def _pick_branch_var(program, fractional, rule, group_of):
    if rule == "group_aware":
        grouped = {v: f for v, f in fractional.items() if v in group_of}
        pool = grouped or fractional
    else:
        pool = fractional
    # most fractional first; index tie-break keeps runs deterministic
    return min(pool, key=lambda v: (-pool[v], v))


def branch(fixings: dict[int, int], branch_var: int,
           group_of: dict[int, list[int]]) -> tuple[dict[int, int], dict[int, int]]:
    """Children fixing the chosen binary to 1 and to 0.

    Fixing a grouped member to 1 propagates 0 to the rest of its group.
    """
    up = dict(fixings)
    up[branch_var] = 1
    for other in group_of.get(branch_var, ()):  # group propagation
        if other != branch_var:
            up[other] = 0
    down = dict(fixings)
    down[branch_var] = 0
    return up, down


def _assignment_from_primal(program, x):
    return {vid: int(round(x[vid])) for vid in program.binary_marks}


def solve_bnb(program: ConicProgram, config: BnBConfig = BnBConfig(),
              incumbent_hint: dict[int, int] | None = None
              ) -> tuple[Solution, BnBStats]:
    """Globally solve the mixed-integer conic program.

    Returns the best solution found and run statistics.  When the node cap
    is hit the incumbent is returned with ``stats.gap_closed = False``.
    An optional assignment hint is evaluated first to seed the incumbent
    (useful across receding-horizon instants, where the previous selection
    is usually still optimal).
    """
    issues = program.validate()
    if issues:
        raise ValueError("program failed validation: " + "; ".join(issues))
    group_of = _group_of(program)
    t0 = time.perf_counter()
    stats = BnBStats()

    incumbent: Incumbent | None = None

    def slack(obj):
        return config.relative_gap_tol * max(1.0, abs(obj))

    def try_incumbent(sol, fixings):
        nonlocal incumbent
        assignment = _assignment_from_primal(program, sol.primal)
        assignment.update(fixings)
        if incumbent is None or sol.objective_value < incumbent.objective:
            incumbent = Incumbent(assignment, sol.objective_value, sol.primal.copy())
            stats.incumbent_updates += 1
            stats.incumbent_objectives.append(sol.objective_value)

    def solve_node(fixings):
        stats.nodes_explored += 1
        overrides = {v: (float(val), float(val)) for v, val in fixings.items()}
        sol = solve_relaxation(program, bound_overrides=overrides)
        if sol.status is SolveStatus.NUMERICAL_FAILURE:
            stats.numerical_failures += 1
        return sol

    if incumbent_hint:
        full = dict(incumbent_hint)
        for vid, val in incumbent_hint.items():
            if val == 1:
                for other in group_of.get(vid, ()):
                    if other != vid:
                        full[other] = 0
        if set(full) >= program.binary_marks:
            hint_sol = solve_node(full)
            if hint_sol.optimal and not _fractional_binaries(
                    program, hint_sol.primal, config.integrality_tol):
                try_incumbent(hint_sol, full)

    root = solve_node({})
    if root.status is SolveStatus.INFEASIBLE and incumbent is None:
        stats.wall_time = time.perf_counter() - t0
        return root, stats
    if root.status is SolveStatus.UNBOUNDED or (
            root.status is SolveStatus.NUMERICAL_FAILURE and incumbent is None):
        stats.wall_time = time.perf_counter() - t0
        stats.gap_closed = False
        return root, stats

    counter = itertools.count()
    heap: list = []

    def push(bound, fixings, depth):
        if config.node_selection == "depth_first":
            key = (-depth, next(counter))
        else:
            key = (bound, next(counter))
        heapq.heappush(heap, (key, bound, fixings))

    def handle(sol, fixings, depth):
        """Either absorb an integral node or queue it for branching."""
        if not sol.optimal:
            return
        if incumbent is not None and sol.objective_value >= incumbent.objective - slack(
                incumbent.objective):
            stats.pruned_bounds.append(sol.objective_value)
            return
        fractional = _fractional_binaries(program, sol.primal, config.integrality_tol)
        if not fractional:
            try_incumbent(sol, fixings)
            return
        push(sol.objective_value, (fixings, fractional), depth)

    # rounding probe: dive from the root relaxation, rounding one one-hot
    # group (or free binary) at a time and re-solving, so each rounding is
    # informed by the previous fixings; seeds the incumbent early
    if root.optimal and incumbent is None:
        probe: dict[int, int] = {}
        sol = root
        for _ in range(len(program.onehot_groups) + len(program.binary_marks)):
            fractional = _fractional_binaries(program, sol.primal,
                                              config.integrality_tol)
            fractional = {v: f for v, f in fractional.items() if v not in probe}
            if not fractional:
                full = dict(probe)
                full.update(_assignment_from_primal(program, sol.primal))
                full.update(probe)
                try_incumbent(sol, full)
                break
            var = max(fractional, key=lambda v: (sol.primal[v], -v))
            if var in group_of:
                var = max(group_of[var], key=lambda v: (sol.primal[v], -v))
                probe[var] = 1
                for other in group_of[var]:
                    if other != var:
                        probe[other] = 0
            else:
                probe[var] = int(round(sol.primal[var]))
            sol = solve_node(probe)
            if not sol.optimal:
                break

    handle(root, {}, 0)

    while heap:
        if stats.nodes_explored >= config.node_cap:
            stats.gap_closed = False
            break
        (_, bound, payload) = heapq.heappop(heap)
        fixings, fractional = payload
        if incumbent is not None and bound >= incumbent.objective - slack(
                incumbent.objective):
            stats.pruned_bounds.append(bound)
            continue
        var = _pick_branch_var(program, fractional, config.branch_rule, group_of)
        depth = len(fixings) + 1
        for child in branch(fixings, var, group_of):
            sol = solve_node(child)
            if sol.status is SolveStatus.INFEASIBLE:
                continue
            if sol.status is SolveStatus.NUMERICAL_FAILURE:
                stats.gap_closed = False
                continue
            handle(sol, child, depth)

    stats.wall_time = time.perf_counter() - t0
    if incumbent is None:
        return (Solution(SolveStatus.INFEASIBLE, np.zeros(program.num_vars),
                         math.inf, diagnostic="no feasible integer assignment"),
                stats)
    remaining = [b for (_, b, _) in heap]
    best_bound = min(remaining) if remaining else incumbent.objective
    stats.gap = max(0.0, incumbent.objective - min(best_bound, incumbent.objective))
    solution = Solution(SolveStatus.OPTIMAL, incumbent.primal, incumbent.objective)
    return solution, stats


@dataclass
class ExhaustiveStats:
    solves: int = 0
    feasible: int = 0
    wall_time: float = 0.0


def onehot_assignments(program: ConicProgram):
    """All binary assignments consistent with the one-hot groups.

    Cartesian product over groups (one member at 1 per group) and over
    {0,1} for any ungrouped binaries.
    """
    groups = program.onehot_groups
    grouped = {v for g in groups for v in g}
    free = sorted(v for v in program.binary_marks if v not in grouped)
    choice_sets = [[(g, pick) for pick in g] for g in groups]
    for combo in itertools.product(*choice_sets):
        base = {}
        for group, pick in combo:
            for v in group:
                base[v] = 1 if v == pick else 0
        if not free:
            yield dict(base)
            continue
        for bits in itertools.product((0, 1), repeat=len(free)):
            assignment = dict(base)
            assignment.update(zip(free, bits))
            yield assignment


def exhaustive_search(program: ConicProgram, assignments=None
                      ) -> tuple[Solution, ExhaustiveStats]:
    """Best objective across every fixed one-hot assignment.

    Each assignment yields a convex problem solved directly; infeasible
    assignments are skipped.  All infeasible means Infeasible overall.
    """
    if assignments is None:
        assignments = onehot_assignments(program)
    t0 = time.perf_counter()
    stats = ExhaustiveStats()
    best: Solution | None = None
    for assignment in assignments:
        overrides = {v: (float(val), float(val)) for v, val in assignment.items()}
        sol = solve_relaxation(program, bound_overrides=overrides)
        stats.solves += 1
        if not sol.optimal:
            continue
        stats.feasible += 1
        if best is None or sol.objective_value < best.objective_value:
            best = sol
    stats.wall_time = time.perf_counter() - t0
    if best is None:
        return (Solution(SolveStatus.INFEASIBLE, np.zeros(program.num_vars),
                         math.inf, diagnostic="all assignments infeasible"),
                stats)
    return best, stats
