"""Optimal Conflict-Based Search and a brute-force joint-state oracle.

The objective is sum-of-costs: each agent pays one unit per timestep until it
reaches its goal for the last time. Agents parked on a goal still occupy it.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass

from .core import Action, Cell, Conflict, ConflictKind, ContractError, GridMap, Scenario, detect_conflicts

DEFAULT_NODE_BUDGET = 100_000
ORACLE_MAX_AGENTS = 4
ORACLE_MAX_CELLS = 36


class Infeasible(Exception):
    """No conflict-free plan exists."""


class BudgetExhausted(Exception):
    """The high-level search hit its node budget."""


class CorruptSolution(ValueError):
    """A path contains a jump between non-adjacent cells."""


@dataclass(frozen=True)
class Constraint:
    agent: int
    time: int
    cell: Cell
    prev: Cell | None = None  # edge ban: no move prev -> cell arriving at `time`

    @property
    def is_edge(self) -> bool:
        return self.prev is not None


@dataclass
class Solution:
    paths: list[list[Cell]]  # padded with goal repetition to a common horizon
    costs: list[int]
    expanded: int = 0

    @property
    def sum_of_costs(self) -> int:
        return sum(self.costs)

    @property
    def horizon(self) -> int:
        return len(self.paths[0]) - 1

    def positions_at(self, t: int) -> tuple[Cell, ...]:
        return tuple(p[min(t, len(p) - 1)] for p in self.paths)


@dataclass(frozen=True)
class AgentConstraints:
    vertex: frozenset = frozenset()  # {(cell, t)}
    edge: frozenset = frozenset()  # {(u, v, t)}
    max_time: int = 0
    goal_last_ban: int = -1

    def add(self, c: Constraint, goal: Cell) -> "AgentConstraints":
        if c.is_edge:
            vertex, edge = self.vertex, self.edge | {(c.prev, c.cell, c.time)}
        else:
            vertex, edge = self.vertex | {(c.cell, c.time)}, self.edge
        last = self.goal_last_ban
        if not c.is_edge and c.cell == goal:
            last = max(last, c.time)
        return AgentConstraints(vertex, edge, max(self.max_time, c.time), last)


_MOVES = tuple((int(a), a.delta) for a in Action)
_DELTA = dict(_MOVES)


def plan_single(
    grid: GridMap,
    start: Cell,
    goal: Cell,
    cons: AgentConstraints,
    dist: dict[Cell, int],
) -> list[Cell] | None:
    """Space-time A* for one agent honoring its constraints.

    ``dist`` holds exact distances to ``goal`` and doubles as the free-cell
    set. Minimizes arrival time, then the number of direction changes (two
    consecutive actions that differ); remaining ties follow action order
    Up < Down < Left < Right < Stay.
    """
    if start not in dist:
        return None
    horizon = grid.height * grid.width + cons.max_time
    # (f, turns, action sequence, t, cell); the action sequence breaks remaining ties
    # lexicographically, and any prefix of a path sorts no later than the path itself.
    heap = [(dist[start], 0, (), 0, start)]
    closed = set()
    vbans, ebans, goal_ban = cons.vertex, cons.edge, cons.goal_last_ban
    while heap:
        _, turns, acts, t, cell = heapq.heappop(heap)
        last = acts[-1] if acts else -1
        key = (cell, t, last)
        if key in closed:
            continue
        closed.add(key)
        if cell == goal and t > goal_ban:
            path = [start]
            for a in acts:
                dr, dc = _DELTA[a]
                path.append((path[-1][0] + dr, path[-1][1] + dc))
            return path
        if t >= horizon:
            continue
        nt = t + 1
        r, c = cell
        for act, (dr, dc) in _MOVES:
            nxt = (r + dr, c + dc)
            h = dist.get(nxt)
            if h is None or (nxt, nt) in vbans or (cell, nxt, nt) in ebans:
                continue
            if (nxt, nt, act) in closed:
                continue
            nturns = turns + (last != -1 and last != act)
            heapq.heappush(heap, (nt + h, nturns, acts + (act,), nt, nxt))
    return None


def path_cost(path: list[Cell]) -> int:
    """Arrival time: index after which the path stays on its last cell."""
    k = len(path) - 1
    while k > 0 and path[k - 1] == path[-1]:
        k -= 1
    return k


def _padded(paths: list[list[Cell]]) -> list[list[Cell]]:
    horizon = max(len(p) for p in paths)
    return [p + [p[-1]] * (horizon - len(p)) for p in paths]


def _conflicts(paths: list[list[Cell]]) -> list[Conflict]:
    padded = _padded(paths)
    out = []
    for t in range(1, len(padded[0])):
        prev = [p[t - 1] for p in padded]
        cur = [p[t] for p in padded]
        out.extend(detect_conflicts(prev, cur, time=t))
    return out


def _first_conflict(paths: list[list[Cell]]) -> tuple[Conflict | None, int]:
    conflicts = _conflicts(paths)
    if not conflicts:
        return None, 0
    return conflicts[0], len(conflicts)


def _split(conflict: Conflict) -> list[Constraint]:
    i, j = conflict.agents
    t = conflict.time
    if conflict.kind is ConflictKind.VERTEX:
        (v,) = conflict.cells
        return [Constraint(i, t, v), Constraint(j, t, v)]
    u, v = conflict.cells
    return [Constraint(i, t, v, prev=u), Constraint(j, t, u, prev=v)]


def cbs_solve(scenario: Scenario, node_budget: int = DEFAULT_NODE_BUDGET) -> Solution:
    """Minimum sum-of-costs conflict-free plan.

    High level: best-first over constraint-tree nodes ordered by
    (cost, conflict count, insertion order), branching on the earliest
    conflict. Raises ``Infeasible`` or ``BudgetExhausted``.
    """
    grid = scenario.map
    n = scenario.num_agents
    dists = [grid.distances_from(g) for g in scenario.goals]
    root_cons = [AgentConstraints() for _ in range(n)]
    paths = []
    for i in range(n):
        path = plan_single(grid, scenario.starts[i], scenario.goals[i], root_cons[i], dists[i])
        if path is None:
            raise Infeasible(f"agent {i} cannot reach its goal")
        paths.append(path)
    costs = [path_cost(p) for p in paths]
    conflict, count = _first_conflict(paths)
    seq = itertools.count()
    heap = [(sum(costs), count, next(seq), root_cons, paths, costs, conflict)]
    expanded = 0
    while heap:
        cost, count, _, cons, paths, costs, conflict = heapq.heappop(heap)
        if conflict is None:
            return Solution(_padded(paths), costs, expanded)
        expanded += 1
        if expanded > node_budget:
            raise BudgetExhausted(f"no solution within {node_budget} constraint-tree nodes")
        for constraint in _split(conflict):
            a = constraint.agent
            child_cons = list(cons)
            child_cons[a] = cons[a].add(constraint, scenario.goals[a])
            new_path = plan_single(grid, scenario.starts[a], scenario.goals[a], child_cons[a], dists[a])
            if new_path is None:
                continue
            child_paths = list(paths)
            child_paths[a] = new_path
            child_costs = list(costs)
            child_costs[a] = path_cost(new_path)
            child_conflict, child_count = _first_conflict(child_paths)
            heapq.heappush(
                heap,
                (sum(child_costs), child_count, next(seq), child_cons, child_paths, child_costs, child_conflict),
            )
    raise Infeasible("constraint tree exhausted")


def extract_labels(solution: Solution) -> list[tuple[Action, ...]]:
    """Per-timestep joint actions replaying the solution's paths."""
    labels = []
    for t in range(solution.horizon):
        joint = []
        for path in solution.paths:
            try:
                joint.append(Action.from_move(path[t], path[t + 1]))
            except ContractError as exc:
                raise CorruptSolution(str(exc)) from None
        labels.append(tuple(joint))
    return labels


def joint_oracle(scenario: Scenario) -> int:
    """Exact minimum sum-of-costs by search over joint states.

    A state is the tuple of positions plus the set of agents parked for good
    on their goals. Each timestep costs one unit per unparked agent; parking
    an agent standing on its goal is free. The search is A* with the sum of
    single-agent distances, which is consistent, so the first goal popped is
    optimal. Raises ``Infeasible`` if no plan exists.
    """
    grid = scenario.map
    n = scenario.num_agents
    if n > ORACLE_MAX_AGENTS or grid.height * grid.width > ORACLE_MAX_CELLS:
        raise ContractError(
            f"oracle refuses {n} agents on {grid.height}x{grid.width}: joint state space too large"
        )
    goals = scenario.goals
    dists = [grid.distances_from(g) for g in goals]
    for i, s in enumerate(scenario.starts):
        if s not in dists[i]:
            raise Infeasible(f"agent {i} cannot reach its goal")
    full = (1 << n) - 1
    moves = [a.delta for a in Action]

    def h(pos, parked):
        return sum(dists[i][pos[i]] for i in range(n) if not parked >> i & 1)

    start = (tuple(scenario.starts), 0)
    best = {start: 0}
    heap = [(h(*start), 0, start)]
    while heap:
        f, g, state = heapq.heappop(heap)
        if best.get(state, None) != g:
            continue
        pos, parked = state
        if parked == full:
            return g
        succ = []
        for i in range(n):
            if not parked >> i & 1 and pos[i] == goals[i]:
                succ.append(((pos, parked | 1 << i), g))
        active = [i for i in range(n) if not parked >> i & 1]
        step_cost = g + len(active)
        options = []
        for i in range(n):
            if parked >> i & 1:
                options.append([pos[i]])
            else:
                cells = []
                for dr, dc in moves:
                    nxt = (pos[i][0] + dr, pos[i][1] + dc)
                    if grid.is_free(nxt):
                        cells.append(nxt)
                options.append(cells)
        for nxt in itertools.product(*options):
            if len(set(nxt)) < n:
                continue
            swap = False
            for i in range(n):
                for j in range(i + 1, n):
                    if nxt[i] == pos[j] and nxt[j] == pos[i] and pos[i] != pos[j]:
                        swap = True
                        break
                if swap:
                    break
            if swap:
                continue
            succ.append(((nxt, parked), step_cost))
        for nstate, ng in succ:
            if ng < best.get(nstate, 1 << 60):
                best[nstate] = ng
                heapq.heappush(heap, (ng + h(*nstate), ng, nstate))
    raise Infeasible("joint state space exhausted")
