"""Grid-world MAPF environment: maps, scenarios, moves, conflicts and metrics.

Coordinates are ``(row, col)`` with ``(0, 0)`` in the lower-left corner, so
``Up`` increments the row. The text form of a map lists the top row
(``row == height - 1``) first.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

Cell = tuple[int, int]


class FormatError(ValueError):
    """Malformed map or scenario text."""


class ContractError(ValueError):
    """Inputs violate an operation's preconditions."""


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    STAY = 4

    @property
    def delta(self) -> Cell:
        return _DELTAS[self]

    @property
    def word(self) -> str:
        return self.name.lower()

    def apply(self, cell: Cell) -> Cell:
        dr, dc = _DELTAS[self]
        return (cell[0] + dr, cell[1] + dc)

    @classmethod
    def from_move(cls, src: Cell, dst: Cell) -> "Action":
        delta = (dst[0] - src[0], dst[1] - src[1])
        try:
            return _FROM_DELTA[delta]
        except KeyError:
            raise ContractError(f"cells {src} and {dst} are not adjacent") from None


_DELTAS = {
    Action.UP: (1, 0),
    Action.DOWN: (-1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
    Action.STAY: (0, 0),
}
_FROM_DELTA = {d: a for a, d in _DELTAS.items()}


@dataclass(frozen=True)
class GridMap:
    height: int
    width: int
    obstacles: frozenset[Cell] = frozenset()

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ContractError(f"map must be at least 2x2, got {self.height}x{self.width}")
        object.__setattr__(self, "obstacles", frozenset(tuple(c) for c in self.obstacles))
        for cell in self.obstacles:
            if not self.in_bounds(cell):
                raise ContractError(f"obstacle {cell} out of bounds")

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.obstacles

    def neighbors(self, cell: Cell) -> list[Cell]:
        """Free 4-neighbors of ``cell`` in action order."""
        out = []
        for a in (Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT):
            nxt = a.apply(cell)
            if self.is_free(nxt):
                out.append(nxt)
        return out

    def free_cells(self) -> list[Cell]:
        return [
            (r, c)
            for r in range(self.height)
            for c in range(self.width)
            if (r, c) not in self.obstacles
        ]

    def distances_from(self, source: Cell) -> dict[Cell, int]:
        """Breadth-first distances from ``source`` to every reachable free cell."""
        dist = {source: 0}
        frontier = [source]
        while frontier:
            nxt = []
            for cell in frontier:
                d = dist[cell] + 1
                for nb in self.neighbors(cell):
                    if nb not in dist:
                        dist[nb] = d
                        nxt.append(nb)
            frontier = nxt
        return dist


def parse_map(text: str) -> GridMap:
    rows = [line.rstrip("\r") for line in text.strip("\n").split("\n")]
    if not rows or not rows[0]:
        raise FormatError("empty map text")
    width = len(rows[0])
    height = len(rows)
    obstacles = set()
    for i, line in enumerate(rows):
        if len(line) != width:
            raise FormatError(f"ragged map: line {i} has {len(line)} columns, expected {width}")
        r = height - 1 - i
        for c, ch in enumerate(line):
            if ch == "@":
                obstacles.add((r, c))
            elif ch != ".":
                raise FormatError(f"illegal map character {ch!r} at line {i}, column {c}")
    return GridMap(height, width, frozenset(obstacles))


def render_map(grid: GridMap) -> str:
    lines = []
    for r in range(grid.height - 1, -1, -1):
        lines.append("".join("@" if (r, c) in grid.obstacles else "." for c in range(grid.width)))
    return "\n".join(lines)


@dataclass(frozen=True)
class Scenario:
    map: GridMap
    starts: tuple[Cell, ...]
    goals: tuple[Cell, ...]
    name: str = ""

    def __post_init__(self):
        starts = tuple(tuple(s) for s in self.starts)
        goals = tuple(tuple(g) for g in self.goals)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "goals", goals)
        if not starts:
            raise ContractError("scenario needs at least one agent")
        if len(starts) != len(goals):
            raise ContractError("starts and goals differ in length")
        if len(set(starts)) != len(starts):
            raise ContractError("starts must be pairwise distinct")
        if len(set(goals)) != len(goals):
            raise ContractError("goals must be pairwise distinct")
        for cell in starts + goals:
            if not self.map.is_free(cell):
                raise ContractError(f"start/goal {cell} is out of bounds or blocked")

    @property
    def num_agents(self) -> int:
        return len(self.starts)


def write_scenario(scenario: Scenario) -> str:
    """Serialize a scenario: header, map block, then one ``sr sc gr gc`` line per agent."""
    lines = [
        "narpath-scenario 1",
        f"name {scenario.name}",
        f"map {scenario.map.height} {scenario.map.width}",
        render_map(scenario.map),
        f"agents {scenario.num_agents}",
    ]
    for (sr, sc), (gr, gc) in zip(scenario.starts, scenario.goals):
        lines.append(f"{sr} {sc} {gr} {gc}")
    return "\n".join(lines) + "\n"


def read_scenario(text: str) -> Scenario:
    lines = text.splitlines()
    try:
        if lines[0].split() != ["narpath-scenario", "1"]:
            raise FormatError(f"unsupported scenario header {lines[0]!r}")
        if not lines[1].startswith("name"):
            raise FormatError("missing name line")
        name = lines[1][4:].strip()
        tag, h, w = lines[2].split()
        if tag != "map":
            raise FormatError("missing map line")
        h, w = int(h), int(w)
        grid = parse_map("\n".join(lines[3 : 3 + h]))
        if (grid.height, grid.width) != (h, w):
            raise FormatError("map block does not match declared size")
        tag, n = lines[3 + h].split()
        if tag != "agents":
            raise FormatError("missing agents line")
        starts, goals = [], []
        for line in lines[4 + h : 4 + h + int(n)]:
            sr, sc, gr, gc = (int(v) for v in line.split())
            starts.append((sr, sc))
            goals.append((gr, gc))
        if len(starts) != int(n):
            raise FormatError("truncated agent list")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed scenario text: {exc}") from exc
    return Scenario(grid, tuple(starts), tuple(goals), name)


class ConflictKind(enum.Enum):
    VERTEX = "vertex"
    EDGE = "edge"


@dataclass(frozen=True)
class Conflict:
    kind: ConflictKind
    agents: tuple[int, int]
    cells: tuple  # (v,) for vertex conflicts, (u, v) for edge conflicts
    time: int = 0


def detect_conflicts(
    positions_t: Sequence[Cell], positions_next: Sequence[Cell], time: int = 0
) -> list[Conflict]:
    """Every vertex and edge (swap) conflict in the transition ``positions_t -> positions_next``.

    For an edge conflict between ``i < j`` the cells are agent ``i``'s move ``(u, v)``.
    """
    n = len(positions_t)
    if len(positions_next) != n:
        raise ContractError("position lists differ in length")
    conflicts = []
    seen: dict[Cell, list[int]] = {}
    for i, cell in enumerate(positions_next):
        seen.setdefault(tuple(cell), []).append(i)
    for cell, agents in seen.items():
        if len(agents) > 1:
            for a in range(len(agents)):
                for b in range(a + 1, len(agents)):
                    conflicts.append(Conflict(ConflictKind.VERTEX, (agents[a], agents[b]), (cell,), time))
    where_now = {tuple(c): i for i, c in enumerate(positions_t)}
    for i in range(n):
        u, v = tuple(positions_t[i]), tuple(positions_next[i])
        if u == v:
            continue
        j = where_now.get(v)
        if j is not None and j > i and tuple(positions_next[j]) == u:
            conflicts.append(Conflict(ConflictKind.EDGE, (i, j), (u, v), time))
    conflicts.sort(key=lambda c: (c.agents, c.kind.value))
    return conflicts


def max_steps(grid: GridMap) -> int:
    return 3 * max(grid.height, grid.width)


@dataclass(frozen=True)
class EpisodeState:
    scenario: Scenario
    positions: tuple[Cell, ...]
    t: int = 0

    @classmethod
    def initial(cls, scenario: Scenario) -> "EpisodeState":
        return cls(scenario, scenario.starts, 0)

    @property
    def done(self) -> tuple[bool, ...]:
        return tuple(p == g for p, g in zip(self.positions, self.scenario.goals))

    @property
    def all_done(self) -> bool:
        return all(self.done)


def step(state: EpisodeState, proposal: Sequence[Action]) -> tuple[EpisodeState, tuple[Action, ...]]:
    """Advance one timestep, demoting illegal or conflicting moves to ``Stay``.

    Moves off the map or into obstacles are demoted first. Then every agent
    taking part in any vertex or edge conflict is demoted, repeating until
    the transition is conflict-free.
    """
    n = state.scenario.num_agents
    if len(proposal) != n:
        raise ContractError(f"proposal has {len(proposal)} actions for {n} agents")
    grid = state.scenario.map
    executed = [Action(a) for a in proposal]
    targets = []
    for i, (pos, act) in enumerate(zip(state.positions, executed)):
        nxt = act.apply(pos)
        if not grid.is_free(nxt):
            executed[i] = Action.STAY
            nxt = pos
        targets.append(nxt)
    while True:
        conflicts = detect_conflicts(state.positions, targets)
        if not conflicts:
            break
        for conflict in conflicts:
            for i in conflict.agents:
                executed[i] = Action.STAY
                targets[i] = state.positions[i]
    return EpisodeState(state.scenario, tuple(targets), state.t + 1), tuple(executed)


@dataclass
class StepRecord:
    t: int
    positions: tuple[Cell, ...]
    executed: tuple[Action, ...]
    proposed: tuple[str, ...] = ()
    prompt: str | None = None
    raw_reply: str | None = None
    fused: tuple[str, ...] = ()


@dataclass
class EpisodeLog:
    scenario: Scenario
    policy: str
    steps: list[StepRecord] = field(default_factory=list)
    final_positions: tuple[Cell, ...] = ()
    aborted: bool = False
    resets: int = 0
    queries: int = 0

    @property
    def trajectory(self) -> list[tuple[Cell, ...]]:
        return [s.positions for s in self.steps] + [self.final_positions]


@dataclass(frozen=True)
class Metrics:
    success_rate: float
    average_step: float
    n_agents: int
    n_success: int
    total_steps: int
    max_steps: int


def arrival_steps(trajectory: Sequence[Sequence[Cell]], goals: Sequence[Cell], budget: int) -> list[int]:
    """Per-agent step counts: arrival time for agents ending on their goal, else ``budget``."""
    out = []
    for i, goal in enumerate(goals):
        goal = tuple(goal)
        if tuple(trajectory[-1][i]) != goal:
            out.append(budget)
            continue
        k = len(trajectory) - 1
        while k > 0 and tuple(trajectory[k - 1][i]) == goal:
            k -= 1
        out.append(k)
    return out


def trajectory_metrics(trajectory: Sequence[Sequence[Cell]], goals: Sequence[Cell], budget: int) -> Metrics:
    if any(len(p) != len(goals) for p in trajectory):
        raise ContractError("trajectory agent count does not match goals")
    if len(trajectory) - 1 > budget:
        raise ContractError(f"trajectory covers {len(trajectory) - 1} steps, budget is {budget}")
    steps = arrival_steps(trajectory, goals, budget)
    n = len(goals)
    n_success = sum(tuple(trajectory[-1][i]) == tuple(g) for i, g in enumerate(goals))
    return Metrics(n_success / n, sum(steps) / (n * budget), n, n_success, sum(steps), budget)


def episode_metrics(log: EpisodeLog, scenario: Scenario) -> Metrics:
    if len(log.final_positions) != scenario.num_agents:
        raise ContractError("log and scenario disagree on agent count")
    return trajectory_metrics(log.trajectory, scenario.goals, max_steps(scenario.map))


def aggregate_metrics(items: Iterable[Metrics]) -> Metrics:
    """Pool agents across episodes: R = successes / agents, δ = steps / (agents · budget)."""
    items = list(items)
    if not items:
        raise ContractError("no episodes to aggregate")
    n = sum(m.n_agents for m in items)
    succ = sum(m.n_success for m in items)
    steps = sum(m.total_steps for m in items)
    denom = sum(m.n_agents * m.max_steps for m in items)
    budget = items[0].max_steps if all(m.max_steps == items[0].max_steps for m in items) else 0
    return Metrics(succ / n, steps / denom, n, succ, steps, budget)


def validate_trajectory(grid: GridMap, trajectory: Sequence[Sequence[Cell]]) -> list[Conflict]:
    """Conflicts, teleports or blocked cells anywhere along a trajectory (empty if valid)."""
    problems = []
    for t in range(len(trajectory) - 1):
        cur, nxt = trajectory[t], trajectory[t + 1]
        for i, (a, b) in enumerate(zip(cur, nxt)):
            if abs(a[0] - b[0]) + abs(a[1] - b[1]) > 1 or not grid.is_free(tuple(b)):
                raise ContractError(f"agent {i} makes an illegal move {a} -> {b} at t={t}")
        problems.extend(detect_conflicts(cur, nxt, time=t + 1))
    return problems
