"""Seeded random scenarios, solvable by construction."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from pathlib import Path

from ..cbs import BudgetExhausted, Infeasible, cbs_solve
from ..core import GridMap, Scenario, read_scenario, write_scenario

log = logging.getLogger(__name__)

MAX_REJECTIONS = 1000


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    height: int
    width: int
    density: float
    agents: int
    count: int
    seed: int
    node_budget: int = 100_000

    def __post_init__(self):
        if not 0.0 <= self.density <= 0.3:
            raise ValueError(f"obstacle density {self.density} outside [0, 0.3]")
        if not 1 <= self.agents <= 32:
            raise ValueError(f"agent count {self.agents} outside [1, 32]")

    @property
    def tag(self) -> str:
        return f"{self.height}x{self.width}-d{round(self.density * 100):02d}-n{self.agents}"


def _draw(rng: random.Random, spec: ScenarioSpec, name: str) -> Scenario | None:
    cells = [(r, c) for r in range(spec.height) for c in range(spec.width)]
    obstacles = frozenset(rng.sample(cells, round(spec.density * len(cells))))
    grid = GridMap(spec.height, spec.width, obstacles)
    free = [c for c in cells if c not in obstacles]
    if len(free) < spec.agents:
        return None
    starts = rng.sample(free, spec.agents)
    goals = rng.sample(free, spec.agents)
    for s, g in zip(starts, goals):
        if s not in grid.distances_from(g):
            return None
    scenario = Scenario(grid, tuple(starts), tuple(goals), name)
    try:
        cbs_solve(scenario, spec.node_budget)
    except (Infeasible, BudgetExhausted):
        return None
    return scenario


def gen_scenarios(spec: ScenarioSpec) -> list[Scenario]:
    """``spec.count`` scenarios; draws that are unreachable or that CBS cannot solve are redrawn."""
    rng = random.Random(f"{spec.seed}:{spec.tag}")
    out = []
    for k in range(spec.count):
        name = f"{spec.tag}-s{spec.seed}-{k:04d}"
        for _ in range(MAX_REJECTIONS):
            scenario = _draw(rng, spec, name)
            if scenario is not None:
                out.append(scenario)
                break
        else:
            raise GenerationError(
                f"{MAX_REJECTIONS} consecutive unsolvable draws for {spec.tag}; density too high?"
            )
    return out


def write_scenario_files(scenarios: list[Scenario], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for sc in scenarios:
        path = directory / f"{sc.name}.scen"
        path.write_text(write_scenario(sc))
        paths.append(path)
    return paths


def read_scenario_files(directory) -> list[Scenario]:
    return [read_scenario(p.read_text()) for p in sorted(Path(directory).glob("*.scen"))]
