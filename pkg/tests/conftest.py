import random

import pytest

from narpath.core import GridMap, Scenario


def random_scenario(rng: random.Random, max_side=6, max_agents=3, max_density=0.1, name="rand") -> Scenario:
    """Random instance with distinct starts and goals; may be unsolvable."""
    h, w = rng.randint(2, max_side), rng.randint(2, max_side)
    cells = [(r, c) for r in range(h) for c in range(w)]
    obstacles = frozenset(rng.sample(cells, int(rng.uniform(0, max_density) * len(cells))))
    free = [c for c in cells if c not in obstacles]
    n = rng.randint(1, min(max_agents, len(free)))
    return Scenario(GridMap(h, w, obstacles), tuple(rng.sample(free, n)), tuple(rng.sample(free, n)), name)


@pytest.fixture
def rng():
    return random.Random(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
