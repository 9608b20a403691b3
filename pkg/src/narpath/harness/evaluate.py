"""Roll out policies on scenario sets and tabulate success rate and average step."""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

from ..cbs import BudgetExhausted, Infeasible, cbs_solve, extract_labels
from ..core import (
    Action,
    EpisodeLog,
    EpisodeState,
    Metrics,
    Scenario,
    StepRecord,
    aggregate_metrics,
    episode_metrics,
    max_steps,
    step,
)
from ..fusion import run_llm_nar_episode
from ..llm import ChatClient, run_llm_episode
from ..nar import nar_act
from ..nn import ParamStore

log = logging.getLogger(__name__)

POLICIES = ("cbs", "nar", "stub-llm", "live-llm", "llm-nar")
STOCHASTIC_REPEATS = 10


class ConfigurationError(ValueError):
    pass


def run_cbs_episode(scenario: Scenario, node_budget: int = 100_000) -> EpisodeLog:
    """Replay the optimal plan through the environment, cut at the step budget."""
    episode = EpisodeLog(scenario, "cbs")
    state = EpisodeState.initial(scenario)
    try:
        labels = extract_labels(cbs_solve(scenario, node_budget))
    except (Infeasible, BudgetExhausted) as exc:
        log.warning("cbs failed on %s: %s", scenario.name, exc)
        labels = []
        episode.aborted = True
    for joint in labels[: max_steps(scenario.map)]:
        new_state, executed = step(state, joint)
        episode.steps.append(StepRecord(state.t, state.positions, executed, tuple(a.word for a in joint)))
        state = new_state
    episode.final_positions = state.positions
    return episode


def run_nar_episode(scenario: Scenario, nar: ParamStore) -> EpisodeLog:
    episode = EpisodeLog(scenario, "nar")
    state = EpisodeState.initial(scenario)
    budget = max_steps(scenario.map)
    while not state.all_done and state.t < budget:
        proposal = tuple(Action(a) for a in nar_act(state, nar))
        new_state, executed = step(state, proposal)
        episode.steps.append(StepRecord(state.t, state.positions, executed, tuple(a.word for a in proposal)))
        state = new_state
    episode.final_positions = state.positions
    return episode


@dataclass
class Policy:
    name: str
    run: Callable[[Scenario, int], EpisodeLog]
    stochastic: bool


def make_policy(
    name: str,
    client: ChatClient | None = None,
    nar: ParamStore | None = None,
    fusion: ParamStore | None = None,
    node_budget: int = 100_000,
) -> Policy:
    if name == "cbs":
        return Policy(name, lambda sc, seed: run_cbs_episode(sc, node_budget), False)
    if name == "nar":
        if nar is None:
            raise ConfigurationError("policy 'nar' needs a NAR checkpoint")
        return Policy(name, lambda sc, seed: run_nar_episode(sc, nar), False)
    if name in ("stub-llm", "live-llm"):
        if client is None:
            raise ConfigurationError(f"policy {name!r} needs a chat client")
        return Policy(name, lambda sc, seed: run_llm_episode(sc, client, seed), True)
    if name == "llm-nar":
        if client is None or nar is None or fusion is None:
            raise ConfigurationError("policy 'llm-nar' needs a chat client, a NAR and a fusion checkpoint")
        return Policy(name, lambda sc, seed: run_llm_nar_episode(sc, client, nar, fusion, seed), True)
    raise ConfigurationError(f"unknown policy {name!r}; choose from {POLICIES}")


@dataclass
class EpisodeResult:
    scenario: Scenario
    repeat: int
    seed: int
    log: EpisodeLog
    metrics: Metrics
    runtime: float


@dataclass
class ResultRow:
    map: str
    density: float
    agents: int
    policy: str
    success_rate: float
    average_step: float
    runtime: float
    episodes: int


@dataclass
class ResultsTable:
    rows: list[ResultRow] = field(default_factory=list)
    episodes: list[EpisodeResult] = field(default_factory=list)

    def to_csv(self, include_runtime: bool = False) -> str:
        """CSV text; runtime is opt-in because it is the only non-reproducible column."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["map", "density", "agents", "policy", "success_rate", "average_step", "episodes"]
        if include_runtime:
            header.insert(6, "runtime_s")
        writer.writerow(header)
        for r in self.rows:
            row = [r.map, f"{r.density:.2f}", r.agents, r.policy, repr(r.success_rate), repr(r.average_step), r.episodes]
            if include_runtime:
                row.insert(6, f"{r.runtime:.6f}")
            writer.writerow(row)
        return buf.getvalue()


def _density(scenario: Scenario) -> float:
    grid = scenario.map
    return round(len(grid.obstacles) / (grid.height * grid.width), 2)


def evaluate(
    policy: Policy,
    scenarios: Sequence[Scenario],
    seed: int = 0,
    repeats: int | None = None,
    workers: int = 1,
) -> ResultsTable:
    """Run every scenario (``STOCHASTIC_REPEATS`` times for stochastic policies) and aggregate per group.

    With ``workers > 1`` episodes run on a thread pool; results keep the
    input scenario order regardless of completion order.
    """
    if repeats is None:
        repeats = STOCHASTIC_REPEATS if policy.stochastic else 1
    jobs = [(sc, rep, seed * 1000 + rep) for sc in scenarios for rep in range(repeats)]

    def run(job) -> EpisodeResult:
        sc, rep, run_seed = job
        t0 = time.perf_counter()
        episode = policy.run(sc, run_seed)
        elapsed = time.perf_counter() - t0
        return EpisodeResult(sc, rep, run_seed, episode, episode_metrics(episode, sc), elapsed)

    table = ResultsTable()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            table.episodes = list(pool.map(run, jobs))
    else:
        table.episodes = [run(job) for job in jobs]
    groups: dict[tuple, list[EpisodeResult]] = {}
    for res in table.episodes:
        grid = res.scenario.map
        key = (f"{grid.height}x{grid.width}", _density(res.scenario), res.scenario.num_agents)
        groups.setdefault(key, []).append(res)
    for (map_tag, density, agents), items in sorted(groups.items()):
        m = aggregate_metrics(r.metrics for r in items)
        runtime = sum(r.runtime for r in items) / len(items)
        table.rows.append(
            ResultRow(map_tag, density, agents, policy.name, m.success_rate, m.average_step, runtime, len(items))
        )
    return table
