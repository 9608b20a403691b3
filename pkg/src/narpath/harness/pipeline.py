"""Stage functions shared by the CLI and the end-to-end training pipeline."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Sequence

from ..cbs import cbs_solve
from ..core import Scenario
from ..data import EpisodeRecord, LabelRecord, episode_records, export_jsonl, label_records
from ..fusion import fusion_samples, train_fusion
from ..llm import ChatClient, OpenAICompatibleClient, RateLimiter, ScriptedLLM, run_llm_episode
from ..nar import pretrain_nar
from ..nn import save_checkpoint
from .config import RunConfig
from .evaluate import ResultsTable, evaluate, make_policy
from .scenarios import ScenarioSpec, gen_scenarios, write_scenario_files

log = logging.getLogger(__name__)

EVAL_POLICIES = ("cbs", "nar", "stub-llm", "llm-nar")


def scenario_spec(config: RunConfig, count: int | None = None, seed: int | None = None) -> ScenarioSpec:
    return ScenarioSpec(
        config.height,
        config.width,
        config.density,
        config.agents,
        config.scenarios if count is None else count,
        config.seed if seed is None else seed,
        config.node_budget,
    )


def make_client(config: RunConfig) -> ChatClient:
    if config.client == "stub":
        return ScriptedLLM(config.invalid_rate, seed=config.seed)
    if config.client == "live":
        limiter = RateLimiter(config.requests_per_minute) if config.requests_per_minute > 0 else None
        return OpenAICompatibleClient(
            config.model, config.base_url or None, temperature=config.temperature, rate_limiter=limiter
        )
    raise ValueError(f"unknown client {config.client!r}; choose 'stub' or 'live'")


def label_dataset(scenarios: Sequence[Scenario], node_budget: int = 100_000) -> list[LabelRecord]:
    return [rec for sc in scenarios for rec in label_records(sc, cbs_solve(sc, node_budget))]


def collect_episodes(scenarios: Sequence[Scenario], client: ChatClient, seed: int = 0) -> list[EpisodeRecord]:
    """One LLM-only episode per scenario; scenario ``k`` runs with seed ``seed * 1000 + k``."""
    records = []
    for k, sc in enumerate(scenarios):
        records.extend(episode_records(run_llm_episode(sc, client, seed * 1000 + k)))
    return records


def write_curve_csv(curve, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "agreement"])
        for point in curve:
            writer.writerow([point.step, repr(point.loss), repr(point.agreement)])
    return path


def write_results(tables: Sequence[ResultsTable], path, include_runtime: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, table in enumerate(tables):
        text = table.to_csv(include_runtime)
        lines.extend(text.splitlines()[1 if k else 0 :])
    path.write_text("\n".join(lines) + "\n")
    return path


def run_pipeline(config: RunConfig, out_dir) -> dict[str, Path]:
    """Generate, label, pretrain, collect with the stub, train the fusion head and evaluate.

    Every artifact except ``timings.csv`` is a pure function of ``config``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    art: dict[str, Path] = {}

    train = gen_scenarios(scenario_spec(config))
    test = gen_scenarios(scenario_spec(config, config.test_scenarios, config.seed + 1))
    write_scenario_files(train, out / "scenarios" / "train")
    write_scenario_files(test, out / "scenarios" / "test")
    log.info("generated %d training and %d test scenarios", len(train), len(test))

    labels = label_dataset(train, config.node_budget)
    export_jsonl(labels, art.setdefault("labels", out / "labels.jsonl"))

    nar, nar_curve = pretrain_nar(
        labels, steps=config.nar_steps, batch_size=config.batch_size, lr=config.lr, seed=config.seed
    )
    save_checkpoint(art.setdefault("nar", out / "nar.json"), nar, "nar", {"seed": config.seed})
    write_curve_csv(nar_curve, art.setdefault("nar_curve", out / "nar_curve.csv"))

    client = make_client(config)
    episodes = collect_episodes(train, client, config.seed)
    export_jsonl(episodes, art.setdefault("episodes", out / "episodes.jsonl"))

    fusion, fusion_curve = train_fusion(
        fusion_samples(episodes),
        nar,
        steps=config.fusion_steps,
        batch_size=config.batch_size,
        lr=config.lr,
        seed=config.seed,
    )
    save_checkpoint(art.setdefault("fusion", out / "fusion.json"), fusion, "fusion", {"seed": config.seed})
    write_curve_csv(fusion_curve, art.setdefault("fusion_curve", out / "fusion_curve.csv"))

    tables = [
        evaluate(make_policy(name, client, nar, fusion, config.node_budget), test, config.seed, workers=config.workers)
        for name in EVAL_POLICIES
    ]
    write_results(tables, art.setdefault("results", out / "results.csv"))
    write_results(tables, out / "timings.csv", include_runtime=True)
    return art
