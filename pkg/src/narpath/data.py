"""Training records and their JSONL form.

Two record kinds share one file layout: ``labels`` (expert joint actions
from CBS) and ``episodes`` (LLM interaction timesteps). Every line carries
``kind`` and ``schema_version`` plus enough of the scenario to rebuild
observations without any other file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .cbs import Solution, extract_labels
from .core import Action, Cell, EpisodeLog, Scenario, parse_map, render_map

SCHEMA_VERSION = 1
KINDS = ("labels", "episodes")
INVALID = "invalid"


class DatasetError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message} (schema version {SCHEMA_VERSION})")


@dataclass(frozen=True)
class LabelRecord:
    scenario: Scenario
    t: int
    positions: tuple[Cell, ...]
    optimal_actions: tuple[Action, ...]


@dataclass(frozen=True)
class EpisodeRecord:
    scenario: Scenario
    t: int
    positions: tuple[Cell, ...]
    prompt: str
    raw_reply: str
    parsed: tuple[str, ...]  # action words or "invalid"
    executed: tuple[Action, ...]
    policy: str = "stub-llm"
    fused: tuple[str, ...] = ()


def label_records(scenario: Scenario, solution: Solution) -> list[LabelRecord]:
    return [
        LabelRecord(scenario, t, solution.positions_at(t), joint)
        for t, joint in enumerate(extract_labels(solution))
    ]


def episode_records(log: EpisodeLog) -> list[EpisodeRecord]:
    return [
        EpisodeRecord(
            log.scenario,
            s.t,
            s.positions,
            s.prompt or "",
            s.raw_reply or "",
            tuple(s.proposed),
            s.executed,
            log.policy,
            tuple(s.fused),
        )
        for s in log.steps
    ]


def _cells(cells) -> list[list[int]]:
    return [[int(r), int(c)] for r, c in cells]


def _scenario_fields(scenario: Scenario) -> dict:
    return {
        "scenario_id": scenario.name,
        "map": render_map(scenario.map).split("\n"),
        "starts": _cells(scenario.starts),
        "goals": _cells(scenario.goals),
    }


def record_to_json(record: LabelRecord | EpisodeRecord) -> dict:
    if isinstance(record, LabelRecord):
        out = {"kind": "labels", "schema_version": SCHEMA_VERSION}
        out.update(_scenario_fields(record.scenario))
        out.update(
            t=record.t,
            positions=_cells(record.positions),
            optimal_actions=[a.word for a in record.optimal_actions],
        )
        return out
    out = {"kind": "episodes", "schema_version": SCHEMA_VERSION}
    out.update(_scenario_fields(record.scenario))
    out.update(
        policy=record.policy,
        t=record.t,
        positions=_cells(record.positions),
        prompt=record.prompt,
        raw_reply=record.raw_reply,
        parsed=list(record.parsed),
        executed=[a.word for a in record.executed],
        fused=list(record.fused),
    )
    return out


_REQUIRED = {
    "labels": ("scenario_id", "map", "starts", "goals", "t", "positions", "optimal_actions"),
    "episodes": ("scenario_id", "map", "starts", "goals", "policy", "t", "positions", "prompt",
                 "raw_reply", "parsed", "executed"),
}
_WORDS = {a.word: a for a in Action}


def _action(word: str, line: int) -> Action:
    try:
        return _WORDS[word]
    except KeyError:
        raise DatasetError(f"unknown action {word!r}", line) from None


def record_from_json(obj: dict, line: int, cache: dict | None = None) -> LabelRecord | EpisodeRecord:
    kind = obj.get("kind")
    if kind not in KINDS:
        raise DatasetError(f"unknown record kind {kind!r}", line)
    if obj.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"schema_version {obj.get('schema_version')!r} is not supported", line)
    missing = [k for k in _REQUIRED[kind] if k not in obj]
    if missing:
        raise DatasetError(f"missing fields {missing}", line)
    key = (obj["scenario_id"], tuple(obj["map"]), json.dumps(obj["starts"]), json.dumps(obj["goals"]))
    scenario = cache.get(key) if cache is not None else None
    if scenario is None:
        try:
            scenario = Scenario(
                parse_map("\n".join(obj["map"])),
                tuple(tuple(c) for c in obj["starts"]),
                tuple(tuple(c) for c in obj["goals"]),
                obj["scenario_id"],
            )
        except ValueError as exc:
            raise DatasetError(f"bad scenario: {exc}", line) from None
        if cache is not None:
            cache[key] = scenario
    positions = tuple(tuple(c) for c in obj["positions"])
    if len(positions) != scenario.num_agents:
        raise DatasetError("positions do not match the agent count", line)
    if kind == "labels":
        actions = tuple(_action(w, line) for w in obj["optimal_actions"])
        if len(actions) != scenario.num_agents:
            raise DatasetError("optimal_actions do not match the agent count", line)
        return LabelRecord(scenario, int(obj["t"]), positions, actions)
    for w in obj["parsed"]:
        if w != INVALID:
            _action(w, line)
    return EpisodeRecord(
        scenario,
        int(obj["t"]),
        positions,
        obj["prompt"],
        obj["raw_reply"],
        tuple(obj["parsed"]),
        tuple(_action(w, line) for w in obj["executed"]),
        obj["policy"],
        tuple(obj.get("fused", ())),
    )


def export_jsonl(records: Iterable[LabelRecord | EpisodeRecord], path) -> int:
    n = 0
    kind = None
    with open(path, "w") as fh:
        for rec in records:
            obj = record_to_json(rec)
            if kind is None:
                kind = obj["kind"]
            elif obj["kind"] != kind:
                raise DatasetError(f"cannot mix {kind!r} and {obj['kind']!r} records in one file")
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
            n += 1
    return n


def import_jsonl(path, kind: str | None = None) -> list:
    """Load and validate records; all lines must share one ``kind``."""
    records = []
    cache: dict = {}
    seen_kind = kind
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"unparseable JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict):
            raise DatasetError("record is not an object", lineno)
        if seen_kind is None:
            seen_kind = obj.get("kind")
        elif obj.get("kind") != seen_kind:
            raise DatasetError(f"record kind {obj.get('kind')!r} in a {seen_kind!r} file", lineno)
        records.append(record_from_json(obj, lineno, cache))
    return records


def group_by_scenario(records: Sequence) -> dict[str, list]:
    out: dict[str, list] = {}
    for rec in records:
        out.setdefault(rec.scenario.name, []).append(rec)
    return out
