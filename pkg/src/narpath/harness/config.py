"""Run configuration from a ``key = value`` text file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class RunConfig:
    seed: int
    height: int = 8
    width: int = 8
    density: float = 0.1
    agents: int = 4
    scenarios: int = 100
    test_scenarios: int = 32
    policy: str = "llm-nar"
    client: str = "stub"
    model: str = "gpt-3.5-turbo"
    base_url: str = ""
    temperature: float = 0.0
    requests_per_minute: float = 0.0
    invalid_rate: float = 0.1
    nar_steps: int = 20_000
    fusion_steps: int = 5000
    batch_size: int = 32
    lr: float = 1e-3
    node_budget: int = 100_000
    workers: int = 1

    def __post_init__(self):
        if not isinstance(self.seed, int):
            raise ValueError("seed is mandatory (set it in the config file or pass --seed)")
        if not 0.0 <= self.density <= 0.3:
            raise ValueError(f"density {self.density} outside [0, 0.3]")
        if not 1 <= self.agents <= 32:
            raise ValueError(f"agents {self.agents} outside [1, 32]")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Values are coerced to the field types."""
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        kind = types[key]
        out[key] = int(value) if kind == "int" else float(value) if kind == "float" else value
    return out


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    values = parse_config(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    values.setdefault("seed", None)
    return RunConfig(**values)
