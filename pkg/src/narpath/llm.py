"""Prompt-driven MAPF with a chat model.

Each timestep the model receives a scene description of the current state
and answers with one action per agent. Unparseable answers become ``Stay``.
The conversation is restarted from the current positions every ``m`` rounds
or after three consecutive rounds with no valid action at all.
"""

from __future__ import annotations

import enum
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import httpx

from .core import Action, EpisodeLog, EpisodeState, Scenario, StepRecord, max_steps, render_map, step
from .data import INVALID

log = logging.getLogger(__name__)

SYSTEM_PROMPT = (
    "You are the solver for multi-agent path finding. Agents move on a grid one step at a time: "
    "up (row + 1), down (row - 1), left (column - 1), right (column + 1) or stay. Two agents may not "
    "occupy the same cell or swap cells in one step, and no agent may enter an obstacle. "
    "Guide every agent to its goal."
)
MAP_LEGEND = (
    "The map is as follows, where '@' denotes a cell with an obstacle that an agent cannot pass, "
    "and '.' denotes an empty cell that an agent can pass."
)
REPLY_FORMAT = "Reply with one line per agent: 'Agent <i>: <up|down|left|right|stay>'"
ROUNDS_BEFORE_RESET = 5
INVALID_ROUNDS_BEFORE_RESET = 3

_WORDS = {a.word: a for a in Action}
_REPLY_LINE = re.compile(r"agent\s*(\d+)\s*:\s*([a-z]+)", re.IGNORECASE)


def _cell(c) -> str:
    return f"({c[0]},{c[1]})"


def build_scene_prompt(state: EpisodeState, scenario: Scenario | None = None) -> str:
    scenario = scenario or state.scenario
    grid = scenario.map
    lines = [
        f"Agent {i + 1} is at ({r}, {c}), wants to go to ({gr}, {gc})."
        for i, ((r, c), (gr, gc)) in enumerate(zip(state.positions, scenario.goals))
    ]
    lines.append(MAP_LEGEND)
    lines.append(f"The lower-left cell is (0,0) and the lower-right cell is (0,{grid.width - 1}):")
    lines.append(render_map(grid))
    obstacles = " ".join(_cell(c) for c in sorted(grid.obstacles))
    lines.append(f"The coordinates of the obstacles: {obstacles}".rstrip())
    lines.append(f"The coordinates of the agents: {' '.join(_cell(p) for p in state.positions)}.")
    lines.append(REPLY_FORMAT)
    return "\n".join(lines)


@dataclass(frozen=True)
class ParsedReply:
    proposals: tuple[str, ...]  # action words or INVALID
    raw: str

    def actions(self) -> tuple[Action, ...]:
        """Executable actions: anything invalid is corrected to ``Stay``."""
        return tuple(Action.STAY if w == INVALID else _WORDS[w] for w in self.proposals)

    @property
    def all_invalid(self) -> bool:
        return all(w == INVALID for w in self.proposals)


def parse_reply(text: str, n: int) -> ParsedReply:
    proposals = [INVALID] * n
    for match in _REPLY_LINE.finditer(text or ""):
        i = int(match.group(1)) - 1
        if 0 <= i < n:
            word = match.group(2).lower()
            proposals[i] = word if word in _WORDS else INVALID
    return ParsedReply(tuple(proposals), text or "")


class Decision(enum.Enum):
    CONTINUE = "continue"
    RESET = "reset"
    TERMINATE = "terminate"


@dataclass
class ResetState:
    budget: int
    rounds: int = 0  # rounds since the last (re)start of the conversation
    invalid_streak: int = 0
    total_steps: int = 0


def reset_decision(rs: ResetState, m: int = ROUNDS_BEFORE_RESET) -> Decision:
    if rs.total_steps >= rs.budget:
        return Decision.TERMINATE
    if rs.rounds >= m or rs.invalid_streak >= INVALID_ROUNDS_BEFORE_RESET:
        return Decision.RESET
    return Decision.CONTINUE


# ---------------------------------------------------------------- clients


class ClientError(RuntimeError):
    """The chat endpoint failed after all retries."""


class ChatSession(Protocol):
    def complete(self, messages: list[dict]) -> str: ...


class ChatClient(Protocol):
    def session(self, seed: int) -> ChatSession: ...


_SCENE_AGENT = re.compile(r"Agent (\d+) is at \((-?\d+), (-?\d+)\), wants to go to \((-?\d+), (-?\d+)\)\.")
_CELL = re.compile(r"\((\d+),(\d+)\)")


class ScriptedLLM:
    """Offline stand-in for a chat model.

    Reads the latest scene prompt and moves each agent greedily toward its
    goal, trying the vertical move first and skipping moves into obstacles
    or off the map; other agents are ignored. Each agent's line is replaced
    by an unusable word with probability ``invalid_rate``.
    """

    policy_name = "stub-llm"

    def __init__(self, invalid_rate: float = 0.1, seed: int = 0):
        self.invalid_rate = invalid_rate
        self.seed = seed

    def session(self, seed: int) -> "ScriptedSession":
        return ScriptedSession(self, random.Random(f"{self.seed}:{seed}"))


class ScriptedSession:
    def __init__(self, owner: ScriptedLLM, rng: random.Random):
        self.owner = owner
        self.rng = rng

    def complete(self, messages: list[dict]) -> str:
        scene = next(m["content"] for m in reversed(messages) if m["role"] == "user")
        lines = scene.split("\n")
        agents = [tuple(int(v) for v in m.groups()) for m in map(_SCENE_AGENT.match, lines) if m]
        start = next(i for i, line in enumerate(lines) if line.startswith("The lower-left cell")) + 1
        map_rows = []
        for line in lines[start:]:
            if not line or set(line) - {".", "@"}:
                break
            map_rows.append(line)
        height, width = len(map_rows), len(map_rows[0])
        obstacle_line = next(line for line in lines if line.startswith("The coordinates of the obstacles"))
        obstacles = {(int(r), int(c)) for r, c in _CELL.findall(obstacle_line)}
        out = []
        for idx, r, c, gr, gc in agents:
            word = "stay"
            candidates = []
            if gr != r:
                candidates.append(Action.UP if gr > r else Action.DOWN)
            if gc != c:
                candidates.append(Action.RIGHT if gc > c else Action.LEFT)
            for act in candidates:
                nr, nc = act.apply((r, c))
                if 0 <= nr < height and 0 <= nc < width and (nr, nc) not in obstacles:
                    word = act.word
                    break
            if self.rng.random() < self.owner.invalid_rate:
                word = "hover"
            out.append(f"Agent {idx}: {word}")
        return "\n".join(out)


class RateLimiter:
    """Spaces calls at least ``60 / requests_per_minute`` seconds apart across threads."""

    def __init__(self, requests_per_minute: float):
        self.interval = 60.0 / requests_per_minute if requests_per_minute > 0 else 0.0
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self):
        with self._lock:
            now = time.monotonic()
            slot = max(now, self._next)
            self._next = slot + self.interval
        if slot > now:
            time.sleep(slot - now)


class OpenAICompatibleClient:
    """Chat-completions client for any OpenAI-compatible HTTP endpoint."""

    policy_name = "live-llm"

    def __init__(
        self,
        model: str,
        base_url: str | None = None,
        api_key: str | None = None,
        temperature: float = 0.0,
        timeout: float = 60.0,
        retries: int = 3,
        backoff: float = 1.0,
        rate_limiter: RateLimiter | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        base_url = base_url or os.environ.get("NARPATH_API_BASE")
        if not base_url:
            raise ValueError("no endpoint: pass base_url or set NARPATH_API_BASE")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("NARPATH_API_KEY", "")
        self.model = model
        self.temperature = temperature
        self.retries = retries
        self.backoff = backoff
        self.rate_limiter = rate_limiter
        self._sleep = sleep
        self._http = httpx.Client(timeout=timeout, transport=transport)

    def session(self, seed: int) -> "_LiveSession":
        return _LiveSession(self, seed)

    def chat(self, messages: list[dict], seed: int | None = None) -> str:
        body = {"model": self.model, "messages": messages, "temperature": self.temperature}
        if seed is not None:
            body["seed"] = seed
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last_error: Exception | None = None
        for attempt in range(self.retries):
            if self.rate_limiter is not None:
                self.rate_limiter.wait()
            try:
                resp = self._http.post(f"{self.base_url}/chat/completions", json=body, headers=headers)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last_error = exc
                log.warning("chat request failed (attempt %d/%d): %s", attempt + 1, self.retries, exc)
                if attempt + 1 < self.retries:
                    self._sleep(self.backoff * 2**attempt)
        raise ClientError(f"chat request failed after {self.retries} attempts: {last_error}")

    def close(self):
        self._http.close()


class _LiveSession:
    def __init__(self, client: OpenAICompatibleClient, seed: int):
        self.client = client
        self.seed = seed

    def complete(self, messages: list[dict]) -> str:
        return self.client.chat(messages, seed=self.seed)


# ---------------------------------------------------------------- episodes

Decider = Callable[[EpisodeState, ParsedReply], tuple[Sequence[Action], Sequence[str]]]


def _llm_only(state: EpisodeState, parsed: ParsedReply):
    return parsed.actions(), ()


def run_episode(
    scenario: Scenario,
    client: ChatClient,
    seed: int,
    decide: Decider = _llm_only,
    policy: str = "llm",
    m: int = ROUNDS_BEFORE_RESET,
) -> EpisodeLog:
    """Prompt/parse/step loop shared by the LLM-only and fused policies.

    ``decide`` maps the parsed reply to executed proposals plus optional
    logged words for the fused actions.
    """
    state = EpisodeState.initial(scenario)
    rs = ResetState(max_steps(scenario.map))
    episode = EpisodeLog(scenario, policy)
    session = client.session(seed)
    history: list[dict] = []
    n = scenario.num_agents
    while not state.all_done:
        decision = reset_decision(rs, m)
        if decision is Decision.TERMINATE:
            break
        if decision is Decision.RESET or not history:
            if history:
                episode.resets += 1
            history = [{"role": "system", "content": SYSTEM_PROMPT}]
            rs.rounds = 0
            rs.invalid_streak = 0
        prompt = build_scene_prompt(state, scenario)
        messages = history + [{"role": "user", "content": prompt}]
        try:
            reply = session.complete(messages)
        except ClientError as exc:
            log.error("episode %s aborted: %s", scenario.name, exc)
            episode.aborted = True
            break
        episode.queries += 1
        parsed = parse_reply(reply, n)
        proposal, fused = decide(state, parsed)
        new_state, executed = step(state, proposal)
        episode.steps.append(
            StepRecord(state.t, state.positions, executed, parsed.proposals, prompt, reply, tuple(fused))
        )
        history = messages + [{"role": "assistant", "content": reply}]
        rs.rounds += 1
        rs.total_steps += 1
        rs.invalid_streak = rs.invalid_streak + 1 if parsed.all_invalid else 0
        state = new_state
    episode.final_positions = state.positions
    return episode


def run_llm_episode(scenario: Scenario, client: ChatClient, seed: int) -> EpisodeLog:
    return run_episode(scenario, client, seed, policy=getattr(client, "policy_name", "llm"))
