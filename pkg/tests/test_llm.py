import json

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from narpath.core import Action, EpisodeState, GridMap, Scenario, max_steps, parse_map
from narpath.data import INVALID
from narpath.llm import (
    ClientError,
    Decision,
    OpenAICompatibleClient,
    RateLimiter,
    ResetState,
    ScriptedLLM,
    build_scene_prompt,
    parse_reply,
    reset_decision,
    run_episode,
    run_llm_episode,
)


def _scenario(h, w, starts, goals, obstacles=(), name="t"):
    return Scenario(GridMap(h, w, frozenset(obstacles)), tuple(starts), tuple(goals), name)


def test_prompt_first_line():
    sc = _scenario(8, 8, [(6, 7)], [(5, 5)], obstacles=[(2, 5), (1, 7), (6, 3)])
    prompt = build_scene_prompt(EpisodeState.initial(sc))
    lines = prompt.split("\n")
    assert lines[0] == "Agent 1 is at (6, 7), wants to go to (5, 5)."
    obstacle_line = next(l for l in lines if l.startswith("The coordinates of the obstacles"))
    for cell in ("(2,5)", "(1,7)", "(6,3)"):
        assert cell in obstacle_line
    assert "The lower-left cell is (0,0) and the lower-right cell is (0,7):" in lines


def test_prompt_empty_map():
    sc = _scenario(2, 2, [(0, 0)], [(1, 1)])
    prompt = build_scene_prompt(EpisodeState.initial(sc))
    assert "\n..\n..\n" in prompt
    assert "The coordinates of the obstacles:\n" in prompt


def test_prompt_map_round_trips():
    sc = _scenario(5, 7, [(0, 0), (4, 6)], [(4, 0), (0, 6)], obstacles=[(1, 1), (3, 5), (2, 2)])
    lines = build_scene_prompt(EpisodeState.initial(sc)).split("\n")
    start = next(i for i, l in enumerate(lines) if l.startswith("The lower-left")) + 1
    assert parse_map("\n".join(lines[start : start + 5])) == sc.map


def test_parse_happy_path():
    assert parse_reply("Agent 1: up\nAgent 2: stay", 2).actions() == (Action.UP, Action.STAY)


def test_parse_unknown_word():
    assert parse_reply("Agent 1: northwest", 1).proposals == (INVALID,)


def test_parse_free_form():
    text = "Let me think. The first agent is stuck, so Agent 2: left is the best move here."
    assert parse_reply(text, 2).proposals == (INVALID, "left")


def test_parse_last_wins_and_case():
    reply = parse_reply("AGENT 1: Up\nagent 1 : down\nAgent 3: left", 2)
    assert reply.proposals == ("down", INVALID)


@given(st.text())
def test_parse_is_total(text):
    reply = parse_reply(text, 3)
    assert len(reply.proposals) == 3
    assert all(a in Action for a in reply.actions())


@pytest.mark.parametrize(
    "rs,expected",
    [
        (ResetState(24, rounds=5), Decision.RESET),
        (ResetState(24, invalid_streak=3), Decision.RESET),
        (ResetState(24, total_steps=24), Decision.TERMINATE),
        (ResetState(24, rounds=4, invalid_streak=2, total_steps=10), Decision.CONTINUE),
    ],
)
def test_reset_decision(rs, expected):
    assert reset_decision(rs) is expected


def test_stub_one_agent_two_steps():
    log = run_llm_episode(_scenario(3, 3, [(0, 0)], [(0, 2)]), ScriptedLLM(invalid_rate=0.0), seed=0)
    assert log.final_positions == ((0, 2),) and len(log.steps) == 2
    assert [s.executed for s in log.steps] == [(Action.RIGHT,), (Action.RIGHT,)]


def test_stub_all_invalid_resets_and_terminates():
    sc = _scenario(4, 4, [(0, 0), (3, 3)], [(0, 3), (3, 0)])
    log = run_llm_episode(sc, ScriptedLLM(invalid_rate=1.0), seed=0)
    budget = max_steps(sc.map)
    assert len(log.steps) == budget and log.final_positions == sc.starts
    assert log.resets == budget // 3 - (budget % 3 == 0)
    assert all(s.executed == (Action.STAY, Action.STAY) for s in log.steps)


def test_all_agents_start_on_goals():
    sc = _scenario(3, 3, [(0, 0)], [(0, 0)])
    log = run_llm_episode(sc, ScriptedLLM(), seed=0)
    assert log.steps == [] and log.queries == 0 and log.final_positions == ((0, 0),)


def test_stub_deterministic():
    sc = _scenario(6, 6, [(0, 0), (5, 5), (0, 5)], [(5, 5), (0, 0), (5, 0)], obstacles=[(2, 2)])
    a = run_llm_episode(sc, ScriptedLLM(0.3, seed=4), seed=9)
    b = run_llm_episode(sc, ScriptedLLM(0.3, seed=4), seed=9)
    assert a == b


class _Recorder:
    """Chat client that records the message history length of every query."""

    def __init__(self, inner):
        self.inner = inner
        self.lengths = []

    def session(self, seed):
        inner = self.inner.session(seed)
        rec = self

        class S:
            def complete(self, messages):
                rec.lengths.append(len(messages))
                return inner.complete(messages)

        return S()


def test_history_bounded_and_resets_every_five_rounds():
    sc = _scenario(8, 8, [(0, 0), (7, 7)], [(7, 7), (0, 0)])
    rec = _Recorder(ScriptedLLM(0.5, seed=1))
    log = run_llm_episode(sc, rec, seed=0)
    assert max(rec.lengths) <= 2 + 2 * 5
    assert rec.lengths[:6] == [2, 4, 6, 8, 10, 2]
    assert all(a in Action for s in log.steps for a in s.executed)


def _completion(text):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


def test_client_request_shape():
    seen = []

    def handler(request):
        seen.append(request)
        return _completion("Agent 1: up")

    client = OpenAICompatibleClient(
        "m1", "http://x/v1", api_key="k", transport=httpx.MockTransport(handler), sleep=lambda s: None
    )
    assert client.chat([{"role": "user", "content": "hi"}], seed=5) == "Agent 1: up"
    (req,) = seen
    body = json.loads(req.content)
    assert str(req.url) == "http://x/v1/chat/completions"
    assert req.headers["authorization"] == "Bearer k"
    assert body == {"model": "m1", "messages": [{"role": "user", "content": "hi"}], "temperature": 0.0, "seed": 5}


def test_client_retries_with_backoff():
    calls, sleeps = [], []

    def handler(request):
        calls.append(1)
        return httpx.Response(500) if len(calls) < 3 else _completion("ok")

    client = OpenAICompatibleClient("m", "http://x", transport=httpx.MockTransport(handler), sleep=sleeps.append)
    assert client.chat([]) == "ok"
    assert sleeps == [1.0, 2.0]


def test_client_gives_up_and_episode_aborts():
    client = OpenAICompatibleClient(
        "m", "http://x", transport=httpx.MockTransport(lambda r: httpx.Response(503)), sleep=lambda s: None
    )
    with pytest.raises(ClientError):
        client.chat([])
    sc = _scenario(3, 3, [(0, 0)], [(2, 2)])
    log = run_llm_episode(sc, client, seed=0)
    assert log.aborted and log.steps == [] and log.final_positions == ((0, 0),)


def test_client_env_configuration(monkeypatch):
    monkeypatch.setenv("NARPATH_API_BASE", "http://env/v1/")
    monkeypatch.setenv("NARPATH_API_KEY", "secret")
    client = OpenAICompatibleClient("m")
    assert client.base_url == "http://env/v1" and client.api_key == "secret"
    monkeypatch.delenv("NARPATH_API_BASE")
    with pytest.raises(ValueError):
        OpenAICompatibleClient("m")


def test_live_episode_through_mock():
    client = OpenAICompatibleClient("m", "http://x", transport=httpx.MockTransport(lambda r: _completion("Agent 1: right")))
    log = run_llm_episode(_scenario(3, 3, [(0, 0)], [(0, 2)]), client, seed=0)
    assert log.final_positions == ((0, 2),) and log.policy == "live-llm" and log.queries == 2


def test_rate_limiter_spacing(monkeypatch):
    import narpath.llm as llm

    clock = [0.0]
    slept = []
    monkeypatch.setattr(llm.time, "monotonic", lambda: clock[0])
    monkeypatch.setattr(llm.time, "sleep", lambda s: slept.append(s))
    limiter = RateLimiter(requests_per_minute=120)
    limiter.wait()
    limiter.wait()
    limiter.wait()
    assert slept == [0.5, 1.0]


def test_custom_decider_logs_fused():
    sc = _scenario(3, 3, [(0, 0)], [(0, 2)])
    decide = lambda state, parsed: ((Action.RIGHT,), ("right",))
    log = run_episode(sc, ScriptedLLM(1.0), 0, decide)
    assert log.final_positions == ((0, 2),)
    assert log.steps[0].proposed == (INVALID,) and log.steps[0].fused == ("right",)
