"""Acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured value.
Run alone with ``pytest tests/test_acceptance.py -v -s``.
"""

import filecmp
import random
import sys
import time

import numpy as np
import pytest

from narpath import nn
from narpath.cbs import Infeasible, cbs_solve, joint_oracle
from narpath.core import EpisodeState, GridMap, Scenario, detect_conflicts, step, trajectory_metrics, validate_trajectory
from narpath.fusion import (
    NUM_LAYERS,
    TokenInputs,
    fusion_forward,
    fusion_loss,
    fusion_samples,
    init_fusion_params,
    train_fusion,
)
from narpath.harness.config import RunConfig
from narpath.harness.evaluate import evaluate, make_policy
from narpath.harness.pipeline import collect_episodes, label_dataset, run_pipeline
from narpath.harness.scenarios import ScenarioSpec, gen_scenarios
from narpath.llm import ScriptedLLM
from narpath.nar import Batchable, agreement, init_nar_params, nar_loss, pretrain_nar, state_inputs

from conftest import ACCEPTANCE_LINES, random_scenario

# pinned thresholds
CBS_MIN_INSTANCES = 50
CBS_MAX_SECONDS = 60.0
MIN_TRANSITIONS = 1000
GRAD_MAX_REL_ERR = 1e-4
NAR_TRAIN_AGREEMENT = 0.90
NAR_HELDOUT_AGREEMENT = 0.70
NAR_MAX_SECONDS = 15 * 60
NAR_MAX_STEPS = 20_000
FUSION_STEPS = 5000
HELDOUT_SCENARIOS = 32
DELTA_SLACK = 0.02
CBS_RUNTIME_RATIO = 3.0
FUSED_RUNTIME_RATIO = 2.0

EVALUATED = []  # every table produced here, for the validity criterion


@pytest.fixture
def report(capsys):
    def emit(criterion: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        with capsys.disabled():
            print("\n" + line)
        ACCEPTANCE_LINES.append(line)
        assert ok, line

    return emit


def _oracle_instance(rng: random.Random) -> Scenario:
    h, w = rng.randint(3, 6), rng.randint(3, 6)
    cells = [(r, c) for r in range(h) for c in range(w)]
    obstacles = frozenset(rng.sample(cells, int(rng.uniform(0, 0.1) * len(cells))))
    free = [c for c in cells if c not in obstacles]
    n = rng.randint(2, 3)
    return Scenario(GridMap(h, w, obstacles), tuple(rng.sample(free, n)), tuple(rng.sample(free, n)))


def test_1_cbs_matches_oracle(report):
    rng = random.Random(2024)
    t0 = time.perf_counter()
    checked = mismatches = 0
    while checked < 100:
        sc = _oracle_instance(rng)
        try:
            expected = joint_oracle(sc)
        except Infeasible:
            continue
        checked += 1
        mismatches += cbs_solve(sc).sum_of_costs != expected
    elapsed = time.perf_counter() - t0
    ok = checked >= CBS_MIN_INSTANCES and mismatches == 0 and elapsed < CBS_MAX_SECONDS
    report(1, ok, f"{checked} instances (2-3 agents, <= 6x6), {mismatches} mismatches, {elapsed:.2f}s (limit {CBS_MAX_SECONDS:.0f}s)")


# ---------------------------------------------------------------- criterion 3


def _sum(t):
    return nn.matmul(nn.reshape(t, (1, -1)), np.ones((t.data.size, 1)))


KERNELS = {
    "matmul": (lambda p: nn.matmul(p["a"], p["b"]), {"a": (3, 4), "b": (4, 2)}),
    "add": (lambda p: nn.mul(nn.add(p["a"], p["b"]), p["a"]), {"a": (3, 4), "b": (4,)}),
    "mul": (lambda p: nn.mul(p["a"], p["b"]), {"a": (3, 4), "b": (1,)}),
    "scale": (lambda p: nn.mul(nn.scale(p["a"], 0.3), p["a"]), {"a": (2, 3)}),
    "relu": (lambda p: nn.relu(p["a"]), {"a": (4, 5)}),
    "tanh": (lambda p: nn.tanh(p["a"]), {"a": (4, 5)}),
    "transpose": (lambda p: nn.matmul(nn.transpose(p["a"]), p["b"]), {"a": (3, 2), "b": (3, 2)}),
    "reshape": (lambda p: nn.matmul(nn.reshape(p["a"], (3, 4)), p["b"]), {"a": (2, 6), "b": (4, 2)}),
    "softmax_rows": (lambda p: nn.mul(nn.softmax_rows(p["a"]), p["b"]), {"a": (3, 5), "b": (3, 5)}),
    "cross_entropy": (lambda p: nn.cross_entropy(p["a"], [0, 3, 4]), {"a": (3, 5)}),
    "embedding": (lambda p: nn.mul(nn.embedding(p["t"], [0, 2, 2, 1]), p["w"]), {"t": (3, 4), "w": (4, 4)}),
    "conv2d": (
        lambda p: nn.mul(nn.conv2d(p["x"], p["w"], p["b"]), p["g"]),
        {"x": (2, 3, 9, 9), "w": (4, 3, 3, 3), "b": (4,), "g": (2, 4, 4, 4)},
    ),
    "linear": (lambda p: nn.linear(p["x"], p["w"], p["b"]), {"x": (3, 4), "w": (4, 5), "b": (5,)}),
}


def _gated_fusion_params(seed):
    rng = np.random.default_rng(seed)
    params = init_fusion_params(seed)
    for name in params.names():
        if name.startswith("tok.") or name.endswith(".b"):
            params.params[name][...] = rng.normal(scale=0.5, size=params[name].shape)
    for l in range(NUM_LAYERS):
        params.params[f"x{l}.alpha"][:] = 0.6
        params.params[f"x{l}.beta"][:] = -0.4
    return params


def test_3_gradients(report):
    rng = np.random.default_rng(3)
    errors = {}
    for name, (fn, shapes) in KERNELS.items():
        params = {k: rng.normal(size=s) for k, s in shapes.items()}
        if name == "relu":
            params["a"] = np.where(np.abs(params["a"]) < 0.1, 0.5, params["a"])
        errors[name] = nn.grad_check(lambda p, fn=fn: _sum(fn(p)), params)

    sc = gen_scenarios(ScenarioSpec(8, 8, 0.1, 2, 1, seed=3))[0]
    state = EpisodeState.initial(sc)
    obs, adj = state_inputs(state)
    nar = init_nar_params(3)
    errors["nar_loss"] = nn.grad_check(
        lambda p: nar_loss(p, obs, adj, np.array([0, 3])), nar.params, max_coords=64, seed=3
    )

    fusion = _gated_fusion_params(3)
    tokens = TokenInputs.concat([TokenInputs.from_state(["up", "invalid"], state), TokenInputs.from_state(["left", "stay"], state)])
    x_l = rng.normal(size=(4, 64))
    errors["fusion_loss"] = nn.grad_check(
        lambda p: fusion_loss(p, tokens, x_l, np.array([0, 4, 2, 1])), fusion.params, max_coords=24, seed=3
    )
    worst = max(errors, key=errors.get)
    report(
        3,
        errors[worst] < GRAD_MAX_REL_ERR,
        f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e} (limit {GRAD_MAX_REL_ERR:.0e})",
    )


def test_4_gate_closed_identity(report):
    params = init_fusion_params(4)
    rng = np.random.default_rng(4)
    for name in ("tok.action", "tok.pos", "tok.slot", "head.b"):
        params.params[name][...] = rng.normal(size=params[name].shape)
    scenarios = gen_scenarios(ScenarioSpec(8, 8, 0.1, 4, 5, seed=4))
    trials = identical = 0
    for sc in scenarios:
        state = EpisodeState.initial(sc)
        proposals = ["up", "invalid", "stay", "right"]
        base = fusion_forward(proposals, state, None, rng.normal(size=(4, 64)), params)
        for scale in (1e-3, 1.0, 1e3, 1e6):
            trials += 1
            identical += np.array_equal(base, fusion_forward(proposals, state, None, rng.normal(size=(4, 64)) * scale, params))
    report(4, identical == trials, f"{identical}/{trials} perturbations of X_L left logits bit-identical")


def test_7_metrics_exactness(report):
    goals = [(0, 0), (0, 1), (0, 2), (0, 3)]
    r = trajectory_metrics([[(1, 0), (1, 1), (1, 2), (1, 3)], [(0, 0), (0, 1), (0, 2), (1, 3)]], goals, 12).success_rate
    traj = [[(9, 9), (8, 8)]] * 10 + [[(0, 0), (8, 8)]] * 4 + [[(0, 0), (5, 5)]]
    d = trajectory_metrics(traj, [(0, 0), (5, 5)], 24).average_step
    still = trajectory_metrics([[(1, 1)]], [(1, 1)], 24)
    ok = r == 0.75 and d == 0.5 and (still.success_rate, still.average_step) == (1.0, 0.0)
    report(7, ok, f"R = {r!r} (expect 0.75), delta = {d!r} (expect 0.5), start-on-goal R/delta = {still.success_rate}/{still.average_step}")


# ---------------------------------------------------------------- criterion 5


def test_5_nar_imitation(report):
    t0 = time.perf_counter()
    train = gen_scenarios(ScenarioSpec(8, 8, 0.0, 4, 100, seed=50))
    held = gen_scenarios(ScenarioSpec(8, 8, 0.0, 4, HELDOUT_SCENARIOS, seed=51))
    labels = label_dataset(train)
    params, curve = pretrain_nar(labels, steps=NAR_MAX_STEPS, seed=0, log_every=1000, target_agreement=0.99)
    train_agree = curve[-1].agreement
    held_agree = agreement(Batchable.from_labels(label_dataset(held)), params)
    elapsed = time.perf_counter() - t0
    ok = train_agree >= NAR_TRAIN_AGREEMENT and held_agree >= NAR_HELDOUT_AGREEMENT and elapsed < NAR_MAX_SECONDS
    report(
        5,
        ok,
        f"train agreement {train_agree:.3f} (>= {NAR_TRAIN_AGREEMENT}), held-out {held_agree:.3f} "
        f"(>= {NAR_HELDOUT_AGREEMENT}), {curve[-1].step} steps, {elapsed:.0f}s",
    )


# ---------------------------------------------------------------- criteria 6 and 8


@pytest.fixture(scope="module")
def trained():
    train = gen_scenarios(ScenarioSpec(8, 8, 0.1, 4, 100, seed=60))
    nar, _ = pretrain_nar(label_dataset(train), steps=NAR_MAX_STEPS, seed=0, log_every=1000, target_agreement=0.99)
    client = ScriptedLLM(0.1, seed=0)
    episodes = collect_episodes(train, client, seed=0)
    fusion, curve = train_fusion(fusion_samples(episodes), nar, steps=FUSION_STEPS, seed=0)
    return client, nar, fusion, curve


def test_6_fusion_budget_and_improvement(trained, report):
    client, nar, fusion, curve = trained
    held = gen_scenarios(ScenarioSpec(8, 8, 0.1, 4, HELDOUT_SCENARIOS, seed=61))
    stub = evaluate(make_policy("stub-llm", client), held, seed=0)
    fused = evaluate(make_policy("llm-nar", client, nar, fusion), held, seed=0)
    EVALUATED.extend([stub, fused])
    s, f = stub.rows[0], fused.rows[0]
    ok = (
        fusion.step_count == FUSION_STEPS
        and curve[-1].step == FUSION_STEPS
        and f.success_rate >= s.success_rate
        and f.average_step <= s.average_step + DELTA_SLACK
    )
    report(
        6,
        ok,
        f"{fusion.step_count} fusion steps; R fused {f.success_rate:.3f} vs stub {s.success_rate:.3f}; "
        f"delta fused {f.average_step:.3f} vs stub {s.average_step:.3f} (+{DELTA_SLACK})",
    )


def test_8_runtime_trend(trained, report):
    client, nar, fusion, _ = trained
    small = gen_scenarios(ScenarioSpec(20, 20, 0.1, 4, 8, seed=80))
    large = gen_scenarios(ScenarioSpec(20, 20, 0.1, 16, 8, seed=80))
    tables = {}
    for tag, scenarios in (("n4", small), ("n16", large)):
        tables["cbs", tag] = evaluate(make_policy("cbs"), scenarios)
        tables["fused", tag] = evaluate(make_policy("llm-nar", client, nar, fusion), scenarios, repeats=1)
    EVALUATED.extend(tables.values())
    rt = {k: t.rows[0].runtime for k, t in tables.items()}
    cbs_ratio = rt["cbs", "n16"] / rt["cbs", "n4"]
    fused_ratio = rt["fused", "n16"] / rt["fused", "n4"]
    ok = cbs_ratio > CBS_RUNTIME_RATIO and fused_ratio < FUSED_RUNTIME_RATIO
    report(
        8,
        ok,
        f"CBS mean {rt['cbs', 'n4']:.4f}s -> {rt['cbs', 'n16']:.4f}s (x{cbs_ratio:.1f}, need > {CBS_RUNTIME_RATIO}); "
        f"fused {rt['fused', 'n4']:.4f}s -> {rt['fused', 'n16']:.4f}s (x{fused_ratio:.2f}, need < {FUSED_RUNTIME_RATIO})",
    )


def test_2_validity(report):
    rng = random.Random(22)
    transitions = violations = 0
    for _ in range(MIN_TRANSITIONS // 10 + 20):
        sc = random_scenario(rng, max_side=8, max_agents=8, max_density=0.3)
        state = EpisodeState.initial(sc)
        for _ in range(10):
            proposal = [rng.choice(list(range(5))) for _ in range(sc.num_agents)]
            new, _ = step(state, proposal)
            violations += len(detect_conflicts(state.positions, new.positions))
            transitions += 1
            state = new
    # small policy sweep so the check never depends on test order
    scenarios = gen_scenarios(ScenarioSpec(8, 8, 0.2, 6, 5, seed=20))
    client = ScriptedLLM(0.2)
    for name in ("cbs", "nar", "stub-llm", "llm-nar"):
        EVALUATED.append(evaluate(make_policy(name, client, init_nar_params(0), init_fusion_params(0)), scenarios, repeats=2))
    episodes = 0
    for table in EVALUATED:
        for res in table.episodes:
            violations += len(validate_trajectory(res.scenario.map, res.log.trajectory))
            episodes += 1
    ok = transitions >= MIN_TRANSITIONS and violations == 0
    report(2, ok, f"{transitions} random transitions and {episodes} evaluated episodes, {violations} conflicts")


def test_9_pipeline_determinism(tmp_path, report):
    config = RunConfig(seed=9, scenarios=12, test_scenarios=4, nar_steps=300, fusion_steps=200)
    a = run_pipeline(config, tmp_path / "a")
    b = run_pipeline(config, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files = [f for f in files if f.name != "timings.csv"]
    same = [f for f in files if filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)]
    ok = len(files) > 0 and len(same) == len(files) and set(a) == set(b)
    report(9, ok, f"{len(same)}/{len(files)} artifacts bit-identical across two runs")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
