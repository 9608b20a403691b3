"""Gated cross-attention head fusing LLM proposals with NAR embeddings.

Parsed LLM proposals become token rows (action symbol + position features +
agent slot), pass one residual self-attention block, then three gated
cross-attention layers whose queries come from the tokens and keys/values
from the frozen NAR embeddings. Both gates of every layer start closed
(``tanh(0) = 0``), so an untrained head sees only the LLM pathway.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .cbs import BudgetExhausted, Infeasible, cbs_solve, extract_labels
from .core import Action, EpisodeLog, EpisodeState, Scenario
from .data import INVALID, EpisodeRecord
from .llm import ChatClient, ParsedReply, run_episode
from .nar import EMBED_DIM, NUM_ACTIONS, nar_embed, state_inputs
from .nn import ParamStore, Tensor

log = logging.getLogger(__name__)

NUM_LAYERS = 3
MAX_AGENTS = 32
FFN_DIM = 128
NUM_SYMBOLS = 6  # five actions + INVALID
INVALID_SYMBOL = 5
_BLOCKED = -1e9
_SYMBOL = {a.word: int(a) for a in Action} | {INVALID: INVALID_SYMBOL}


class CapacityError(ValueError):
    pass


def _layout():
    d = EMBED_DIM
    yield "tok.action", (NUM_SYMBOLS, d), None
    yield "tok.pos", (4, d), None
    yield "tok.slot", (MAX_AGENTS, d), None
    for name in ("q", "k", "v", "o"):
        yield f"sa.{name}", (d, d), d
    for l in range(NUM_LAYERS):
        for name in ("q", "k", "v"):
            yield f"x{l}.{name}", (d, d), d
        yield f"x{l}.ff1.w", (d, FFN_DIM), d
        yield f"x{l}.ff1.b", (FFN_DIM,), d
        yield f"x{l}.ff2.w", (FFN_DIM, d), FFN_DIM
        yield f"x{l}.ff2.b", (d,), FFN_DIM
        yield f"x{l}.alpha", (1,), None
        yield f"x{l}.beta", (1,), None
    yield "head.w", (d, NUM_ACTIONS), d
    yield "head.b", (NUM_ACTIONS,), None


def init_fusion_params(seed: int = 0) -> ParamStore:
    """Weights uniform in +-1/sqrt(fan_in); token tables, biases and gates start at zero."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape, fan_in in _layout():
        if fan_in is None or name.endswith(".b"):
            store.add(name, np.zeros(shape))
        else:
            store.add(name, nn.uniform_init(rng, shape, fan_in))
    return store


@dataclass
class TokenInputs:
    """Constant per-agent inputs that become the token matrix."""

    symbols: np.ndarray  # (M,) ints in [0, 6)
    features: np.ndarray  # (M, 4)
    slots: np.ndarray  # (M,)
    groups: np.ndarray  # (M,) record id; attention never crosses records

    @classmethod
    def from_state(cls, parsed: ParsedReply | Sequence[str], state: EpisodeState) -> "TokenInputs":
        proposals = parsed.proposals if isinstance(parsed, ParsedReply) else tuple(parsed)
        n = state.scenario.num_agents
        if n > MAX_AGENTS:
            raise CapacityError(f"{n} agents exceed the {MAX_AGENTS}-slot token table")
        if len(proposals) != n:
            raise nn.ShapeError(f"{len(proposals)} proposals for {n} agents")
        grid = state.scenario.map
        feats = np.array(
            [
                [r / grid.height, c / grid.width, (gr - r) / grid.height, (gc - c) / grid.width]
                for (r, c), (gr, gc) in zip(state.positions, state.scenario.goals)
            ]
        )
        return cls(
            np.array([_SYMBOL[w] for w in proposals], dtype=np.int64),
            feats,
            np.arange(n, dtype=np.int64),
            np.zeros(n, dtype=np.int64),
        )

    @classmethod
    def concat(cls, parts: Sequence["TokenInputs"]) -> "TokenInputs":
        return cls(
            np.concatenate([p.symbols for p in parts]),
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.slots for p in parts]),
            np.concatenate([np.full(len(p.symbols), i, dtype=np.int64) for i, p in enumerate(parts)]),
        )

    def mask(self) -> np.ndarray | None:
        if np.all(self.groups == self.groups[0]):
            return None
        return np.where(self.groups[:, None] == self.groups[None, :], 0.0, _BLOCKED)


def token_tensor(p: Mapping[str, Tensor], tokens: TokenInputs) -> Tensor:
    theta = nn.add(nn.embedding(p["tok.action"], tokens.symbols), nn.matmul(tokens.features, p["tok.pos"]))
    return nn.add(theta, nn.embedding(p["tok.slot"], tokens.slots))


def _attention(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    scores = nn.scale(nn.matmul(q, nn.transpose(k)), 1.0 / math.sqrt(EMBED_DIM))
    return nn.matmul(nn.softmax_rows(scores, mask), v)


def self_attention(p: Mapping[str, Tensor], theta: Tensor, mask=None) -> Tensor:
    att = _attention(nn.matmul(theta, p["sa.q"]), nn.matmul(theta, p["sa.k"]), nn.matmul(theta, p["sa.v"]), mask)
    return nn.add(theta, nn.matmul(att, p["sa.o"]))


def gated_xattn_tensors(p: Mapping[str, Tensor], layer: int, theta: Tensor, x_l, mask=None) -> Tensor:
    pre = f"x{layer}."
    x_l = nn.as_tensor(x_l)
    if theta.shape[1] != EMBED_DIM or x_l.shape[1] != EMBED_DIM:
        raise nn.ShapeError(f"gated cross-attention needs width {EMBED_DIM}: {theta.shape}, {x_l.shape}")
    if theta.shape[0] != x_l.shape[0]:
        raise nn.ShapeError(f"token rows {theta.shape[0]} != embedding rows {x_l.shape[0]}")
    cross = _attention(nn.matmul(theta, p[pre + "q"]), nn.matmul(x_l, p[pre + "k"]), nn.matmul(x_l, p[pre + "v"]), mask)
    y = nn.add(theta, nn.mul(nn.tanh(p[pre + "alpha"]), cross))
    hidden = nn.relu(nn.linear(y, p[pre + "ff1.w"], p[pre + "ff1.b"]))
    ffn = nn.linear(hidden, p[pre + "ff2.w"], p[pre + "ff2.b"])
    return nn.add(y, nn.mul(nn.tanh(p[pre + "beta"]), ffn))


def fusion_logits_tensors(p: Mapping[str, Tensor], tokens: TokenInputs, x_l) -> Tensor:
    mask = tokens.mask()
    t = self_attention(p, token_tensor(p, tokens), mask)
    for layer in range(NUM_LAYERS):
        t = gated_xattn_tensors(p, layer, t, x_l, mask)
    return nn.linear(t, p["head.w"], p["head.b"])


def embed_tokens(parsed, state: EpisodeState, scenario: Scenario | None, params: ParamStore) -> np.ndarray:
    if scenario is not None and scenario is not state.scenario:
        state = EpisodeState(scenario, state.positions, state.t)
    return token_tensor(params.tensors(False), TokenInputs.from_state(parsed, state)).data


def gated_xattn_layer(theta: np.ndarray, x_l: np.ndarray, params: ParamStore, layer: int) -> np.ndarray:
    return gated_xattn_tensors(params.tensors(False), layer, nn.Tensor(theta), x_l).data


def fusion_forward(parsed, state: EpisodeState, scenario: Scenario | None, x_l: np.ndarray, params: ParamStore) -> np.ndarray:
    if scenario is not None and scenario is not state.scenario:
        state = EpisodeState(scenario, state.positions, state.t)
    tokens = TokenInputs.from_state(parsed, state)
    return fusion_logits_tensors(params.tensors(False), tokens, np.asarray(x_l, dtype=np.float64)).data


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class FusionSample:
    state: EpisodeState
    proposals: tuple[str, ...]
    optimal: tuple[Action, ...]


def expert_actions(state: EpisodeState, node_budget: int = 20_000) -> tuple[Action, ...] | None:
    """First joint action of a CBS plan re-solved from the current positions."""
    if state.all_done:
        return (Action.STAY,) * state.scenario.num_agents
    sc = state.scenario
    try:
        solution = cbs_solve(Scenario(sc.map, state.positions, sc.goals, sc.name), node_budget)
    except (Infeasible, BudgetExhausted):
        return None
    return extract_labels(solution)[0]


def fusion_samples(records: Sequence[EpisodeRecord], node_budget: int = 20_000) -> list[FusionSample]:
    """Pair each LLM timestep with fresh CBS labels; timesteps CBS cannot solve are dropped."""
    out = []
    for rec in records:
        state = EpisodeState(rec.scenario, rec.positions, rec.t)
        optimal = expert_actions(state, node_budget)
        if optimal is None:
            log.warning("no expert label for %s t=%d; skipped", rec.scenario.name, rec.t)
            continue
        out.append(FusionSample(state, tuple(rec.parsed), optimal))
    return out


@dataclass
class FusionBatchable:
    tokens: list[TokenInputs]
    x_l: list[np.ndarray]
    targets: list[np.ndarray]

    @classmethod
    def build(cls, samples: Sequence[FusionSample], nar: ParamStore) -> "FusionBatchable":
        tokens, xs, targets = [], [], []
        for s in samples:
            tokens.append(TokenInputs.from_state(s.proposals, s.state))
            xs.append(nar_embed(*state_inputs(s.state), nar))
            targets.append(np.array([int(a) for a in s.optimal], dtype=np.int64))
        return cls(tokens, xs, targets)

    def __len__(self):
        return len(self.tokens)

    def batch(self, idx):
        return (
            TokenInputs.concat([self.tokens[i] for i in idx]),
            np.concatenate([self.x_l[i] for i in idx]),
            np.concatenate([self.targets[i] for i in idx]),
        )


def fusion_loss(p: Mapping[str, Tensor], tokens: TokenInputs, x_l, targets: np.ndarray) -> Tensor:
    return nn.cross_entropy(fusion_logits_tensors(p, tokens, x_l), targets)


def fusion_agreement(data: FusionBatchable, params: ParamStore, chunk: int = 128) -> float:
    p = params.tensors(False)
    hits = total = 0
    for start in range(0, len(data), chunk):
        tokens, x_l, targets = data.batch(range(start, min(start + chunk, len(data))))
        pred = fusion_logits_tensors(p, tokens, x_l).data.argmax(axis=1)
        hits += int((pred == targets).sum())
        total += len(targets)
    return hits / total


@dataclass
class FusionCurvePoint:
    step: int
    loss: float
    agreement: float


def train_fusion(
    samples: Sequence[FusionSample],
    nar: ParamStore,
    params: ParamStore | None = None,
    steps: int = 5000,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    log_every: int = 100,
) -> tuple[ParamStore, list[FusionCurvePoint]]:
    """Cross-entropy training of the fusion head for exactly ``steps`` optimizer updates.

    NAR embeddings are computed once up front and enter as constants, so the
    NAR parameters never receive gradient.
    """
    if not samples:
        raise ValueError("empty fusion dataset")
    params = init_fusion_params(seed) if params is None else params
    data = FusionBatchable.build(samples, nar)
    rng = np.random.default_rng(seed)
    curve = []
    for step in range(steps):
        idx = rng.integers(0, len(data), size=min(batch_size, len(data)))
        tokens, x_l, targets = data.batch(idx)
        p = params.tensors()
        loss = fusion_loss(p, tokens, x_l, targets)
        value = float(loss.data)
        if not np.isfinite(value):
            raise nn.NumericError(f"non-finite fusion loss at step {step} (batch samples {idx.tolist()})")
        if step % log_every == 0:
            curve.append(FusionCurvePoint(step, value, float("nan")))
            log.info("fusion step %d loss %.4f", step, value)
        loss.backward()
        nn.optimizer_step(params, {k: t.grad for k, t in p.items()}, lr=lr)
    tokens, x_l, targets = data.batch(rng.integers(0, len(data), size=min(batch_size, len(data))))
    final = float(fusion_loss(params.tensors(False), tokens, x_l, targets).data)
    curve.append(FusionCurvePoint(steps, final, fusion_agreement(data, params)))
    return params, curve


# ---------------------------------------------------------------- policy


def fused_decider(nar: ParamStore, fusion: ParamStore):
    def decide(state: EpisodeState, parsed: ParsedReply):
        x_l = nar_embed(*state_inputs(state), nar)
        logits = fusion_forward(parsed, state, None, x_l, fusion)
        actions = tuple(Action(int(a)) for a in logits.argmax(axis=1))
        return actions, tuple(a.word for a in actions)

    return decide


def run_llm_nar_episode(
    scenario: Scenario, client: ChatClient, nar: ParamStore, fusion: ParamStore, seed: int
) -> EpisodeLog:
    policy = getattr(client, "policy_name", "llm").replace("-llm", "") + "-llm-nar"
    return run_episode(scenario, client, seed, fused_decider(nar, fusion), policy=policy)
