"""GNN-based neural algorithmic reasoner imitating CBS actions.

A shared CNN turns each agent's 3x9x9 observation into a 64-d feature row,
two graph-convolution layers mix rows through the normalized adjacency
(``relu(X @ W_self + C @ X @ W_agg)``), and an MLP maps the final embeddings to five action
logits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import block_diag

from . import nn
from .core import EpisodeState
from .data import LabelRecord
from .nn import ParamStore, Tensor
from .percept import build_adjacency, observe_all

log = logging.getLogger(__name__)

EMBED_DIM = 64
NUM_LAYERS = 2
NUM_ACTIONS = 5
# (name, shape, fan_in)
_LAYOUT = [
    ("cnn.conv1.w", (16, 3, 3, 3), 27),
    ("cnn.conv1.b", (16,), 27),
    ("cnn.conv2.w", (32, 16, 3, 3), 144),
    ("cnn.conv2.b", (32,), 144),
    ("cnn.fc.w", (32, EMBED_DIM), 32),
    ("cnn.fc.b", (EMBED_DIM,), 32),
    *[
        (f"gnn.{l}.{tap}", (EMBED_DIM, EMBED_DIM), 2 * EMBED_DIM)
        for l in range(NUM_LAYERS)
        for tap in ("self", "agg")
    ],
    ("mlp.0.w", (EMBED_DIM, EMBED_DIM), EMBED_DIM),
    ("mlp.0.b", (EMBED_DIM,), EMBED_DIM),
    ("mlp.1.w", (EMBED_DIM, NUM_ACTIONS), EMBED_DIM),
    ("mlp.1.b", (NUM_ACTIONS,), EMBED_DIM),
]


@dataclass
class NarOutput:
    embeddings: np.ndarray  # N x 64
    logits: np.ndarray  # N x 5


def init_nar_params(seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    return ParamStore({name: nn.uniform_init(rng, shape, fan_in) for name, shape, fan_in in _LAYOUT})


def check_params(params: ParamStore | Mapping) -> None:
    for name, shape, _ in _LAYOUT:
        if name not in params:
            raise KeyError(f"NAR parameters lack {name!r}")
        if tuple(params[name].shape) != shape:
            raise nn.ShapeError(f"NAR parameter {name} has shape {params[name].shape}, expected {shape}")


def forward_tensors(p: Mapping[str, Tensor], obs: np.ndarray, adjacency: np.ndarray) -> tuple[Tensor, Tensor]:
    """Differentiable pass over a (possibly block-diagonal) batch of agents."""
    m = obs.shape[0]
    if adjacency.shape != (m, m):
        raise nn.ShapeError(f"adjacency {adjacency.shape} does not match {m} observations")
    h = nn.relu(nn.conv2d(obs, p["cnn.conv1.w"], p["cnn.conv1.b"], stride=2))
    h = nn.relu(nn.conv2d(h, p["cnn.conv2.w"], p["cnn.conv2.b"], stride=2))
    h = nn.reshape(h, (m, -1))
    x = nn.relu(nn.linear(h, p["cnn.fc.w"], p["cnn.fc.b"]))
    for l in range(NUM_LAYERS):
        agg = nn.matmul(nn.matmul(adjacency, x), p[f"gnn.{l}.agg"])
        x = nn.relu(nn.add(nn.matmul(x, p[f"gnn.{l}.self"]), agg))
    z = nn.relu(nn.linear(x, p["mlp.0.w"], p["mlp.0.b"]))
    logits = nn.linear(z, p["mlp.1.w"], p["mlp.1.b"])
    return x, logits


def nar_forward(observations: np.ndarray, adjacency: np.ndarray, params: ParamStore) -> NarOutput:
    obs = np.asarray(observations, dtype=np.float64)
    x, logits = forward_tensors(params.tensors(requires_grad=False), obs, np.asarray(adjacency, dtype=np.float64))
    return NarOutput(x.data, logits.data)


def nar_embed(observations: np.ndarray, adjacency: np.ndarray, params: ParamStore) -> np.ndarray:
    return nar_forward(observations, adjacency, params).embeddings


def state_inputs(state: EpisodeState) -> tuple[np.ndarray, np.ndarray]:
    return observe_all(state), build_adjacency(state)


def nar_act(state: EpisodeState, params: ParamStore) -> tuple[int, ...]:
    obs, adj = state_inputs(state)
    return tuple(int(a) for a in nar_forward(obs, adj, params).logits.argmax(axis=1))


# ---------------------------------------------------------------- training


@dataclass
class Batchable:
    """Precomputed network inputs for a list of records."""

    obs: list[np.ndarray]
    adj: list[np.ndarray]
    targets: list[np.ndarray]

    @classmethod
    def from_labels(cls, records: Sequence[LabelRecord]) -> "Batchable":
        obs, adj, targets = [], [], []
        for rec in records:
            state = EpisodeState(rec.scenario, rec.positions, rec.t)
            o, a = state_inputs(state)
            obs.append(o)
            adj.append(a)
            targets.append(np.array([int(x) for x in rec.optimal_actions], dtype=np.int64))
        return cls(obs, adj, targets)

    def __len__(self):
        return len(self.obs)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            np.concatenate([self.obs[i] for i in idx]),
            block_diag(*[self.adj[i] for i in idx]),
            np.concatenate([self.targets[i] for i in idx]),
        )


def nar_loss(p: Mapping[str, Tensor], obs: np.ndarray, adj: np.ndarray, targets: np.ndarray) -> Tensor:
    _, logits = forward_tensors(p, obs, adj)
    return nn.cross_entropy(logits, targets)


def agreement(data: Batchable, params: ParamStore, chunk: int = 256) -> float:
    """Fraction of (record, agent) pairs whose argmax equals the label."""
    hits = total = 0
    for start in range(0, len(data), chunk):
        obs, adj, targets = data.batch(range(start, min(start + chunk, len(data))))
        pred = nar_forward(obs, adj, params).logits.argmax(axis=1)
        hits += int((pred == targets).sum())
        total += len(targets)
    return hits / total


@dataclass
class CurvePoint:
    step: int
    loss: float
    agreement: float


def pretrain_nar(
    records: Sequence[LabelRecord],
    params: ParamStore | None = None,
    steps: int = 20_000,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    log_every: int = 100,
    target_agreement: float | None = None,
) -> tuple[ParamStore, list[CurvePoint]]:
    """Imitation pretraining by mean per-agent cross-entropy against CBS labels.

    With ``target_agreement`` set, training stops early at a logging step
    once training-set agreement reaches it.
    """
    if not records:
        raise ValueError("empty label dataset")
    params = init_nar_params(seed) if params is None else params
    check_params(params)
    data = Batchable.from_labels(records)
    rng = np.random.default_rng(seed)
    curve = []
    for step in range(steps + 1):
        idx = rng.integers(0, len(data), size=min(batch_size, len(data)))
        obs, adj, targets = data.batch(idx)
        p = params.tensors()
        loss = nar_loss(p, obs, adj, targets)
        value = float(loss.data)
        if not np.isfinite(value):
            raise nn.NumericError(f"non-finite NAR loss at step {step} (batch records {idx.tolist()})")
        if step % log_every == 0 or step == steps:
            agree = agreement(data, params)
            curve.append(CurvePoint(step, value, agree))
            log.info("nar step %d loss %.4f agreement %.3f", step, value, agree)
            if target_agreement is not None and agree >= target_agreement:
                break
        if step == steps:
            break
        loss.backward()
        nn.optimizer_step(params, {k: t.grad for k, t in p.items()}, lr=lr)
    return params, curve
