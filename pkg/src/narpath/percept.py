"""Local observations and the inter-agent communication graph."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .core import EpisodeState, GridMap

FOV = 9
HALF = FOV // 2
DEFAULT_COMM_RADIUS = HALF


@lru_cache(maxsize=256)
def _padded_blocked(grid: GridMap) -> np.ndarray:
    blocked = np.ones((grid.height + 2 * HALF, grid.width + 2 * HALF))
    blocked[HALF:-HALF, HALF:-HALF] = 0.0
    for r, c in grid.obstacles:
        blocked[HALF + r, HALF + c] = 1.0
    blocked.setflags(write=False)
    return blocked


def observe(state: EpisodeState, agent: int) -> np.ndarray:
    """3 x 9 x 9 binary tensor centred on ``agent``.

    Channel 0 marks obstacles and off-map cells, channel 1 other agents,
    channel 2 the goal (clipped onto the window border when outside it).
    Index ``[k, HALF + dr, HALF + dc]`` is the cell at offset ``(dr, dc)``.
    """
    r0, c0 = state.positions[agent]
    obs = np.zeros((3, FOV, FOV))
    obs[0] = _padded_blocked(state.scenario.map)[r0 : r0 + FOV, c0 : c0 + FOV]
    for j, (r, c) in enumerate(state.positions):
        dr, dc = r - r0, c - c0
        if j != agent and abs(dr) <= HALF and abs(dc) <= HALF:
            obs[1, HALF + dr, HALF + dc] = 1.0
    gr, gc = state.scenario.goals[agent]
    dr = min(max(gr - r0, -HALF), HALF)
    dc = min(max(gc - c0, -HALF), HALF)
    obs[2, HALF + dr, HALF + dc] = 1.0
    return obs


def observe_all(state: EpisodeState) -> np.ndarray:
    return np.stack([observe(state, i) for i in range(state.scenario.num_agents)])


def raw_adjacency(positions, r_comm: int = DEFAULT_COMM_RADIUS) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    cheb = np.abs(pos[:, None, :] - pos[None, :, :]).max(axis=-1)
    adj = (cheb <= r_comm).astype(float)
    np.fill_diagonal(adj, 0.0)
    return adj


def build_adjacency(state: EpisodeState, r_comm: int = DEFAULT_COMM_RADIUS) -> np.ndarray:
    """Symmetric-normalized adjacency with self-loops, D^-1/2 (A + I) D^-1/2."""
    if r_comm < 1:
        raise ValueError("communication radius must be >= 1")
    a_hat = raw_adjacency(state.positions, r_comm) + np.eye(state.scenario.num_agents)
    d = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * d[:, None] * d[None, :]
