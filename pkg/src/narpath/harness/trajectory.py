"""Trajectory export: an SVG drawing plus a JSON file of per-timestep positions."""

from __future__ import annotations

import json
from pathlib import Path

from ..core import EpisodeLog

CELL = 24
_COLORS = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
]


def trajectory_data(log: EpisodeLog) -> dict:
    sc = log.scenario
    return {
        "scenario_id": sc.name,
        "policy": log.policy,
        "height": sc.map.height,
        "width": sc.map.width,
        "obstacles": [list(c) for c in sorted(sc.map.obstacles)],
        "goals": [list(g) for g in sc.goals],
        "positions": [[list(p) for p in step] for step in log.trajectory],
    }


def _xy(cell, height):
    r, c = cell
    return c * CELL + CELL / 2, (height - 1 - r) * CELL + CELL / 2


def render_svg(data: dict) -> str:
    h, w = data["height"], data["width"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * CELL}" height="{h * CELL}" '
        f'viewBox="0 0 {w * CELL} {h * CELL}">',
        f'<rect x="0" y="0" width="{w * CELL}" height="{h * CELL}" fill="white" stroke="black"/>',
    ]
    for r, c in data["obstacles"]:
        parts.append(
            f'<rect class="obstacle" x="{c * CELL}" y="{(h - 1 - r) * CELL}" width="{CELL}" height="{CELL}" fill="#444"/>'
        )
    n = len(data["goals"])
    for i in range(n):
        color = _COLORS[i % len(_COLORS)]
        pts = [_xy(step[i], h) for step in data["positions"]]
        if len(set(pts)) == 1:
            x, y = pts[0]
            parts.append(f'<circle class="agent-{i}" cx="{x}" cy="{y}" r="{CELL / 4}" fill="{color}"/>')
        else:
            coords = " ".join(f"{x},{y}" for x, y in pts)
            parts.append(
                f'<polyline class="agent-{i}" points="{coords}" fill="none" stroke="{color}" stroke-width="3"/>'
            )
        gx, gy = _xy(data["goals"][i], h)
        parts.append(
            f'<rect class="goal-{i}" x="{gx - CELL / 3}" y="{gy - CELL / 3}" width="{2 * CELL / 3}" '
            f'height="{2 * CELL / 3}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_trajectory(log: EpisodeLog, prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.svg`` and ``<prefix>.json``."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    data = trajectory_data(log)
    svg_path, json_path = prefix.with_suffix(".svg"), prefix.with_suffix(".json")
    svg_path.write_text(render_svg(data))
    json_path.write_text(json.dumps(data) + "\n")
    return svg_path, json_path
