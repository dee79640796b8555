"""Static HTML token heatmaps, one row per explanation method."""

from __future__ import annotations

import html
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..agreement import mean_pairwise_tau
from ..attributions import Explanation
from ..errors import ContractError


def normalize_row(scores: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant row maps to all zeros."""
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = float(scores.min()), float(scores.max())
    if hi == lo:
        return np.zeros_like(scores)
    return (scores - lo) / (hi - lo)


def render_heatmap(tokens: Sequence[str], explanations: Mapping[str, Explanation], title: str = "") -> str:
    tokens = list(tokens)
    for name, exp in explanations.items():
        if list(exp.tokens) != tokens:
            raise ContractError(f"tokens of {name!r} do not match the instance")
    tau = mean_pairwise_tau(explanations) if len(tokens) >= 2 and len(explanations) >= 2 else 1.0
    caption = " ".join(p for p in (title, f"average Kendall tau across methods: {tau:.4f}") if p)
    lines = [
        "<!DOCTYPE html>",
        '<html><head><meta charset="utf-8">',
        f"<title>{html.escape(title or 'token heatmap')}</title>",
        "<style>table{border-collapse:collapse;font-family:monospace}"
        "td,th{padding:2px 6px;border:1px solid #ddd}th{text-align:left}</style>",
        "</head><body>",
        "<table>",
        f"<caption>{html.escape(caption)}</caption>",
        "<tr><th>method</th>" + "".join(f"<th>{html.escape(t)}</th>" for t in tokens) + "</tr>",
    ]
    for name, exp in explanations.items():
        level = normalize_row(exp.scores)
        cells = []
        for tok, raw, a in zip(tokens, exp.scores, level):
            cells.append(
                f'<td style="background:rgba(200,30,30,{a:.4f})" data-score="{raw:.6g}">{html.escape(tok)}</td>'
            )
        lines.append(f"<tr><th>{html.escape(name)}</th>" + "".join(cells) + "</tr>")
    lines += ["</table>", "</body></html>", ""]
    return "\n".join(lines)


def emit_heatmap(tokens: Sequence[str], explanations: Mapping[str, Explanation], path, title: str = "") -> Path:
    """Write the heatmap for one instance; identical input gives identical bytes."""
    path = Path(path)
    path.write_bytes(render_heatmap(tokens, explanations, title).encode("utf-8"))
    return path
