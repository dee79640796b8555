"""Attention-based explanations: raw BiLSTM weights, rollout and flow.

Rollout and flow share one graph: per layer the heads are averaged, padding
rows and columns are removed, the residual connection is mixed in as
``r * A + (1 - r) * I`` and rows are renormalised.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .attributions import Explanation
from .errors import CapabilityError, ContractError, KindError
from .models.base import PAD, AttentionRecord

__all__ = [
    "LayeredAttentionGraph",
    "raw_attention",
    "rollout",
    "rollout_matrix",
    "attention_flow",
    "max_flow",
    "CAPACITY_SCALE",
]

STOCHASTIC_TOL = 1e-6
CAPACITY_SCALE = 1e9  # capacities are quantised to multiples of 1e-9


@dataclass
class LayeredAttentionGraph:
    """Head-averaged, residual-mixed attention matrices for one instance.

    ``matrices[l][i, j]`` is the weight with which position ``i`` of layer
    ``l + 1`` reads position ``j`` of layer ``l``.  ``positions`` maps rows
    back to indices of the original record.
    """

    matrices: list
    positions: np.ndarray
    tokens: list

    @property
    def layers(self) -> int:
        return len(self.matrices)

    @property
    def n(self) -> int:
        return len(self.positions)

    @classmethod
    def from_record(cls, record: AttentionRecord, residual_weight: float = 0.5) -> "LayeredAttentionGraph":
        if record.kind != "transformer":
            raise KindError(f"layered attention needs a transformer record, got {record.kind!r}")
        if not record.layers:
            raise ContractError("attention record has no layers")
        if not 0.0 <= residual_weight <= 1.0:
            raise ContractError("residual weight must lie in [0, 1]")
        keep = np.array([i for i, t in enumerate(record.tokens) if t != PAD], dtype=np.int64)
        mats = []
        for depth, layer in enumerate(record.layers):
            layer = np.asarray(layer, dtype=np.float64)
            if layer.ndim == 2:
                layer = layer[None]
            if layer.shape[1:] != (len(record.tokens), len(record.tokens)):
                raise ContractError(f"layer {depth} has shape {layer.shape} for {len(record.tokens)} tokens")
            avg = layer.mean(axis=0)
            if np.any(avg < -STOCHASTIC_TOL) or np.max(np.abs(avg.sum(axis=1) - 1.0)) > STOCHASTIC_TOL:
                raise ContractError(f"layer {depth} attention is not row-stochastic")
            sub = avg[np.ix_(keep, keep)]
            sub = sub / sub.sum(axis=1, keepdims=True)
            mixed = residual_weight * sub + (1.0 - residual_weight) * np.eye(len(keep))
            mats.append(mixed / mixed.sum(axis=1, keepdims=True))
        return cls(mats, keep, [record.tokens[i] for i in keep])


def _explanation(method: str, tokens, scores, record: AttentionRecord, include_specials: bool,
                 positions: np.ndarray, target_class, prediction_prob) -> Explanation:
    drop = set() if include_specials else set(record.special_positions)
    idx = [k for k, p in enumerate(positions) if int(p) not in drop]
    return Explanation(
        method=method,
        tokens=[tokens[k] for k in idx],
        scores=np.asarray(scores)[idx],
        target_class=target_class,
        prediction_prob=prediction_prob,
    )


def raw_attention(record: AttentionRecord, per_segment: bool = False,
                  target_class: Optional[int] = None, prediction_prob: Optional[float] = None) -> Explanation:
    """BiLSTM attention weights as scores.

    For pairs the two weight vectors are concatenated.  With
    ``per_segment=True`` the segment boundaries are kept on the explanation
    so agreement can rank within each sequence separately.
    """
    if record.kind != "bilstm":
        raise KindError(f"raw attention needs a BiLSTM record, got {record.kind!r}")
    if not record.weights:
        raise ContractError("record holds no attention weights")
    scores = np.concatenate([np.asarray(w, dtype=np.float64) for w in record.weights])
    if len(scores) != len(record.tokens):
        raise ContractError(f"{len(scores)} weights for {len(record.tokens)} tokens")
    segments, start = [], 0
    for w in record.weights:
        segments.append((start, start + len(w)))
        start += len(w)
    exp = Explanation("attention", record.tokens, scores, target_class, prediction_prob)
    if per_segment:
        exp.segments = tuple(segments)
    return exp


def rollout_matrix(record: AttentionRecord, residual_weight: float = 0.5) -> np.ndarray:
    """``R = A_L ... A_1`` over the augmented matrices (padding removed)."""
    graph = LayeredAttentionGraph.from_record(record, residual_weight)
    R = np.eye(graph.n)
    for mat in graph.matrices:
        R = mat @ R
    return R


def rollout(record: AttentionRecord, residual_weight: float = 0.5, include_specials: bool = True,
            cls_position: int = 0, target_class: Optional[int] = None,
            prediction_prob: Optional[float] = None) -> Explanation:
    """Row ``cls_position`` of the rollout matrix."""
    graph = LayeredAttentionGraph.from_record(record, residual_weight)
    R = np.eye(graph.n)
    for mat in graph.matrices:
        R = mat @ R
    row = int(np.searchsorted(graph.positions, cls_position))
    return _explanation("rollout", graph.tokens, R[row], record, include_specials,
                        graph.positions, target_class, prediction_prob)


# -- max flow

def _to_int_graph(graph: Mapping) -> dict:
    out: dict = {}
    for u, edges in graph.items():
        for v, cap in edges.items():
            if cap < 0:
                raise ContractError(f"negative capacity on edge {u}->{v}")
            c = int(round(cap * CAPACITY_SCALE))
            if c > 0 and u != v:
                out.setdefault(u, {})
                out[u][v] = out[u].get(v, 0) + c
    return out


def max_flow(graph: Mapping, source, sink) -> float:
    """Maximum flow value (Dinic's algorithm) on a dict-of-dicts capacity graph.

    ``graph[u][v]`` is the capacity of edge ``u -> v``.  Capacities are
    scaled to integers at a resolution of 1e-9 so augmentation is exact.
    """
    if source == sink:
        raise ContractError("source and sink must differ")
    cap = _to_int_graph(graph)
    nodes = set(cap)
    for edges in cap.values():
        nodes.update(edges)
    if source not in nodes or sink not in nodes:
        return 0.0
    index = {node: i for i, node in enumerate(sorted(nodes, key=repr))}
    n = len(index)
    # residual graph as adjacency lists of edge ids; edge e and e ^ 1 are a pair
    head, to, res = [[] for _ in range(n)], [], []
    for u, edges in cap.items():
        for v, c in edges.items():
            a, b = index[u], index[v]
            head[a].append(len(to)); to.append(b); res.append(c)
            head[b].append(len(to)); to.append(a); res.append(0)
    s, t = index[source], index[sink]
    total = 0
    while True:
        level = [-1] * n
        level[s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for e in head[u]:
                if res[e] > 0 and level[to[e]] < 0:
                    level[to[e]] = level[u] + 1
                    queue.append(to[e])
        if level[t] < 0:
            break
        cursor = [0] * n

        def push(u, limit):
            if u == t:
                return limit
            while cursor[u] < len(head[u]):
                e = head[u][cursor[u]]
                v = to[e]
                if res[e] > 0 and level[v] == level[u] + 1:
                    got = push(v, min(limit, res[e]))
                    if got:
                        res[e] -= got
                        res[e ^ 1] += got
                        return got
                cursor[u] += 1
            return 0

        while True:
            pushed = push(s, float("inf"))
            if not pushed:
                break
            total += pushed
    return total / CAPACITY_SCALE


def flow_graph(graph: LayeredAttentionGraph) -> dict:
    """Capacity graph with nodes ``(layer, position)``; edges run top-down."""
    cap: dict = {}
    for depth, mat in enumerate(graph.matrices):
        for i in range(graph.n):
            cap[(depth + 1, i)] = {(depth, j): float(mat[i, j]) for j in range(graph.n) if mat[i, j] > 0}
    return cap


def attention_flow(record: AttentionRecord, residual_weight: float = 0.5, budget: int = 4096,
                   include_specials: bool = True, cls_position: int = 0,
                   target_class: Optional[int] = None,
                   prediction_prob: Optional[float] = None) -> Explanation:
    """Max flow from the top-layer [CLS] node to each input-layer node."""
    graph = LayeredAttentionGraph.from_record(record, residual_weight)
    if graph.n * graph.layers > budget:
        raise CapabilityError(
            f"attention flow over n*L = {graph.n * graph.layers} exceeds the budget of {budget}; use rollout instead"
        )
    cap = flow_graph(graph)
    top = (graph.layers, int(np.searchsorted(graph.positions, cls_position)))
    scores = np.array([max_flow(cap, top, (0, j)) for j in range(graph.n)])
    return _explanation("flow", graph.tokens, scores, record, include_specials,
                        graph.positions, target_class, prediction_prob)
