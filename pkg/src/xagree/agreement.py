"""Rank agreement between explanations.

Kendall's tau is the tie-aware tau_b variant, counted in O(n log n) with a
merge sort.  Correlations use raw signed scores unless ``magnitude=True``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .attributions import Explanation
from .errors import CompletenessError, ContractError, UndefinedCorrelation

__all__ = [
    "kendall_tau",
    "kendall_counts",
    "spearman",
    "pearson",
    "topk_overlap",
    "AgreementMatrix",
    "agreement_matrix",
    "ground_truth_alignment",
    "mean_pairwise_tau",
    "CORRELATIONS",
]


def _check_pair(a, b) -> tuple:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if len(a) != len(b):
        raise ContractError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise ContractError("correlation needs at least two entries")
    return a, b


def _tied_pairs(sorted_values: np.ndarray) -> int:
    """Number of pairs sharing a value, given the values in sorted order."""
    if len(sorted_values) == 0:
        return 0
    change = np.flatnonzero(np.diff(sorted_values) != 0)
    runs = np.diff(np.concatenate(([0], change + 1, [len(sorted_values)])))
    return int((runs * (runs - 1) // 2).sum())


def _count_swaps(values: list) -> int:
    """Sort ``values`` in place (merge sort) and return the inversion count."""
    n = len(values)
    if n < 2:
        return 0
    buf = values[:]
    swaps = 0
    width = 1
    src, dst = values, buf
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if src[j] < src[i]:
                    dst[k] = src[j]
                    swaps += mid - i
                    j += 1
                else:
                    dst[k] = src[i]
                    i += 1
                k += 1
            while i < mid:
                dst[k] = src[i]; i += 1; k += 1
            while j < hi:
                dst[k] = src[j]; j += 1; k += 1
        src, dst = dst, src
        width *= 2
    if src is not values:
        values[:] = src
    return swaps


def kendall_counts(a, b) -> dict:
    """Concordant, discordant and tie counts over all ``n(n-1)/2`` pairs.

    ``ties_a`` counts pairs tied in ``a`` only, ``ties_b`` in ``b`` only,
    ``ties_both`` pairs tied in both.
    """
    a, b = _check_pair(a, b)
    n = len(a)
    total = n * (n - 1) // 2
    order = np.lexsort((b, a))
    a_s, b_s = a[order], b[order]
    tied_a = _tied_pairs(a_s)
    # pairs tied in both: runs of equal (a, b) after the lexicographic sort
    joint = np.flatnonzero((np.diff(a_s) != 0) | (np.diff(b_s) != 0))
    runs = np.diff(np.concatenate(([0], joint + 1, [n])))
    tied_both = int((runs * (runs - 1) // 2).sum())
    values = b_s.tolist()
    swaps = _count_swaps(values)  # discordant pairs among those not tied in a
    tied_b = _tied_pairs(np.asarray(values))
    discordant = swaps
    concordant = total - tied_a - tied_b + tied_both - discordant
    return {
        "concordant": concordant,
        "discordant": discordant,
        "ties_a": tied_a - tied_both,
        "ties_b": tied_b - tied_both,
        "ties_both": tied_both,
        "pairs": total,
    }


def kendall_tau(a, b) -> float:
    """Tau-b; 0.0 when either vector is constant."""
    c = kendall_counts(a, b)
    cd = c["concordant"] + c["discordant"]
    denom = math.sqrt((cd + c["ties_a"]) * (cd + c["ties_b"]))
    if denom == 0:
        return 0.0
    return max(-1.0, min(1.0, (c["concordant"] - c["discordant"]) / denom))


def pearson(a, b) -> float:
    a, b = _check_pair(a, b)
    da, db = a - a.mean(), b - b.mean()
    sa, sb = float(np.dot(da, da)), float(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise UndefinedCorrelation("pearson correlation is undefined for a constant vector")
    return max(-1.0, min(1.0, float(np.dot(da, db)) / math.sqrt(sa * sb)))


def spearman(a, b) -> float:
    a, b = _check_pair(a, b)
    return pearson(rankdata(a), rankdata(b))


def _topk(scores: np.ndarray, k: int) -> set:
    # stable sort on the negated scores puts earlier positions first among ties
    return set(np.argsort(-scores, kind="stable")[:k].tolist())


def topk_overlap(a, b, k: Optional[int] = None, fraction: Optional[float] = None) -> float:
    """Share of the ``k`` highest-scoring positions common to both vectors."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if len(a) != len(b):
        raise ContractError(f"length mismatch: {len(a)} vs {len(b)}")
    if (k is None) == (fraction is None):
        raise ContractError("give exactly one of k or fraction")
    eff = k if k is not None else math.ceil(fraction * len(a))
    eff = min(eff, len(a))
    if eff < 1:
        raise ContractError("effective k must be >= 1")
    return len(_topk(a, eff) & _topk(b, eff)) / eff


CORRELATIONS = ("kendall", "spearman", "pearson", "topk")


def _correlate(kind: str, a, b, k=None, fraction=None) -> float:
    if kind == "kendall":
        return kendall_tau(a, b)
    if kind == "spearman":
        return spearman(a, b)
    if kind == "pearson":
        return pearson(a, b)
    if kind == "topk":
        if k is None and fraction is None:
            fraction = 0.2
        return topk_overlap(a, b, k=k, fraction=fraction)
    raise ContractError(f"unknown correlation {kind!r}; expected one of {CORRELATIONS}")


def _pair_correlation(kind, x: Explanation, y: Explanation, magnitude: bool, per_segment: bool,
                      k=None, fraction=None) -> float:
    a, b = x.scores, y.scores
    if len(a) != len(b):
        raise ContractError(f"{x.method} has {len(a)} scores but {y.method} has {len(b)}")
    if magnitude:
        a, b = np.abs(a), np.abs(b)
    segs = x.segments or y.segments
    if per_segment and segs and len(segs) > 1:
        vals = []
        for lo, hi in segs:
            if hi - lo >= 2:
                try:
                    vals.append(_correlate(kind, a[lo:hi], b[lo:hi], k, fraction))
                except UndefinedCorrelation:
                    continue
        if not vals:
            raise UndefinedCorrelation("no segment has a defined correlation")
        return float(np.mean(vals))
    return _correlate(kind, a, b, k, fraction)


@dataclass
class AgreementMatrix:
    methods: list
    mean: np.ndarray
    std: np.ndarray
    n_instances: np.ndarray
    excluded: np.ndarray
    correlation: str = "kendall"
    values: dict = field(default_factory=dict, repr=False)

    def cell(self, a: str, b: str) -> float:
        return float(self.mean[self.methods.index(a), self.methods.index(b)])

    def _csv(self, mat: np.ndarray) -> str:
        lines = [",".join(["method", *self.methods])]
        for name, row in zip(self.methods, mat):
            cells = ["" if not np.isfinite(v) else repr(float(v)) for v in row]
            lines.append(",".join([name, *cells]))
        return "\n".join(lines) + "\n"

    def mean_csv(self) -> str:
        return self._csv(self.mean)

    def std_csv(self) -> str:
        return self._csv(self.std)

    def to_csv(self, mean_path, std_path) -> None:
        with open(mean_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.mean_csv())
        with open(std_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.std_csv())

    def table(self, digits: int = 3) -> str:
        """Upper-triangular text table of means, one row per method."""
        width = max(len(m) for m in self.methods) + 2
        head = " " * width + "".join(m[: width - 1].rjust(width) for m in self.methods)
        rows = [head]
        for i, name in enumerate(self.methods):
            cells = []
            for j in range(len(self.methods)):
                v = self.mean[i, j]
                cells.append("".rjust(width) if j < i else ("-" if not np.isfinite(v) else f"{v:.{digits}f}").rjust(width))
            rows.append(name.ljust(width) + "".join(cells))
        return "\n".join(rows)


def _instances(explanations) -> list:
    if isinstance(explanations, Mapping):
        return list(explanations.items())
    return list(enumerate(explanations))


def agreement_matrix(explanations, methods: Optional[Sequence[str]] = None, correlation: str = "kendall",
                     magnitude: bool = False, per_segment: bool = False,
                     k: Optional[int] = None, fraction: Optional[float] = None) -> AgreementMatrix:
    """Mean and population std of per-instance correlations for each method pair.

    ``explanations`` is a sequence (or mapping keyed by instance id) of
    ``{method: Explanation}`` dicts.  Undefined per-instance correlations are
    left out of a cell and counted in ``excluded``.
    """
    if correlation not in CORRELATIONS:
        raise ContractError(f"unknown correlation {correlation!r}; expected one of {CORRELATIONS}")
    items = _instances(explanations)
    if methods is None:
        if not items:
            raise ContractError("no instances and no methods given")
        methods = list(items[0][1])
    methods = list(methods)
    for key, exps in items:
        for m in methods:
            if m not in exps:
                raise CompletenessError(key, m)
    size = len(methods)
    mean = np.full((size, size), np.nan)
    std = np.full((size, size), np.nan)
    count = np.zeros((size, size), dtype=np.int64)
    excluded = np.zeros((size, size), dtype=np.int64)
    values = {}
    for i in range(size):
        mean[i, i], std[i, i], count[i, i] = 1.0, 0.0, len(items)
        for j in range(i + 1, size):
            vals = []
            for key, exps in items:
                try:
                    vals.append(_pair_correlation(correlation, exps[methods[i]], exps[methods[j]],
                                                  magnitude, per_segment, k, fraction))
                except UndefinedCorrelation:
                    excluded[i, j] += 1
            excluded[j, i] = excluded[i, j]
            count[i, j] = count[j, i] = len(vals)
            values[(methods[i], methods[j])] = vals
            if vals:
                arr = np.array(vals)
                mean[i, j] = mean[j, i] = float(np.mean(arr))
                std[i, j] = std[j, i] = float(np.std(arr))
    return AgreementMatrix(methods, mean, std, count, excluded, correlation, values)


def mean_pairwise_tau(explanations: Mapping[str, Explanation]) -> float:
    """Average tau over unordered pairs of distinct methods for one instance."""
    names = list(explanations)
    vals = [kendall_tau(explanations[a].scores, explanations[b].scores)
            for i, a in enumerate(names) for b in names[i + 1:]]
    return float(np.mean(vals)) if vals else 1.0


def ground_truth_alignment(explanation: Explanation, reference, magnitude: bool = True) -> float:
    """Tau between an explanation and a reference ranking (rank 1 = most important).

    ``reference`` is a dict with ``tokens`` and ``ranks`` or a
    ``(tokens, ranks)`` tuple.  Scores are compared by magnitude by default
    since the reference orders features by absolute weight.
    """
    if isinstance(reference, Mapping):
        tokens, ranks = reference["tokens"], reference["ranks"]
    else:
        tokens, ranks = reference
    if list(tokens) != list(explanation.tokens):
        raise ContractError("reference tokens differ from the explanation's tokens")
    scores = np.abs(explanation.scores) if magnitude else explanation.scores
    return kendall_tau(scores, -np.asarray(ranks, dtype=np.float64))
