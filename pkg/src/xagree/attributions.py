"""Feature attributions over token embeddings.

Gradient-based methods explain the embedding layer and reduce to one score
per token by summing over embedding dimensions.  Perturbation methods (LIME,
leave-one-out, exact Shapley) remove a token by replacing its id with the
padding id.  Unless told otherwise every method explains the model's
predicted class.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CapabilityError, ConfigError, ContractError, NumericalError
from .models.base import Classifier, TokenSequence
from .tensor import Tape, Tensor

__all__ = [
    "Explanation",
    "BaselineSpec",
    "AttributionConfig",
    "input_x_gradient",
    "integrated_gradients",
    "deeplift",
    "grad_shap",
    "deep_shap",
    "lime",
    "leave_one_out",
    "exact_shapley",
    "sample_baselines",
    "config_hash",
]


@dataclass
class Explanation:
    """Per-token importance scores for one prediction."""

    method: str
    tokens: list
    scores: np.ndarray
    target_class: Optional[int] = None
    prediction_prob: Optional[float] = None
    segments: tuple = ()
    config_hash: str = ""
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tokens = list(self.tokens)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.scores) != len(self.tokens):
            raise ContractError(f"{self.method}: {len(self.scores)} scores for {len(self.tokens)} tokens")
        if not np.all(np.isfinite(self.scores)):
            raise NumericalError(f"{self.method}: non-finite scores")

    def to_record(self, **extra) -> dict:
        rec = {
            "method": self.method,
            "tokens": self.tokens,
            "scores": [float(s) for s in self.scores],
            "target_class": self.target_class,
            "prediction_prob": None if self.prediction_prob is None else float(self.prediction_prob),
            "segments": [list(s) for s in self.segments],
            "config_hash": self.config_hash,
        }
        rec.update(extra)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Explanation":
        return cls(
            method=rec["method"],
            tokens=rec["tokens"],
            scores=np.array(rec["scores"], dtype=np.float64),
            target_class=rec.get("target_class"),
            prediction_prob=rec.get("prediction_prob"),
            segments=tuple(tuple(s) for s in rec.get("segments", ())),
            config_hash=rec.get("config_hash", ""),
        )


@dataclass
class BaselineSpec:
    """Reference inputs, as id arrays laid out like the explained instance.

    ``kind="padding"`` means a single all-padding sequence of the same length.
    """

    kind: str = "padding"
    samples: Optional[list] = None

    def __post_init__(self):
        if self.kind not in ("padding", "sample_set"):
            raise ConfigError(f"unknown baseline kind {self.kind!r}")
        if self.kind == "sample_set" and not self.samples:
            raise ConfigError("sample_set baseline needs at least one sample")

    def id_arrays(self, ids: np.ndarray, pad_id: int) -> list:
        if self.kind == "padding":
            return [np.full_like(ids, pad_id)]
        out = []
        for s in self.samples:
            s = np.asarray(s, dtype=np.int64)
            if s.shape != ids.shape:
                raise ContractError(f"baseline shape {s.shape} differs from input shape {ids.shape}")
            out.append(s)
        return out


@dataclass
class AttributionConfig:
    ig_steps: int = 64
    gradshap_samples: int = 32
    deepshap_baselines: int = 8
    lime_samples: int = 1000
    lime_ridge_lambda: float = 1.0
    lime_kernel_width: Optional[float] = None  # None: 0.25 * sqrt(n)
    seed: int = 0
    include_specials: bool = True
    target: str = "predicted"  # or "gold"
    shapley_max_n: int = 12
    flow_budget: int = 4096
    residual_weight: float = 0.5
    chunk_size: int = 128

    def __post_init__(self):
        for name in ("ig_steps", "gradshap_samples", "deepshap_baselines", "lime_samples", "chunk_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.target not in ("predicted", "gold"):
            raise ConfigError("target must be 'predicted' or 'gold'")
        if self.lime_ridge_lambda < 0:
            raise ConfigError("lime_ridge_lambda must be >= 0")


def config_hash(method: str, cfg: AttributionConfig) -> str:
    payload = json.dumps({"method": method, **asdict(cfg)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# -- shared plumbing

class _Instance:
    """A single encoded instance together with its explained positions."""

    def __init__(self, model: Classifier, seq: TokenSequence, target, cfg: AttributionConfig):
        self.model = model
        self.seq = seq
        self.cfg = cfg
        self.batch = model.encode([seq])
        self.ids = self.batch.ids[0]
        self.tokens_all = model.input_tokens(seq)
        self.n = len(self.ids)
        self.probs = model.predict_proba(self.batch)[0]
        if target is None:
            target = int(seq.label) if cfg.target == "gold" else int(np.argmax(self.probs))
        self.target = int(target)
        special = set(model.special_positions(seq)) if not cfg.include_specials else set()
        self.positions = np.array([i for i in range(self.n) if i not in special], dtype=np.int64)
        self.emb = model.embed(self.batch.ids)[0]

    @property
    def segments(self) -> tuple:
        """Segments in explanation coordinates (after dropping specials)."""
        pos = list(self.positions)
        out = []
        for lo, hi in self.batch.segments if len(self.batch.segments) > 1 else self._content_segments():
            kept = [k for k, p in enumerate(pos) if lo <= p < hi]
            if kept:
                out.append((kept[0], kept[-1] + 1))
        return tuple(out)

    def _content_segments(self):
        offset = self.n - len(self.seq)
        return [(lo + offset, hi + offset) for lo, hi in self.seq.segments()]

    def explanation(self, method: str, token_scores: np.ndarray, **info) -> Explanation:
        return Explanation(
            method=method,
            tokens=[self.tokens_all[i] for i in self.positions],
            scores=np.asarray(token_scores)[self.positions],
            target_class=self.target,
            prediction_prob=float(self.probs[self.target]),
            segments=self.segments,
            config_hash=config_hash(method, self.cfg),
            info=info,
        )


def _gradients(inst: _Instance, points: np.ndarray, deeplift_pairs: Optional[int] = None) -> np.ndarray:
    """d logit_target / d embedding at each embedding matrix in ``points``."""
    chunk = len(points) if deeplift_pairs is not None else inst.cfg.chunk_size
    out = []
    for lo in range(0, len(points), chunk):
        part = points[lo:lo + chunk]
        batch = inst.batch.repeat(len(part))
        with Tape() as tape:
            emb = Tensor(part, requires_grad=True)
            logits, _ = inst.model.forward_embedded(emb, batch)
            objective = logits[:, inst.target].sum()
        tape.backward(objective, deeplift_pairs=deeplift_pairs)
        out.append(emb.grad)
    return np.concatenate(out, axis=0)


def _target_logits(inst: _Instance, points: np.ndarray) -> np.ndarray:
    out = []
    for lo in range(0, len(points), inst.cfg.chunk_size):
        part = points[lo:lo + inst.cfg.chunk_size]
        logits, _ = inst.model.forward_embedded(Tensor(part), inst.batch.repeat(len(part)))
        out.append(logits.data[:, inst.target])
    return np.concatenate(out)


def _baseline_embeddings(inst: _Instance, baseline) -> list:
    if baseline is None:
        baseline = BaselineSpec()
    if isinstance(baseline, BaselineSpec):
        return [inst.model.embed(a[None, :])[0] for a in baseline.id_arrays(inst.ids, inst.model.pad_id)]
    arr = np.asarray(baseline, dtype=np.float64)
    if arr.shape != inst.emb.shape:
        raise ContractError(f"baseline embedding shape {arr.shape} differs from input {inst.emb.shape}")
    return [arr]


def _values(inst: _Instance, id_rows: np.ndarray, value: str) -> np.ndarray:
    """Model output for the target class on each perturbed id row."""
    out = []
    for lo in range(0, len(id_rows), max(inst.cfg.chunk_size, 256)):
        batch = inst.batch.with_ids(id_rows[lo:lo + max(inst.cfg.chunk_size, 256)])
        if value == "prob":
            out.append(inst.model.predict_proba(batch)[:, inst.target])
        elif value == "logit":
            out.append(inst.model.logits(batch)[:, inst.target])
        else:
            raise ConfigError(f"value must be 'prob' or 'logit', got {value!r}")
    return np.concatenate(out)


def _masked_ids(inst: _Instance, keep: np.ndarray) -> np.ndarray:
    """Id rows where explained positions with ``keep == False`` become padding."""
    rows = np.repeat(inst.ids[None, :], len(keep), axis=0)
    player = rows[:, inst.positions]
    rows[:, inst.positions] = np.where(keep, player, inst.model.pad_id)
    return rows


# -- gradient methods

def input_x_gradient(model: Classifier, seq: TokenSequence, target: Optional[int] = None,
                     baseline=None, cfg: Optional[AttributionConfig] = None) -> Explanation:
    """Embedding times gradient, summed over embedding dimensions.

    With a ``baseline`` the input is measured relative to it:
    ``(e - b) . d logit / d e`` evaluated at ``e``.
    """
    inst = _Instance(model, seq, target, cfg or AttributionConfig())
    grad = _gradients(inst, inst.emb[None])[0]
    delta = inst.emb if baseline is None else inst.emb - _baseline_embeddings(inst, baseline)[0]
    return inst.explanation("input_x_gradient", (delta * grad).sum(axis=-1))


def integrated_gradients(model: Classifier, seq: TokenSequence, target: Optional[int] = None,
                         baseline=None, steps: Optional[int] = None,
                         cfg: Optional[AttributionConfig] = None) -> Explanation:
    """Path integral of gradients from baseline to input, midpoint Riemann rule.

    ``info["delta"]`` holds ``logit(x) - logit(baseline)``, the value the
    scores should sum to.
    """
    cfg = cfg or AttributionConfig()
    steps = cfg.ig_steps if steps is None else steps
    if steps < 1:
        raise ConfigError("integrated gradients needs steps >= 1")
    inst = _Instance(model, seq, target, cfg)
    base = _baseline_embeddings(inst, baseline)[0]
    diff = inst.emb - base
    alphas = (np.arange(steps) + 0.5) / steps
    points = base[None] + alphas[:, None, None] * diff[None]
    avg = _gradients(inst, points).mean(axis=0)
    ends = _target_logits(inst, np.stack([inst.emb, base]))
    return inst.explanation("integrated_gradients", (diff * avg).sum(axis=-1), delta=float(ends[0] - ends[1]))


def deeplift(model: Classifier, seq: TokenSequence, target: Optional[int] = None,
             baseline=None, cfg: Optional[AttributionConfig] = None) -> Explanation:
    """DeepLIFT Rescale rule through gradient override.

    Input and baseline run as one batch of two; each elementwise
    nonlinearity backpropagates ``delta_out / delta_in`` in place of its
    derivative.  Operations without a DeepLIFT rule raise CapabilityError.
    """
    inst = _Instance(model, seq, target, cfg or AttributionConfig())
    base = _baseline_embeddings(inst, baseline)[0]
    grads = _gradients(inst, np.stack([inst.emb, base]), deeplift_pairs=1)
    diff = inst.emb - base
    ends = _target_logits(inst, np.stack([inst.emb, base]))
    return inst.explanation("deeplift", (diff * grads[0]).sum(axis=-1), delta=float(ends[0] - ends[1]))


def grad_shap(model: Classifier, seq: TokenSequence, target: Optional[int] = None,
              baseline_spec: Optional[BaselineSpec] = None, n_samples: Optional[int] = None,
              seed: Optional[int] = None, cfg: Optional[AttributionConfig] = None) -> Explanation:
    """Expected gradients: ``E_{b, u}[(e - b) * grad f(b + u (e - b))]`` with ``u ~ U(0, 1)``."""
    cfg = cfg or AttributionConfig()
    n_samples = cfg.gradshap_samples if n_samples is None else n_samples
    if n_samples < 1:
        raise ConfigError("grad_shap needs n_samples >= 1")
    inst = _Instance(model, seq, target, cfg)
    bases = np.stack(_baseline_embeddings(inst, baseline_spec or BaselineSpec()))
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    which = rng.integers(len(bases), size=n_samples)
    # stratified: one draw per slice of [0, 1), each still marginally uniform
    u = (rng.permutation(n_samples) + rng.uniform(size=n_samples)) / n_samples
    b = bases[which]
    diffs = inst.emb[None] - b
    points = b + u[:, None, None] * diffs
    grads = _gradients(inst, points)
    return inst.explanation("grad_shap", (diffs * grads).mean(axis=0).sum(axis=-1))


def deep_shap(model: Classifier, seq: TokenSequence, target: Optional[int] = None,
              baseline_spec: Optional[BaselineSpec] = None,
              cfg: Optional[AttributionConfig] = None) -> Explanation:
    """Mean of DeepLIFT attributions over every baseline in the set."""
    cfg = cfg or AttributionConfig()
    spec = baseline_spec or BaselineSpec()
    inst = _Instance(model, seq, target, cfg)
    arrays = spec.id_arrays(inst.ids, model.pad_id)
    runs = [deeplift(model, seq, inst.target, BaselineSpec("sample_set", [a]), cfg) for a in arrays]
    full = np.zeros(inst.n)
    full[inst.positions] = np.mean(np.stack([r.scores for r in runs]), axis=0)
    return inst.explanation("deep_shap", full)


def sample_baselines(model: Classifier, seq: TokenSequence, pool: Sequence[TokenSequence],
                     count: int, rng: np.random.Generator, include_padding: bool = True) -> BaselineSpec:
    """Padding plus ``count`` random pool instances fitted to ``seq``'s layout.

    Each content segment of a pool instance is truncated or padded to the
    length of the matching segment of ``seq``; separators stay where they
    are in ``seq``.
    """
    n = model.encode([seq]).ids.shape[1]
    arrays = [np.full(n, model.pad_id, dtype=np.int64)] if include_padding else []
    if pool and count > 0:
        picks = rng.choice(len(pool), size=min(count, len(pool)), replace=False)
        for k in picks:
            other = pool[int(k)]
            if len(other.segments()) != len(seq.segments()):
                raise ContractError("baseline pool mixes single and pair instances")
            ids = list(seq.ids)
            for (lo, hi), (olo, ohi) in zip(seq.segments(), other.segments()):
                src = list(other.ids[olo:ohi])[: hi - lo]
                ids[lo:hi] = src + [model.pad_id] * (hi - lo - len(src))
            arrays.append(model.encode([TokenSequence(seq.tokens, ids, seq.label, seq.pair_boundary)]).ids[0])
    return BaselineSpec("sample_set", arrays)


# -- perturbation methods

def _weighted_ridge(X: np.ndarray, y: np.ndarray, w: np.ndarray, lam: float) -> np.ndarray:
    """Coefficients of weighted ridge regression with an unpenalised intercept."""
    sw = w / w.sum()
    xm = sw @ X
    ym = sw @ y
    Xc = X - xm
    yc = y - ym
    A = Xc.T @ (Xc * w[:, None]) + lam * np.eye(X.shape[1])
    rhs = Xc.T @ (w * yc)
    try:
        coef = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"ridge system is singular: {exc}") from None
    if not np.all(np.isfinite(coef)):
        raise NumericalError("ridge solution is not finite")
    return coef


def lime(model: Classifier, seq: TokenSequence, target: Optional[int] = None,
         cfg: Optional[AttributionConfig] = None, seed: Optional[int] = None,
         value: str = "prob") -> Explanation:
    """LIME with tokens as binary features.

    Masks keep each token with probability 0.5 (the all-ones mask is always
    the first sample); dropped tokens become padding.  Samples are weighted
    by ``exp(-d^2 / width^2)`` with ``d`` the cosine distance to the
    all-ones mask, and a weighted ridge model is fit in closed form.
    """
    cfg = cfg or AttributionConfig()
    inst = _Instance(model, seq, target, cfg)
    m = len(inst.positions)
    if m < 1:
        raise ContractError("lime needs at least one token")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    masks = rng.random((cfg.lime_samples, m)) < 0.5
    masks[0] = True
    y = _values(inst, _masked_ids(inst, masks), value)
    kept = masks.sum(axis=1)
    distance = 1.0 - np.sqrt(kept / m)
    width = cfg.lime_kernel_width if cfg.lime_kernel_width is not None else 0.25 * math.sqrt(m)
    weights = np.exp(-(distance ** 2) / width ** 2)
    coef = _weighted_ridge(masks.astype(np.float64), y, weights, cfg.lime_ridge_lambda)
    full = np.zeros(inst.n)
    full[inst.positions] = coef
    return inst.explanation("lime", full)


def leave_one_out(model: Classifier, seq: TokenSequence, target: Optional[int] = None,
                  cfg: Optional[AttributionConfig] = None, value: str = "prob") -> Explanation:
    """Drop in target probability when a single token becomes padding."""
    inst = _Instance(model, seq, target, cfg or AttributionConfig())
    m = len(inst.positions)
    keep = np.ones((m + 1, m), dtype=bool)
    keep[np.arange(1, m + 1), np.arange(m)] = False
    v = _values(inst, _masked_ids(inst, keep), value)
    full = np.zeros(inst.n)
    full[inst.positions] = v[0] - v[1:]
    return inst.explanation("leave_one_out", full)


def exact_shapley(model: Classifier, seq: TokenSequence, target: Optional[int] = None,
                  max_n: Optional[int] = None, cfg: Optional[AttributionConfig] = None,
                  value: str = "prob") -> Explanation:
    """Shapley values by enumerating all ``2^n`` token coalitions.

    The value of a coalition is the model output with every other token
    replaced by padding.
    """
    cfg = cfg or AttributionConfig()
    max_n = cfg.shapley_max_n if max_n is None else max_n
    inst = _Instance(model, seq, target, cfg)
    m = len(inst.positions)
    if m > max_n:
        raise CapabilityError(f"exact Shapley over {m} tokens exceeds max_n={max_n} (2^n coalitions)")
    codes = np.arange(2 ** m)
    bits = (codes[:, None] >> np.arange(m)[None, :]) & 1
    v = _values(inst, _masked_ids(inst, bits.astype(bool)), value)
    size = bits.sum(axis=1)
    fact = [math.factorial(k) for k in range(m + 1)]
    weight = np.array([fact[s] * fact[m - s - 1] / fact[m] if s < m else 0.0 for s in range(m + 1)])
    phi = np.zeros(m)
    for i in range(m):
        without = codes[bits[:, i] == 0]
        phi[i] = np.sum(weight[size[without]] * (v[without | (1 << i)] - v[without]))
    full = np.zeros(inst.n)
    full[inst.positions] = phi
    return inst.explanation("exact_shapley", full, v_full=float(v[-1]), v_empty=float(v[0]))
