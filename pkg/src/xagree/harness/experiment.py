"""End-to-end runs: train per seed, explain sampled test instances, aggregate agreement."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import attention as attn
from .. import attributions as attr
from ..agreement import AgreementMatrix, agreement_matrix, ground_truth_alignment
from ..attributions import AttributionConfig, Explanation
from ..errors import ConfigError, ContractError, StageError
from ..models.base import Classifier, TokenSequence
from ..models.checkpoint import build_model, load_checkpoint, save_checkpoint
from ..models.training import TrainingConfig, accuracy, train
from .data import build_vocab, load_dataset, read_jsonl, sample_instances, write_jsonl
from .heatmap import emit_heatmap

log = logging.getLogger(__name__)

ATTRIBUTION_METHODS = (
    "input_x_gradient",
    "integrated_gradients",
    "deeplift",
    "grad_shap",
    "deep_shap",
    "lime",
    "leave_one_out",
    "exact_shapley",
)
ATTENTION_METHODS = {"bilstm": ("attention",), "transformer": ("rollout", "flow")}
DEFAULT_METHODS = {
    "transformer": ["rollout", "lime", "integrated_gradients", "deeplift", "grad_shap", "deep_shap"],
    "bilstm": ["attention", "lime", "integrated_gradients", "deeplift", "grad_shap", "deep_shap"],
}


@dataclass
class ExperimentConfig:
    task: str = "single"
    train_path: str = ""
    val_path: str = ""
    test_path: str = ""
    model: str = "transformer"
    model_config: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    attribution: dict = field(default_factory=dict)
    methods: Optional[list] = None
    explain_count: int = 500
    max_tokens: Optional[int] = 240
    correlation: str = "kendall"
    magnitude: bool = False
    per_segment: bool = False
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "runs/experiment"
    heatmaps: int = 5
    min_count: int = 1
    workers: int = 1
    reference_path: Optional[str] = None

    def __post_init__(self):
        if self.task not in ("single", "pair"):
            raise ConfigError(f"task must be 'single' or 'pair', got {self.task!r}")
        if self.model not in DEFAULT_METHODS:
            raise ConfigError(f"model must be one of {sorted(DEFAULT_METHODS)}, got {self.model!r}")
        if self.methods is None:
            self.methods = list(DEFAULT_METHODS[self.model])
        if not self.methods:
            raise ConfigError("methods must be nonempty")
        allowed = set(ATTRIBUTION_METHODS) | set(ATTENTION_METHODS[self.model])
        unknown = [m for m in self.methods if m not in allowed]
        if unknown:
            raise ConfigError(f"methods {unknown} are not available for the {self.model} model")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods contain duplicates")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.explain_count < 1:
            raise ConfigError("explain_count must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        # validate nested sections eagerly
        self.training_config(0)
        self.attribution_config()

    @classmethod
    def from_dict(cls, data: dict, base_dir=None) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        data = dict(data)
        if base_dir is not None:
            for key in ("train_path", "val_path", "test_path", "reference_path", "out_dir"):
                if data.get(key) and not Path(data[key]).is_absolute():
                    data[key] = str(Path(base_dir) / data[key])
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data, base_dir=path.parent)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in ("out_dir", "workers")}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def training_config(self, seed: int) -> TrainingConfig:
        try:
            return TrainingConfig(**{**self.training, "seed": seed})
        except TypeError as exc:
            raise ConfigError(f"training section: {exc}") from None

    def attribution_config(self, seed: int = 0) -> AttributionConfig:
        try:
            return AttributionConfig(**{**self.attribution, "seed": seed})
        except TypeError as exc:
            raise ConfigError(f"attribution section: {exc}") from None


@dataclass
class PreparedData:
    train: list
    val: list
    test: list
    vocab: object
    retention: dict


@dataclass
class SeedResult:
    seed: int
    model: Classifier
    history: dict
    test_accuracy: float
    instances: list  # test indices
    explanations: list  # one {method: Explanation} per instance
    matrix: Optional[AgreementMatrix] = None


@dataclass
class ReportBundle:
    matrix: AgreementMatrix
    seeds: list
    out_dir: Path
    manifest: dict
    ground_truth: dict = field(default_factory=dict)


# -- stages

def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    splits = {}
    for name in ("train", "val", "test"):
        path = getattr(cfg, f"{name}_path")
        if not path:
            raise ConfigError(f"{name}_path is not set")
        splits[name] = load_dataset(path, cfg.task, cfg.max_tokens)
    vocab = build_vocab(splits["train"], cfg.min_count)
    indexed = {k: v.index(vocab) for k, v in splits.items()}
    if cfg.explain_count > len(indexed["test"]):
        raise ConfigError(f"explain_count {cfg.explain_count} exceeds the {len(indexed['test'])} test instances")
    return PreparedData(
        list(indexed["train"]), list(indexed["val"]), list(indexed["test"]), vocab,
        {k: v.stats() for k, v in splits.items()},
    )


def make_model(kind: str, task: str, vocab, overrides: dict, seed: int) -> Classifier:
    config = dict(overrides)
    config["vocab_size"] = len(vocab)
    if kind == "bilstm":
        config.setdefault("pair", task == "pair")
    if kind == "transformer":
        config.setdefault("cls_id", vocab.cls_id)
        config.setdefault("sep_id", vocab.sep_id)
    config.setdefault("pad_id", vocab.pad_id)
    try:
        model = build_model(kind, config, seed)
    except TypeError as exc:
        raise ConfigError(f"model_config: {exc}") from None
    model.vocab = vocab
    return model


def train_seed(cfg: ExperimentConfig, data: PreparedData, seed: int, activation: str = "softmax",
               kind: Optional[str] = None) -> tuple:
    kind = kind or cfg.model
    overrides = cfg.model_config if kind == cfg.model else {}
    model = make_model(kind, cfg.task, data.vocab, overrides, seed)
    tcfg = cfg.training_config(seed)
    tcfg.attention_activation = activation
    model, history = train(model, data.train, data.val, tcfg)
    return model, history.to_dict(), accuracy(model, data.test)


def instance_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def explain_instance(model: Classifier, seq: TokenSequence, methods: Sequence[str],
                     acfg: AttributionConfig, seed: int, pool: Sequence[TokenSequence] = ()) -> dict:
    """Run every method on one instance against the same target class."""
    probs = model.predict_proba(model.encode([seq]))[0]
    target = int(seq.label) if acfg.target == "gold" else int(np.argmax(probs))
    prob = float(probs[target])
    rng = np.random.default_rng(seed)
    needs_set = any(m in ("grad_shap", "deep_shap") for m in methods)
    spec = attr.sample_baselines(model, seq, pool, acfg.deepshap_baselines, rng) if needs_set else None
    record = None
    out = {}
    for m in methods:
        if m in ("attention", "rollout", "flow"):
            if record is None:
                _, record = model.forward(seq)
            if m == "attention":
                exp = attn.raw_attention(record, per_segment=False, target_class=target, prediction_prob=prob)
            elif m == "rollout":
                exp = attn.rollout(record, acfg.residual_weight, acfg.include_specials,
                                   target_class=target, prediction_prob=prob)
            else:
                exp = attn.attention_flow(record, acfg.residual_weight, acfg.flow_budget, acfg.include_specials,
                                          target_class=target, prediction_prob=prob)
            exp.config_hash = attr.config_hash(m, acfg)
        elif m == "integrated_gradients":
            exp = attr.integrated_gradients(model, seq, target, cfg=acfg)
        elif m == "deeplift":
            exp = attr.deeplift(model, seq, target, cfg=acfg)
        elif m == "grad_shap":
            exp = attr.grad_shap(model, seq, target, spec, seed=seed, cfg=acfg)
        elif m == "deep_shap":
            exp = attr.deep_shap(model, seq, target, spec, cfg=acfg)
        elif m == "lime":
            exp = attr.lime(model, seq, target, cfg=acfg, seed=seed)
        elif m == "input_x_gradient":
            exp = attr.input_x_gradient(model, seq, target, cfg=acfg)
        elif m == "leave_one_out":
            exp = attr.leave_one_out(model, seq, target, cfg=acfg)
        elif m == "exact_shapley":
            exp = attr.exact_shapley(model, seq, target, cfg=acfg)
        else:
            raise ConfigError(f"unknown method {m!r}")
        exp.method = m
        out[m] = exp
    lengths = {len(e.scores) for e in out.values()}
    if len(lengths) != 1:
        raise ContractError(f"methods disagree on token count: {sorted(lengths)}")
    return out


def explain_seed(cfg: ExperimentConfig, model: Classifier, data: PreparedData, seed: int) -> tuple:
    instances = sample_instances(len(data.test), cfg.explain_count, seed)
    acfg = cfg.attribution_config(seed)

    def work(idx):
        return explain_instance(model, data.test[idx], cfg.methods, acfg, instance_seed(seed, idx), data.train)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            explanations = list(pool.map(work, instances))
    else:
        explanations = [work(i) for i in instances]
    return instances, explanations


def matrix_for(cfg: ExperimentConfig, explanations: Sequence[dict]) -> AgreementMatrix:
    return agreement_matrix(explanations, cfg.methods, cfg.correlation, cfg.magnitude, cfg.per_segment)


def explanation_records(seed: int, instances: Sequence[int], explanations: Sequence[dict]) -> list:
    recs = []
    for idx, exps in zip(instances, explanations):
        for m, exp in exps.items():
            recs.append(exp.to_record(seed=seed, instance=int(idx)))
    return recs


def group_records(records: Sequence[dict]) -> list:
    """Inverse of :func:`explanation_records`: ``[(seed, instance, {method: Explanation})]``."""
    groups: dict = {}
    for rec in records:
        groups.setdefault((rec["seed"], rec["instance"]), {})[rec["method"]] = Explanation.from_record(rec)
    return [(s, i, groups[(s, i)]) for s, i in sorted(groups)]


def _alignment(cfg: ExperimentConfig, results: Sequence[SeedResult]) -> dict:
    """Mean tau against the reference ranking per method, when references are configured."""
    if not cfg.reference_path:
        return {}
    refs = read_jsonl(cfg.reference_path)
    by_index = {r["index"]: r for r in refs}
    scores: dict = {m: [] for m in cfg.methods}
    for res in results:
        for idx, exps in zip(res.instances, res.explanations):
            ref = by_index.get(idx)
            if ref is None:
                continue
            for m, exp in exps.items():
                toks = list(exp.tokens)
                # specials never appear in the reference, so align on the shared tokens
                keep = [k for k, t in enumerate(toks) if t != "[CLS]"]
                ref_t, ref_r = list(ref["tokens"]), list(ref["ranks"])
                if [toks[k] for k in keep] != ref_t:
                    if [t for t in ref_t if t != "[SEP]"] == [toks[k] for k in keep]:
                        pairs = [(t, r) for t, r in zip(ref_t, ref_r) if t != "[SEP]"]
                        ref_t, ref_r = [p[0] for p in pairs], [p[1] for p in pairs]
                    else:
                        continue
                sub = Explanation(m, ref_t, exp.scores[keep])
                if len(set(ref_r)) > 1:
                    scores[m].append(ground_truth_alignment(sub, (ref_t, ref_r)))
    return {m: (float(np.mean(v)) if v else None) for m, v in scores.items()}


def run_experiment(cfg: ExperimentConfig) -> ReportBundle:
    """Full pipeline; outputs land in ``cfg.out_dir``.

    A failing stage leaves a manifest with ``status: partial`` and raises
    StageError naming the stage.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"status": "partial", "config": cfg.to_dict(), "config_hash": cfg.hash(), "seeds": {}, "timings": {}}
    stage = "load"
    try:
        start = time.perf_counter()
        data = prepare_data(cfg)
        manifest["retention"] = data.retention
        manifest["timings"]["load"] = time.perf_counter() - start
        results = []
        for seed in cfg.seeds:
            stage = "train"
            start = time.perf_counter()
            model, history, acc = train_seed(cfg, data, seed)
            (out / "models").mkdir(exist_ok=True)
            save_checkpoint(model, out / "models" / f"seed{seed}.npz")
            manifest["timings"][f"train_seed{seed}"] = time.perf_counter() - start
            stage = "explain"
            start = time.perf_counter()
            instances, explanations = explain_seed(cfg, model, data, seed)
            manifest["timings"][f"explain_seed{seed}"] = time.perf_counter() - start
            stage = "agree"
            res = SeedResult(seed, model, history, acc, instances, explanations)
            res.matrix = matrix_for(cfg, explanations)
            results.append(res)
            manifest["seeds"][str(seed)] = {
                "test_accuracy": acc,
                "history": history,
                "instances": instances,
                "agreement_mean": res.matrix.mean.tolist(),
                "agreement_std": res.matrix.std.tolist(),
            }
        stage = "agree"
        pooled = matrix_for(cfg, [e for r in results for e in r.explanations])
        stage = "report"
        bundle = write_report(cfg, results, pooled, manifest)
    except Exception as exc:
        manifest["status"] = "partial"
        manifest["failed_stage"] = stage
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        _write_json(out / "manifest.json", manifest)
        raise StageError(stage, exc) from exc
    return bundle


def write_report(cfg: ExperimentConfig, results: Sequence[SeedResult], pooled: AgreementMatrix,
                 manifest: dict) -> ReportBundle:
    out = Path(cfg.out_dir)
    pooled.to_csv(out / "agreement_mean.csv", out / "agreement_std.csv")
    records = [rec for r in results for rec in explanation_records(r.seed, r.instances, r.explanations)]
    write_jsonl(out / "explanations.jsonl", records)
    heat_dir = out / "heatmaps"
    heat_dir.mkdir(exist_ok=True)
    for r in results:
        for idx, exps in list(zip(r.instances, r.explanations))[: cfg.heatmaps]:
            tokens = next(iter(exps.values())).tokens
            emit_heatmap(tokens, exps, heat_dir / f"seed{r.seed}_instance{idx}.html",
                         title=f"seed {r.seed}, test instance {idx}")
    gt = _alignment(cfg, results)
    manifest.update({
        "status": "final",
        "methods": list(cfg.methods),
        "n_instances": pooled.n_instances.tolist(),
        "excluded": pooled.excluded.tolist(),
        "ground_truth_alignment": gt,
        "outputs": ["agreement_mean.csv", "agreement_std.csv", "explanations.jsonl", "manifest.json", "heatmaps/"],
    })
    _write_json(out / "manifest.json", manifest)
    return ReportBundle(pooled, list(results), out, manifest, gt)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- ablation

@dataclass
class AblationRow:
    model: str
    uniform: list
    softmax: list

    @staticmethod
    def _fmt(vals) -> str:
        return f"{np.mean(vals):.3f} ± {np.std(vals):.3f}"

    def as_dict(self) -> dict:
        return {
            "model": self.model,
            "uniform_mean": float(np.mean(self.uniform)), "uniform_std": float(np.std(self.uniform)),
            "softmax_mean": float(np.mean(self.softmax)), "softmax_std": float(np.std(self.softmax)),
            "uniform": list(self.uniform), "softmax": list(self.softmax),
        }


def uniform_rows_equal(model: Classifier, seqs: Sequence[TokenSequence], tol: float = 1e-12) -> bool:
    """Whether every captured attention distribution is constant over real tokens."""
    for seq in seqs:
        _, rec = model.forward(seq)
        for w in rec.weights:
            if np.ptp(w) > tol:
                return False
        for layer in rec.layers:
            if np.ptp(layer, axis=-1).max() > tol:
                return False
    return True


def ablate_experiment(cfg: ExperimentConfig, models: Optional[Sequence[str]] = None,
                      check_instances: int = 20) -> list:
    """Test accuracy of softmax versus uniform attention, trained per seed.

    Writes ``ablation.csv`` and ``ablation.md`` to ``cfg.out_dir`` and returns
    one :class:`AblationRow` per model.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = "load"
    try:
        data = prepare_data(cfg)
        rows = []
        for kind in models or [cfg.model]:
            stage = "train"
            row = AblationRow(kind, [], [])
            for seed in cfg.seeds:
                for activation in ("softmax", "uniform"):
                    model, _, acc = train_seed(cfg, data, seed, activation, kind)
                    if activation == "uniform" and not uniform_rows_equal(model, data.test[:check_instances]):
                        raise ContractError(f"{kind} seed {seed}: uniform variant produced non-uniform attention")
                    getattr(row, activation).append(acc)
            rows.append(row)
        stage = "report"
        lines = ["model,uniform_mean,uniform_std,softmax_mean,softmax_std"]
        md = ["| Model | Uniform | Softmax |", "|---|---|---|"]
        for r in rows:
            d = r.as_dict()
            lines.append(f"{r.model},{d['uniform_mean']!r},{d['uniform_std']!r},{d['softmax_mean']!r},{d['softmax_std']!r}")
            md.append(f"| {r.model} | {AblationRow._fmt(r.uniform)} | {AblationRow._fmt(r.softmax)} |")
        (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        (out / "ablation.md").write_text("\n".join(md) + "\n", encoding="utf-8")
    except Exception as exc:
        raise StageError(stage, exc) from exc
    return rows


def load_seed_models(out_dir, seeds: Sequence[int]) -> dict:
    models = {}
    for s in seeds:
        path = Path(out_dir) / "models" / f"seed{s}.npz"
        if not path.exists():
            raise ConfigError(f"no checkpoint for seed {s} at {path}; run 'train' first")
        models[s] = load_checkpoint(path)
    return models
