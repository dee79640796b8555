"""Command-line entry point: ``xagree <command> --config cfg.json [--seed 0,1,2] [--out dir]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..agreement import agreement_matrix
from ..errors import XAgreeError
from ..models.checkpoint import save_checkpoint
from .data import read_jsonl, write_jsonl
from .experiment import (
    ExperimentConfig,
    ablate_experiment,
    explain_seed,
    explanation_records,
    group_records,
    load_seed_models,
    prepare_data,
    run_experiment,
    train_seed,
)
from .heatmap import emit_heatmap
from .synth import SyntheticTaskSpec, synth_generate

log = logging.getLogger("xagree")


def _seeds(text: str) -> list:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _experiment(args) -> ExperimentConfig:
    if not args.config:
        raise SystemExit("--config is required for this command")
    cfg = ExperimentConfig.from_json(args.config)
    if args.seed:
        cfg = replace(cfg, seeds=args.seed)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def cmd_train(args) -> int:
    cfg = _experiment(args)
    data = prepare_data(cfg)
    out = Path(cfg.out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    summary = {}
    for seed in cfg.seeds:
        model, history, acc = train_seed(cfg, data, seed)
        save_checkpoint(model, out / "models" / f"seed{seed}.npz")
        summary[str(seed)] = {"test_accuracy": acc, "best_epoch": history["best_epoch"]}
        print(f"seed {seed}: test accuracy {acc:.4f} (best epoch {history['best_epoch']})")
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_explain(args) -> int:
    cfg = _experiment(args)
    data = prepare_data(cfg)
    models = load_seed_models(cfg.out_dir, cfg.seeds)
    records = []
    for seed in cfg.seeds:
        model = models[seed]
        model.vocab = data.vocab
        instances, exps = explain_seed(cfg, model, data, seed)
        records.extend(explanation_records(seed, instances, exps))
        print(f"seed {seed}: explained {len(instances)} instances with {len(cfg.methods)} methods")
    write_jsonl(Path(cfg.out_dir) / "explanations.jsonl", records)
    return 0


def _load_groups(cfg: ExperimentConfig) -> list:
    path = Path(cfg.out_dir) / "explanations.jsonl"
    if not path.exists():
        raise SystemExit(f"{path} not found; run 'explain' first")
    return [g for g in group_records(read_jsonl(path)) if g[0] in cfg.seeds]


def cmd_agree(args) -> int:
    cfg = _experiment(args)
    groups = _load_groups(cfg)
    matrix = agreement_matrix([g[2] for g in groups], cfg.methods, cfg.correlation, cfg.magnitude, cfg.per_segment)
    out = Path(cfg.out_dir)
    matrix.to_csv(out / "agreement_mean.csv", out / "agreement_std.csv")
    print(matrix.table())
    return 0


def cmd_report(args) -> int:
    cfg = _experiment(args)
    groups = _load_groups(cfg)
    heat_dir = Path(cfg.out_dir) / "heatmaps"
    heat_dir.mkdir(parents=True, exist_ok=True)
    per_seed: dict = {}
    for seed, idx, exps in groups:
        if per_seed.get(seed, 0) >= cfg.heatmaps:
            continue
        per_seed[seed] = per_seed.get(seed, 0) + 1
        emit_heatmap(next(iter(exps.values())).tokens, exps, heat_dir / f"seed{seed}_instance{idx}.html",
                     title=f"seed {seed}, test instance {idx}")
    matrix = agreement_matrix([g[2] for g in groups], cfg.methods, cfg.correlation, cfg.magnitude, cfg.per_segment)
    print(matrix.table())
    print(f"wrote {sum(per_seed.values())} heatmaps to {heat_dir}")
    return 0


def cmd_run(args) -> int:
    bundle = run_experiment(_experiment(args))
    print(bundle.matrix.table())
    print(f"outputs in {bundle.out_dir}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _experiment(args)
    rows = ablate_experiment(cfg, models=args.models.split(",") if args.models else None)
    print((Path(cfg.out_dir) / "ablation.md").read_text(), end="")
    return 0 if rows else 1


def cmd_synth(args) -> int:
    spec_dict = json.loads(Path(args.config).read_text()) if args.config else {}
    try:
        spec = SyntheticTaskSpec(**spec_dict)
    except TypeError as exc:
        raise SystemExit(f"bad synthetic spec: {exc}")
    seed = args.seed[0] if args.seed else 0
    out = args.out or "synthetic"
    result = synth_generate(spec, seed, out)
    print(", ".join(f"{k}: {len(v['records'])}" for k, v in result.items()) + f" written to {out}")
    return 0


COMMANDS = {
    "train": (cmd_train, "train one model per seed and save checkpoints"),
    "explain": (cmd_explain, "explain sampled test instances with the trained models"),
    "agree": (cmd_agree, "aggregate explanations into agreement matrices"),
    "report": (cmd_report, "write heatmaps and print the agreement table"),
    "ablate": (cmd_ablate, "compare softmax and uniform attention accuracy"),
    "synth": (cmd_synth, "generate a synthetic task with reference rankings"),
    "run": (cmd_run, "train, explain, agree and report in one go"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (experiment config; synthetic spec for 'synth')")
    common.add_argument("--seed", type=_seeds, help="comma-separated seeds, overriding the config")
    common.add_argument("--out", help="output directory, overriding the config")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="xagree", description="Agreement between explanation methods.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "ablate":
            p.add_argument("--models", help="comma-separated model kinds (default: the config's model)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command][0](args)
    except XAgreeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
