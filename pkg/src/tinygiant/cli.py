"""Command-line entry point: ``tinygiant <command> [--config FILE] [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, save_checkpoint
from .config import RunConfig, add_config_flags, model_config, resolve_config
from .data import ScoreReport, generate_dataset, read_dataset, score, write_dataset, write_jsonl
from .model import TinyGiantVLM
from .moe import expert_usage_report, format_usage_table
from .text import Vocabulary
from .train import (
    build_encoders,
    build_vocab,
    cache_paths,
    cache_split,
    evaluate,
    gate_decisions,
    load_examples,
    predict,
    run_curriculum,
    write_predictions,
    write_report,
)

log = logging.getLogger("tinygiant")

SPLITS = ("train", "val")

# (MoE, Phase 1, Phase 2) and the published reference score for each row
ABLATION_CELLS = (
    (False, True, False, 25.59),
    (False, False, True, 63.65),
    (False, True, True, 65.09),
    (True, False, True, 68.13),
    (True, True, True, 72.52),
)


class CliError(RuntimeError):
    pass


def _split_size(cfg: RunConfig, split: str) -> int:
    return cfg.n_train if split == "train" else cfg.n_val


def _dataset_path(cfg: RunConfig, split: str) -> Path:
    return Path(cfg.paths.data_dir) / f"{split}.jsonl"


def cmd_gen_data(cfg: RunConfig, args) -> int:
    data_dir = Path(cfg.paths.data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        samples = generate_dataset(cfg.seed, _split_size(cfg, split), cfg.data, split)
        write_dataset(_dataset_path(cfg, split), samples)
        print(f"wrote {len(samples)} samples to {_dataset_path(cfg, split)}")
    return 0


def cmd_cache_features(cfg: RunConfig, args) -> int:
    cache_dir = Path(cfg.paths.cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    encoders = build_encoders(cfg)
    arrays = {f"{enc.config.modality}.{k}": v for enc in encoders for k, v in enc.arrays().items()}
    save_checkpoint(cache_dir / "encoders.tgvm", arrays)
    for split in SPLITS:
        path = _dataset_path(cfg, split)
        if not path.exists():
            raise CliError(f"dataset {path} not found; run `tinygiant gen-data` first")
        samples = read_dataset(path)
        cache_split(samples, cache_dir, split, encoders, cfg.train.mask_threshold)
        print(f"cached {len(samples)} {split} records in {cache_paths(cache_dir, split)[0]}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    examples = load_examples(cfg.paths.cache_dir, "train")
    vocab = build_vocab(examples)
    run_dir = Path(cfg.paths.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    vocab.save(run_dir / "vocab.txt")
    result = run_curriculum(cfg, examples, vocab, run_dir)
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; final phase {last['phase']} loss {last['loss']:.4f}")
    print(f"checkpoint: {run_dir / 'model.tgvm'}")
    return 0


def _load_model(cfg: RunConfig, args) -> tuple[TinyGiantVLM, Vocabulary]:
    run_dir = Path(cfg.paths.run_dir)
    vocab_path = run_dir / "vocab.txt"
    if not vocab_path.exists():
        raise CliError(f"no vocabulary at {vocab_path}; run `tinygiant train` first")
    vocab = Vocabulary.load(vocab_path)
    ckpt = Path(args.checkpoint) if args.checkpoint else run_dir / "model.tgvm"
    if not ckpt.exists():
        raise CliError(f"checkpoint {ckpt} not found; run `tinygiant train` first")
    return TinyGiantVLM.load(ckpt, model_config(cfg, len(vocab))), vocab


def _print_report(report: ScoreReport, path: Path) -> None:
    print(report.table())
    print(f"report: {path}")


def cmd_eval(cfg: RunConfig, args) -> int:
    reports = Path(cfg.paths.reports_dir)
    reports.mkdir(parents=True, exist_ok=True)
    out = reports / f"eval_{args.split}.json"
    if args.predictions:
        truth = cache_paths(cfg.paths.cache_dir, args.split)[1]
        if not truth.exists():
            truth = _dataset_path(cfg, args.split)
        report = score(args.predictions, truth, cfg.train.distance_tolerance)
        write_report(out, report)
        _print_report(report, out)
        return 0
    model, vocab = _load_model(cfg, args)
    examples = load_examples(cfg.paths.cache_dir, args.split)
    report, preds = evaluate(model, examples, vocab, cfg.moe, cfg.train)
    write_report(out, report)
    write_predictions(reports / f"predictions_{args.split}.jsonl", preds)
    _print_report(report, out)
    return 0


def cmd_predict(cfg: RunConfig, args) -> int:
    model, vocab = _load_model(cfg, args)
    examples = load_examples(cfg.paths.cache_dir, args.split)
    t = cfg.train
    preds = predict(model, examples, vocab, cfg.moe, t.batch_size, t.max_new_tokens, t.label_scoring)
    out = Path(args.output) if args.output else Path(cfg.paths.reports_dir) / f"predictions_{args.split}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, preds)
    print(f"wrote {len(preds)} predictions to {out}")
    return 0


def run_ablation(cfg: RunConfig, train_examples, val_examples, vocab, run_root=None) -> list[dict]:
    """Train and score the five (MoE, Phase 1, Phase 2) cells with a shared seed."""
    rows = []
    for i, (moe_on, p1, p2, ref) in enumerate(ABLATION_CELLS):
        cell = dataclasses.replace(
            cfg,
            moe=dataclasses.replace(cfg.moe, enabled=moe_on),
            train=dataclasses.replace(cfg.train, phase1_enabled=p1, phase2_enabled=p2),
        )
        run_dir = None if run_root is None else Path(run_root) / f"cell{i}"
        result = run_curriculum(cell, train_examples, vocab, run_dir)
        report, _ = evaluate(result.model, val_examples, vocab, cell.moe, cell.train)
        rows.append({"moe": moe_on, "phase1": p1, "phase2": p2, "score": report.overall, "reference": ref})
        log.info("ablation cell %d score %.2f", i, report.overall)
    return rows


def format_ablation(rows: list[dict]) -> str:
    def mark(flag: bool) -> str:
        return "yes" if flag else "-"

    lines = [f"{'MoE':<5}{'Phase1':<8}{'Phase2':<8}{'score':>8}{'reference*':>12}"]
    for r in rows:
        lines.append(f"{mark(r['moe']):<5}{mark(r['phase1']):<8}{mark(r['phase2']):<8}{r['score']:>8.2f}{r['reference']:>12.2f}")
    lines.append("* published full-scale reference, shown for orientation only; desk-scale scores are not expected to match")
    return "\n".join(lines)


def cmd_ablation(cfg: RunConfig, args) -> int:
    train_examples = load_examples(cfg.paths.cache_dir, "train")
    val_examples = load_examples(cfg.paths.cache_dir, args.split)
    vocab = build_vocab(train_examples)
    rows = run_ablation(cfg, train_examples, val_examples, vocab, Path(cfg.paths.run_dir) / "ablation")
    reports = Path(cfg.paths.reports_dir)
    reports.mkdir(parents=True, exist_ok=True)
    write_jsonl(reports / "ablation.jsonl", rows)
    print(format_ablation(rows))
    return 0


def cmd_inspect_gating(cfg: RunConfig, args) -> int:
    model, vocab = _load_model(cfg, args)
    examples = load_examples(cfg.paths.cache_dir, args.split)
    if args.limit:
        examples = examples[: args.limit]
    if not cfg.moe.enabled:
        raise CliError("MoE is disabled in this config; there is no routing to inspect")
    pairs = gate_decisions(model, examples, vocab, cfg.moe, cfg.train.batch_size)
    for sample_id, dec in pairs:
        weights = " ".join(f"{w:.6f}" for w in dec.weights)
        selected = " ".join(str(int(s)) for s in dec.selected)
        print(f"{sample_id}\tR{dec.token}\t{dec.task}\texperts {selected}\tweights {weights}")
    table = expert_usage_report([d for _, d in pairs], model.moe.num_experts)
    print(format_usage_table(table))
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic train/val datasets"),
    "cache-features": (cmd_cache_features, "encode images once and cache region features"),
    "train": (cmd_train, "run the two-phase curriculum from the feature cache"),
    "eval": (cmd_eval, "generate, normalize and score predictions"),
    "predict": (cmd_predict, "write normalized predictions as JSONL"),
    "ablation": (cmd_ablation, "train and score the five MoE/phase configurations"),
    "inspect-gating": (cmd_inspect_gating, "print per-token expert routing and usage"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tinygiant", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file; explicit flags override it")
        add_config_flags(p)
        if name in ("eval", "predict", "ablation", "inspect-gating"):
            p.add_argument("--split", default="val", choices=SPLITS)
        if name in ("eval", "predict", "inspect-gating"):
            p.add_argument("--checkpoint", help="model checkpoint (default: <run-dir>/model.tgvm)")
        if name == "eval":
            p.add_argument("--predictions", help="score this predictions JSONL instead of running the model")
        if name == "predict":
            p.add_argument("--output", help="output JSONL path")
        if name == "inspect-gating":
            p.add_argument("--limit", type=int, default=0, help="only the first N samples")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command][0](cfg, args)
    except (CliError, CheckpointError, FileNotFoundError, KeyError, ValueError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"tinygiant {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
