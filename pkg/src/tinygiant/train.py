"""Feature caching, the two-phase curriculum, prediction and evaluation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import atomic_write_bytes, save_checkpoint
from .config import RunConfig, TrainConfig, model_config
from .data import Sample, ScoreReport, read_jsonl, score_records, write_jsonl
from .features import FeatureCache, FeatureRecord, ToyEncoder, cache_write, extract_record
from .model import Example, ModelConfig, TinyGiantVLM, encode_batch, full_forward, make_batch, predict_batch
from .moe import GateDecision, MoeConfig
from .optim import AdamWState, adamw_step, clip_grad_norm
from .text import Vocabulary

log = logging.getLogger(__name__)

PHASE_TARGETS = {1: "answer_free", 2: "answer_norm"}


class MissingCacheError(FileNotFoundError):
    pass


# features -------------------------------------------------------------------------


def build_encoders(cfg: RunConfig) -> tuple[ToyEncoder, ToyEncoder]:
    return (
        ToyEncoder.init(cfg.rgb, np.random.default_rng([cfg.seed, 2, 0])),
        ToyEncoder.init(cfg.depth, np.random.default_rng([cfg.seed, 2, 1])),
    )


def sample_features(sample: Sample, encoders: tuple[ToyEncoder, ToyEncoder], threshold: float = 0.5) -> FeatureRecord:
    return extract_record(sample.id, sample.rgb, sample.depth, sample.masks(), *encoders, threshold=threshold)


def cache_paths(cache_dir, split: str) -> tuple[Path, Path]:
    cache_dir = Path(cache_dir)
    return cache_dir / f"{split}.tgfc", cache_dir / f"{split}.samples.jsonl"


def cache_split(samples: Sequence[Sample], cache_dir, split: str, encoders, threshold: float = 0.5) -> None:
    """Write the feature cache plus a pixel-free text sidecar for one split."""
    feat_path, text_path = cache_paths(cache_dir, split)
    cache_write((sample_features(s, encoders, threshold) for s in samples), feat_path)
    write_jsonl(text_path, (s.text_record() for s in samples))


def load_examples(cache_dir, split: str) -> list[Example]:
    """Examples built from the cache alone; never opens the image dataset."""
    feat_path, text_path = cache_paths(cache_dir, split)
    if not feat_path.exists() or not text_path.exists():
        raise MissingCacheError(
            f"no feature cache for split {split!r} in {cache_dir}; run `tinygiant cache-features` first"
        )
    cache = FeatureCache(feat_path)
    return [
        Example(r["id"], r["question"], r["task"], r["answer_free"], r["answer_norm"], cache.read(r["id"]))
        for r in read_jsonl(text_path)
    ]


def examples_from_samples(samples: Sequence[Sample], encoders, threshold: float = 0.5) -> list[Example]:
    return [
        Example(s.id, s.question, s.task, s.answer_free, s.answer_norm, sample_features(s, encoders, threshold))
        for s in samples
    ]


def build_vocab(examples: Sequence[Example]) -> Vocabulary:
    texts = []
    for ex in examples:
        texts += [ex.question, ex.answer_free, ex.answer_norm]
    return Vocabulary.build(texts)


def drop_distance_head(examples: Sequence[Example], n: int) -> list[Example]:
    """Drop the first ``n`` distance examples in file order."""
    out, dropped = [], 0
    for ex in examples:
        if ex.task == "distance" and dropped < n:
            dropped += 1
            continue
        out.append(ex)
    return out


# training -------------------------------------------------------------------------


def iter_batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator | None) -> Iterator[list[Example]]:
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield [examples[i] for i in order[start : start + batch_size]]


def train_step(model: TinyGiantVLM, batch, moe_cfg: MoeConfig, opt: AdamWState, max_grad_norm: float) -> float:
    params = model.parameters()
    with T.Tape() as tape:
        loss = full_forward(batch, model, moe_cfg)
    tape.backward(loss)
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    if max_grad_norm > 0:
        clip_grad_norm(grads, max_grad_norm)
    adamw_step(params, grads, opt)
    for p in params.values():
        p.grad = None
    return loss.item()


def train_phase(
    model: TinyGiantVLM,
    examples: Sequence[Example],
    vocab: Vocabulary,
    phase: int,
    epochs: int,
    tc: TrainConfig,
    moe_cfg: MoeConfig,
    seed: int,
    log_path=None,
    opt: AdamWState | None = None,
    start_epoch: int = 1,
) -> list[dict]:
    """Run ``epochs`` passes; returns one log row per epoch.

    A phase normally starts with a fresh optimizer. Passing ``opt`` and
    ``start_epoch`` continues an interrupted phase where it left off.
    """
    if opt is None:
        opt = AdamWState(learning_rate=tc.lr, weight_decay=tc.weight_decay)
    target = PHASE_TARGETS[phase]
    rows = []
    for epoch in range(start_epoch, start_epoch + epochs):
        start = time.perf_counter()
        rng = np.random.default_rng([seed, 4, phase, epoch])
        losses = [
            train_step(model, make_batch(chunk, vocab, target), moe_cfg, opt, tc.max_grad_norm)
            for chunk in iter_batches(examples, tc.batch_size, rng)
        ]
        row = {
            "phase": phase,
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "first_batch_loss": losses[0],
            "last_batch_loss": losses[-1],
            "steps": len(losses),
            "wall_time": time.perf_counter() - start,
        }
        log.info("phase %d epoch %d loss %.4f", phase, epoch, row["loss"])
        rows.append(row)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")
    return rows


def init_model(cfg: RunConfig, vocab: Vocabulary) -> tuple[TinyGiantVLM, ModelConfig]:
    mc = model_config(cfg, len(vocab))
    return TinyGiantVLM.init(mc, np.random.default_rng([cfg.seed, 3])), mc


@dataclass
class CurriculumResult:
    model: TinyGiantVLM
    model_config: ModelConfig
    history: list[dict]
    checkpoints: list[Path]


def run_curriculum(cfg: RunConfig, examples: Sequence[Example], vocab: Vocabulary, run_dir=None) -> CurriculumResult:
    """Phase 1 on free-form answers, then Phase 2 on normalized answers.

    With a ``run_dir``, Phase 2 starts from the Phase-1 checkpoint as read
    back from disk, and every phase leaves a checkpoint behind.
    """
    tc = cfg.train
    if not (tc.phase1_enabled or tc.phase2_enabled):
        raise ValueError("at least one training phase must be enabled")
    examples = drop_distance_head(examples, tc.drop_distance_head)
    model, mc = init_model(cfg, vocab)
    history: list[dict] = []
    checkpoints: list[Path] = []
    log_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "train_log.jsonl"
        log_path.write_text("")
    phases = [(1, tc.epochs_phase1)] if tc.phase1_enabled else []
    phases += [(2, tc.epochs_phase2)] if tc.phase2_enabled else []
    for phase, epochs in phases:
        if phase == 2 and checkpoints:
            model = TinyGiantVLM.load(checkpoints[-1], mc)
        history += train_phase(model, examples, vocab, phase, epochs, tc, cfg.moe, cfg.seed, log_path)
        if run_dir is not None:
            path = run_dir / f"phase{phase}.tgvm"
            model.save(path)
            checkpoints.append(path)
    if run_dir is not None:
        model.save(run_dir / "model.tgvm")
    return CurriculumResult(model, mc, history, checkpoints)


# inference ------------------------------------------------------------------------


def predict(
    model: TinyGiantVLM,
    examples: Sequence[Example],
    vocab: Vocabulary,
    moe_cfg: MoeConfig,
    batch_size: int = 32,
    max_new_tokens: int = 24,
    label_scoring: bool = True,
) -> dict[str, tuple[str, str]]:
    out: dict[str, tuple[str, str]] = {}
    for chunk in iter_batches(examples, batch_size, None):
        batch = make_batch(chunk, vocab, target_field=None)
        for ex, pair in zip(chunk, predict_batch(batch, model, moe_cfg, vocab, max_new_tokens, label_scoring)):
            out[ex.id] = pair
    return out


def evaluate(
    model: TinyGiantVLM,
    examples: Sequence[Example],
    vocab: Vocabulary,
    moe_cfg: MoeConfig,
    tc: TrainConfig,
) -> tuple[ScoreReport, dict[str, tuple[str, str]]]:
    preds = predict(model, examples, vocab, moe_cfg, tc.batch_size, tc.max_new_tokens, tc.label_scoring)
    truth = [{"id": ex.id, "task": ex.task, "answer_norm": ex.answer_norm} for ex in examples]
    report = score_records({k: v[1] for k, v in preds.items()}, truth, tc.distance_tolerance)
    return report, preds


def exact_match(preds: dict[str, tuple[str, str]], examples: Sequence[Example]) -> float:
    return float(np.mean([preds[ex.id][1] == ex.answer_norm for ex in examples]))


def mean_loss(model: TinyGiantVLM, examples: Sequence[Example], vocab: Vocabulary, moe_cfg: MoeConfig, target: str, batch_size: int = 32) -> float:
    losses, weights = [], []
    for chunk in iter_batches(examples, batch_size, None):
        losses.append(full_forward(make_batch(chunk, vocab, target), model, moe_cfg).item())
        weights.append(len(chunk))
    return float(np.average(losses, weights=weights))


def gate_decisions(model: TinyGiantVLM, examples: Sequence[Example], vocab: Vocabulary, moe_cfg: MoeConfig, batch_size: int = 32) -> list[tuple[str, GateDecision]]:
    """(sample id, decision) for every region token, tokens renumbered per sample."""
    out = []
    for chunk in iter_batches(examples, batch_size, None):
        batch = make_batch(chunk, vocab, target_field=None)
        res = encode_batch(batch, model, moe_cfg)
        counters: dict[int, int] = {}
        for dec in res.decisions:
            row = int(batch.region_index[0][dec.token])
            dec.token = counters.get(row, 0)
            counters[row] = dec.token + 1
            out.append((batch.ids[row], dec))
    return out


def write_predictions(path, preds: dict[str, tuple[str, str]]) -> None:
    write_jsonl(path, ({"id": k, "answer": v[1], "raw": v[0]} for k, v in preds.items()))


def write_report(path, report: ScoreReport, extra: dict | None = None) -> None:
    payload = {**report.to_json(), **(extra or {})}
    atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    save_checkpoint(path, arrays)
