"""The full region-aware encoder-decoder: features -> injection -> encoder ->
cross-attention at placeholders -> MoE -> re-injection -> decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import normalize_answer
from .features import FeatureRecord
from .fusion import (
    CrossAttention,
    GlobalProjection,
    InjectionError,
    RegionMlp,
    cross_attend,
    fuse_global,
    inject_rows,
    placeholder_positions,
    region_mlp,
    reinject,
)
from .layers import named_parameters
from .moe import GateDecision, MoeConfig, MoeLayer, apply_moe
from .seq2seq import Seq2Seq, Seq2SeqConfig, decode_loss, embed_tokens, encode_sequence, generate, sequence_nll
from .tensor import Tensor
from .text import Vocabulary


@dataclass
class FusionConfig:
    d_proj: int = 32
    region_hidden: int = 128
    cross_heads: int = 4


@dataclass
class ModelConfig:
    seq2seq: Seq2SeqConfig = field(default_factory=Seq2SeqConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    moe: MoeConfig = field(default_factory=MoeConfig)
    rgb_dim: int = 32
    depth_dim: int = 32


@dataclass
class TinyGiantVLM:
    global_proj: GlobalProjection
    region_mlp: RegionMlp
    cross_attn: CrossAttention
    moe: MoeLayer
    backbone: Seq2Seq

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "TinyGiantVLM":
        d = cfg.seq2seq.d_model
        fc = cfg.fusion
        return cls(
            GlobalProjection.init(rng, cfg.rgb_dim, cfg.depth_dim, fc.d_proj),
            RegionMlp.init(rng, cfg.rgb_dim, cfg.depth_dim, fc.d_proj, fc.region_hidden, d),
            CrossAttention.init(rng, d, fc.d_proj, fc.cross_heads),
            MoeLayer.init(rng, d, cfg.moe),
            Seq2Seq.init(rng, cfg.seq2seq),
        )

    def parameters(self) -> dict[str, Tensor]:
        return named_parameters(self)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"parameter {name}: shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)

    def save(self, path) -> None:
        save_checkpoint(path, self.arrays())

    @classmethod
    def load(cls, path, cfg: ModelConfig) -> "TinyGiantVLM":
        model = cls.init(cfg, np.random.default_rng(0))
        model.load_arrays(load_checkpoint(path, expected=model.shapes()))
        return model


@dataclass
class Example:
    """One training/eval item: text fields plus cached features."""

    id: str
    question: str
    task: str
    answer_free: str
    answer_norm: str
    features: FeatureRecord

    def target(self, field_name: str) -> str:
        return getattr(self, field_name)


@dataclass
class Batch:
    ids: list[str]
    tasks: list[str]
    token_ids: np.ndarray  # (B, L)
    mask: np.ndarray  # (B, L) bool
    region_index: tuple[np.ndarray, np.ndarray]  # (batch row, position) per region
    region_rgb: np.ndarray  # (R, rgb_dim)
    region_depth: np.ndarray
    f_rgb: np.ndarray  # (B, rgb_dim)
    f_depth: np.ndarray
    targets: np.ndarray | None  # (B, T) padded with pad id, eos-terminated

    @property
    def num_regions(self) -> int:
        return self.region_index[0].size


def make_batch(examples: Sequence[Example], vocab: Vocabulary, target_field: str | None = "answer_norm") -> Batch:
    encoded = [vocab.encode(ex.question) for ex in examples]
    length = max(len(e) for e in encoded)
    token_ids = np.full((len(examples), length), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((len(examples), length), dtype=bool)
    b_idx, p_idx, reg_rgb, reg_depth = [], [], [], []
    for i, (ex, ids) in enumerate(zip(examples, encoded)):
        token_ids[i, : len(ids)] = ids
        mask[i, : len(ids)] = True
        positions = placeholder_positions(ids, vocab)
        if len(positions) != ex.features.num_regions:
            raise InjectionError(
                f"{ex.id}: expected {ex.features.num_regions} region placeholders, found {len(positions)}"
            )
        b_idx.extend([i] * len(positions))
        p_idx.extend(positions)
        reg_rgb.extend(ex.features.region_rgb)
        reg_depth.extend(ex.features.region_depth)
    targets = None
    if target_field is not None:
        tgt = [vocab.encode(ex.target(target_field), add_eos=True) for ex in examples]
        targets = np.full((len(examples), max(len(t) for t in tgt)), vocab.pad_id, dtype=np.int64)
        for i, t in enumerate(tgt):
            targets[i, : len(t)] = t
    rgb_dim = examples[0].features.f_rgb.size
    depth_dim = examples[0].features.f_depth.size
    return Batch(
        ids=[ex.id for ex in examples],
        tasks=[ex.task for ex in examples],
        token_ids=token_ids,
        mask=mask,
        region_index=(np.asarray(b_idx, dtype=np.int64), np.asarray(p_idx, dtype=np.int64)),
        region_rgb=np.asarray(reg_rgb).reshape(-1, rgb_dim),
        region_depth=np.asarray(reg_depth).reshape(-1, depth_dim),
        f_rgb=np.stack([ex.features.f_rgb for ex in examples]),
        f_depth=np.stack([ex.features.f_depth for ex in examples]),
        targets=targets,
    )


@dataclass
class ForwardResult:
    memory: Tensor  # re-injected encoder states
    decisions: list[GateDecision]
    region_ctx: Tensor | None = None
    fused: Tensor | None = None


def encode_batch(batch: Batch, model: TinyGiantVLM, moe_cfg: MoeConfig) -> ForwardResult:
    """Everything up to (and including) re-injection."""
    emb = embed_tokens(model.backbone, batch.token_ids)
    index = batch.region_index
    if batch.num_regions:
        r = region_mlp(T.Tensor(batch.region_rgb), T.Tensor(batch.region_depth), model.region_mlp)
        emb = inject_rows(emb, index, r)
    h = encode_sequence(emb, batch.mask, model.backbone)
    if not batch.num_regions:
        return ForwardResult(h, [])
    _, memory = fuse_global(T.Tensor(batch.f_rgb), T.Tensor(batch.f_depth), model.global_proj)
    ctx = T.gather(h, index)
    c, _ = cross_attend(ctx, T.gather(memory, index[0]), model.cross_attn)
    z, decisions = apply_moe(c, model.moe, moe_cfg)
    for dec in decisions:
        dec.task = batch.tasks[index[0][dec.token]]
    return ForwardResult(reinject(h, index, z), decisions, ctx, z)


def full_forward(batch: Batch, model: TinyGiantVLM, moe_cfg: MoeConfig, pad_id: int = 0) -> Tensor:
    if batch.targets is None:
        raise ValueError("batch has no targets")
    res = encode_batch(batch, model, moe_cfg)
    return decode_loss(res.memory, batch.mask, batch.targets, model.backbone, pad_id=pad_id)


def predict_batch(
    batch: Batch,
    model: TinyGiantVLM,
    moe_cfg: MoeConfig,
    vocab: Vocabulary,
    max_new_tokens: int = 24,
    label_scoring: bool = True,
) -> list[tuple[str, str]]:
    """(raw generated text, normalized answer) per item.

    With ``label_scoring``, left/right items pick whichever of the two labels
    the decoder assigns the higher likelihood instead of free generation.
    """
    res = encode_batch(batch, model, moe_cfg)
    gen = generate(res.memory, batch.mask, model.backbone, max_new_tokens, vocab.pad_id, vocab.eos_id)
    out = []
    for i, ids in enumerate(gen):
        text = vocab.decode(ids)
        out.append((text, normalize_answer(text, batch.tasks[i])))
    if label_scoring:
        rows = [i for i, t in enumerate(batch.tasks) if t == "left_right"]
        if rows:
            mem = T.Tensor(res.memory.data[rows])
            msk = batch.mask[rows]
            nll = []
            for label in ("left", "right"):
                tgt = np.asarray([vocab.encode(label, add_eos=True)] * len(rows))
                nll.append(sequence_nll(mem, msk, tgt, model.backbone, vocab.pad_id))
            for k, i in enumerate(rows):
                label = "left" if nll[0][k] <= nll[1][k] else "right"
                out[i] = (label, label)
    return out


__all__ = [
    "Batch",
    "Example",
    "FusionConfig",
    "ModelConfig",
    "TinyGiantVLM",
    "encode_batch",
    "full_forward",
    "make_batch",
    "predict_batch",
]
