"""Global/region projections, placeholder injection, and region-to-global cross-attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Attention, Linear, attention
from .tensor import Tensor
from .text import Vocabulary


class InjectionError(ValueError):
    pass


@dataclass
class GlobalProjection:
    rgb: Linear
    depth: Linear

    @classmethod
    def init(cls, rng, rgb_dim: int, depth_dim: int, d_proj: int) -> "GlobalProjection":
        return cls(Linear.init(rng, rgb_dim, d_proj), Linear.init(rng, depth_dim, d_proj))


@dataclass
class RegionMlp:
    rgb: Linear
    depth: Linear
    fc1: Linear
    fc2: Linear

    @classmethod
    def init(cls, rng, rgb_dim: int, depth_dim: int, d_proj: int, hidden: int, d_model: int) -> "RegionMlp":
        return cls(
            Linear.init(rng, rgb_dim, d_proj),
            Linear.init(rng, depth_dim, d_proj),
            Linear.init(rng, 2 * d_proj, hidden, std=np.sqrt(2.0 / (2 * d_proj))),
            Linear.init(rng, hidden, d_model, std=np.sqrt(2.0 / hidden)),
        )


@dataclass
class CrossAttention:
    attn: Attention

    @classmethod
    def init(cls, rng, d_model: int, d_proj: int, n_heads: int) -> "CrossAttention":
        return cls(Attention.init(rng, d_model, n_heads, d_kv=d_proj))


def fuse_global(f_rgb: Tensor, f_depth: Tensor, proj: GlobalProjection) -> tuple[Tensor, Tensor]:
    """Project both global features; return the concatenation g and a two-token memory.

    Works on single vectors or on a leading batch axis. The memory has the
    projected RGB vector as row 0 and the projected depth vector as row 1.
    """
    p_rgb = proj.rgb(f_rgb)
    p_depth = proj.depth(f_depth)
    g = T.concat([p_rgb, p_depth], axis=-1)
    lead = p_rgb.shape[:-1]
    width = p_rgb.shape[-1]
    memory = T.concat([p_rgb.reshape(*lead, 1, width), p_depth.reshape(*lead, 1, width)], axis=-2)
    return g, memory


def region_mlp(f_rgb: Tensor, f_depth: Tensor, mlp: RegionMlp) -> Tensor:
    h = T.concat([mlp.rgb(f_rgb), mlp.depth(f_depth)], axis=-1)
    return T.relu(mlp.fc2(T.relu(mlp.fc1(h))))


@dataclass
class InjectedSequence:
    token_ids: np.ndarray
    embeddings: Tensor
    placeholder_positions: list[int]
    attention_mask: np.ndarray


def placeholder_positions(token_ids, vocab: Vocabulary) -> list[int]:
    return [i for i, t in enumerate(token_ids) if vocab.is_placeholder(int(t))]


def inject(question: str, region_feats: Tensor | None, vocab: Vocabulary, token_embedding: Tensor) -> InjectedSequence:
    """Embed ``question`` and overwrite each ``<Rj>`` position with row j of ``region_feats``."""
    ids = np.asarray(vocab.encode(question), dtype=np.int64)
    positions = placeholder_positions(ids, vocab)
    expected = 0 if region_feats is None else region_feats.shape[0]
    if len(positions) != expected:
        raise InjectionError(f"expected {expected} region placeholders, found {len(positions)} in {question!r}")
    order = [int(ids[p]) - vocab.placeholder_id(0) for p in positions]
    if order != list(range(len(positions))):
        raise InjectionError(f"placeholders must appear as <R0>, <R1>, ... in order, got {order}")
    emb = T.embedding_lookup(token_embedding, ids)
    if positions:
        emb = inject_rows(emb, np.asarray(positions), region_feats)
    return InjectedSequence(ids, emb, positions, np.ones(len(ids), dtype=bool))


def inject_rows(embeddings: Tensor, index, region_feats: Tensor) -> Tensor:
    return T.replace_at(embeddings, index, region_feats)


def cross_attend(region_ctx: Tensor, memory: Tensor, attn: CrossAttention) -> tuple[Tensor, Tensor]:
    """Each region row attends over its sample's global memory, plus a residual.

    ``region_ctx`` is (R, d_model); ``memory`` is (R, M, d_proj) (one memory per
    region) or (M, d_proj) shared by all regions. Returns C (R, d_model) and
    the attention weights (R, heads, 1, M).
    """
    r, d = region_ctx.shape
    if memory.ndim == 2:
        memory = T.gather(memory.reshape(1, *memory.shape), np.zeros(r, dtype=np.int64))
    out, weights = attention(region_ctx.reshape(r, 1, d), memory, attn.attn)
    return out.reshape(r, d) + region_ctx, weights


def reinject(states: Tensor, positions, z: Tensor) -> Tensor:
    """Overwrite encoder rows at ``positions`` with ``z``.

    ``positions`` is a list of row indices for an (L, d) state matrix, or a
    (batch_index, position) pair of arrays for (B, L, d).
    """
    if isinstance(positions, tuple):
        b_idx, p_idx = (np.asarray(a, dtype=np.int64) for a in positions)
        if p_idx.size and (p_idx.min() < 0 or p_idx.max() >= states.shape[1] or b_idx.max() >= states.shape[0]):
            raise IndexError("re-injection position out of range")
        index = (b_idx, p_idx)
        count = p_idx.size
    else:
        index = np.asarray(positions, dtype=np.int64)
        if index.size and (index.min() < 0 or index.max() >= states.shape[0]):
            raise IndexError(f"re-injection position out of range for {states.shape[0]} rows")
        count = index.size
    if count != (0 if z is None else z.shape[0]):
        raise InjectionError(f"{count} positions but {0 if z is None else z.shape[0]} fused rows")
    if count == 0:
        return states
    return T.replace_at(states, index, z)
