"""Small pre-norm transformer encoder-decoder with learned absolute positions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Attention, FeedForward, LayerNorm, Linear, attention, param
from .tensor import Tensor


class SequenceTooLongError(ValueError):
    pass


@dataclass
class Seq2SeqConfig:
    vocab_size: int = 0
    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    ffn_width: int = 256
    max_len: int = 64
    pad_id: int = 0
    eos_id: int = 1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")


@dataclass
class EncoderLayer:
    ln_attn: LayerNorm
    self_attn: Attention
    ln_ffn: LayerNorm
    ffn: FeedForward


@dataclass
class DecoderLayer:
    ln_self: LayerNorm
    self_attn: Attention
    ln_cross: LayerNorm
    cross_attn: Attention
    ln_ffn: LayerNorm
    ffn: FeedForward


@dataclass
class Seq2Seq:
    token_embedding: Tensor
    enc_positions: Tensor
    dec_positions: Tensor
    encoder: list[EncoderLayer]
    decoder: list[DecoderLayer]
    final_norm: LayerNorm
    lm_head: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: Seq2SeqConfig) -> "Seq2Seq":
        d, h = cfg.d_model, cfg.n_heads
        out_std = 1.0 / np.sqrt(cfg.ffn_width) / 2
        enc = [
            EncoderLayer(LayerNorm.init(d), Attention.init(rng, d, h), LayerNorm.init(d), FeedForward.init(rng, d, cfg.ffn_width, out_std))
            for _ in range(cfg.n_enc_layers)
        ]
        dec = [
            DecoderLayer(
                LayerNorm.init(d),
                Attention.init(rng, d, h),
                LayerNorm.init(d),
                Attention.init(rng, d, h),
                LayerNorm.init(d),
                FeedForward.init(rng, d, cfg.ffn_width, out_std),
            )
            for _ in range(cfg.n_dec_layers)
        ]
        return cls(
            param(rng.normal(0.0, 1.0, (cfg.vocab_size, d))),
            param(rng.normal(0.0, 0.1, (cfg.max_len, d))),
            param(rng.normal(0.0, 0.1, (cfg.max_len, d))),
            enc,
            dec,
            LayerNorm.init(d),
            # small output weights keep the untrained next-token distribution near uniform
            Linear.init(rng, d, cfg.vocab_size, std=0.02),
        )


def embed_tokens(model: Seq2Seq, ids: np.ndarray) -> Tensor:
    return T.embedding_lookup(model.token_embedding, ids)


def encode_sequence(embeddings: Tensor, mask: np.ndarray, model: Seq2Seq) -> Tensor:
    """Contextualize (B, L, d) embeddings; ``mask`` (B, L) is True on real tokens."""
    if embeddings.ndim == 2:
        return encode_sequence(embeddings.reshape(1, *embeddings.shape), np.asarray(mask)[None], model).reshape(
            *embeddings.shape
        )
    b, length, d = embeddings.shape
    if length > model.enc_positions.shape[0]:
        raise SequenceTooLongError(f"input of {length} tokens exceeds max_len {model.enc_positions.shape[0]}")
    key_mask = np.asarray(mask, dtype=bool)[:, None, None, :]
    x = embeddings + T.gather(model.enc_positions, np.arange(length))
    for layer in model.encoder:
        a, _ = _self_attend(x, layer, key_mask)
        x = x + a
        x = x + layer.ffn(layer.ln_ffn(x))
    return x


def _self_attend(x: Tensor, layer, mask) -> tuple[Tensor, Tensor]:
    normed = layer.ln_attn(x) if isinstance(layer, EncoderLayer) else layer.ln_self(x)
    return attention(normed, normed, layer.self_attn, mask)


def shift_right(targets: np.ndarray, start_id: int) -> np.ndarray:
    start = np.full((targets.shape[0], 1), start_id, dtype=np.int64)
    return np.concatenate([start, targets[:, :-1]], axis=1)


def decoder_logits(memory: Tensor, memory_mask: np.ndarray, dec_ids: np.ndarray, model: Seq2Seq) -> Tensor:
    """Teacher-forced logits (B, T, V) for decoder inputs ``dec_ids`` (B, T)."""
    b, t = dec_ids.shape
    if t > model.dec_positions.shape[0]:
        raise SequenceTooLongError(f"target of {t} tokens exceeds max_len {model.dec_positions.shape[0]}")
    causal = np.tril(np.ones((t, t), dtype=bool))[None, None]
    cross_mask = np.asarray(memory_mask, dtype=bool)[:, None, None, :]
    y = embed_tokens(model, dec_ids) + T.gather(model.dec_positions, np.arange(t))
    for layer in model.decoder:
        a, _ = _self_attend(y, layer, causal)
        y = y + a
        c, _ = attention(layer.ln_cross(y), memory, layer.cross_attn, cross_mask)
        y = y + c
        y = y + layer.ffn(layer.ln_ffn(y))
    return model.lm_head(model.final_norm(y))


def decode_loss(memory: Tensor, memory_mask: np.ndarray, targets: np.ndarray, model: Seq2Seq, pad_id: int = 0) -> Tensor:
    """Mean token NLL of ``targets`` (B, T, padded with ``pad_id``) given the encoder memory."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0 or not (targets != pad_id).any():
        raise ValueError("empty target sequence")
    logits = decoder_logits(memory, memory_mask, shift_right(targets, pad_id), model)
    return T.cross_entropy(logits, targets, pad_id=pad_id)


def sequence_nll(memory: Tensor, memory_mask: np.ndarray, targets: np.ndarray, model: Seq2Seq, pad_id: int = 0) -> np.ndarray:
    """Per-item summed NLL (no tape), used to rank closed-set candidate answers."""
    targets = np.asarray(targets, dtype=np.int64)
    logits = decoder_logits(memory, memory_mask, shift_right(targets, pad_id), model).data
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return -(picked * (targets != pad_id)).sum(axis=1)


def generate(
    memory: Tensor, memory_mask: np.ndarray, model: Seq2Seq, max_new_tokens: int, pad_id: int = 0, eos_id: int = 1
) -> list[list[int]]:
    """Greedy decoding; argmax ties resolve to the lowest token id. EOS is not returned."""
    b = memory.shape[0]
    limit = min(max_new_tokens, model.dec_positions.shape[0])
    ids = np.full((b, 1), pad_id, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    out: list[list[int]] = [[] for _ in range(b)]
    for _ in range(limit):
        logits = decoder_logits(memory, memory_mask, ids, model).data[:, -1, :]
        nxt = np.argmax(logits, axis=-1)
        for i in range(b):
            if done[i]:
                continue
            if nxt[i] == eos_id:
                done[i] = True
            else:
                out[i].append(int(nxt[i]))
        if done.all():
            break
        ids = np.concatenate([ids, nxt[:, None]], axis=1)
    return out
