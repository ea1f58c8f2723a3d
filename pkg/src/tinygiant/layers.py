"""Parameter containers and the small building blocks shared by every module."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def named_parameters(obj, prefix: str = "") -> dict[str, Tensor]:
    """Walk dataclasses/lists and collect every Tensor under a dotted name."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            sub = f"{prefix}.{f.name}" if prefix else f.name
            out.update(named_parameters(getattr(obj, f.name), sub))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(named_parameters(item, f"{prefix}.{i}"))
    return out


@dataclass
class Linear:
    weight: Tensor  # (in, out)
    bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, std: float | None = None) -> "Linear":
        std = 1.0 / np.sqrt(n_in) if std is None else std
        return cls(param(rng.normal(0.0, std, (n_in, n_out))), param(np.zeros(n_out)))

    @classmethod
    def identity(cls, n: int) -> "Linear":
        return cls(param(np.eye(n)), param(np.zeros(n)))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


@dataclass
class LayerNorm:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, n: int) -> "LayerNorm":
        return cls(param(np.ones(n)), param(np.zeros(n)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


@dataclass
class FeedForward:
    fc1: Linear
    fc2: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, hidden: int, out_std: float | None = None) -> "FeedForward":
        return cls(Linear.init(rng, d, hidden), Linear.init(rng, hidden, d, std=out_std))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


@dataclass
class Attention:
    query: Linear
    key: Linear
    value: Linear
    out: Linear
    n_heads: int

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, n_heads: int, d_kv: int | None = None) -> "Attention":
        d_kv = d if d_kv is None else d_kv
        return cls(
            Linear.init(rng, d, d),
            Linear.init(rng, d_kv, d),
            Linear.init(rng, d_kv, d),
            Linear.init(rng, d, d, std=1.0 / np.sqrt(d) / 2),
            n_heads,
        )


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, length, d = x.shape
    return x.reshape(b, length, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, length, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, length, h * dh)


def attention(
    queries: Tensor, keys_values: Tensor, attn: Attention, mask: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product attention.

    ``queries`` is (B, Lq, d), ``keys_values`` is (B, Lk, d_kv) and ``mask`` a
    boolean array broadcastable to (B, heads, Lq, Lk), True where attention is
    allowed. Returns the projected output and the attention weights.
    """
    d = queries.shape[-1]
    if d % attn.n_heads:
        raise ValueError(f"width {d} not divisible by {attn.n_heads} heads")
    q = split_heads(attn.query(queries), attn.n_heads)
    k = split_heads(attn.key(keys_values), attn.n_heads)
    v = split_heads(attn.value(keys_values), attn.n_heads)
    scale = 1.0 / np.sqrt(d // attn.n_heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    weights = T.softmax(scores, axis=-1, mask=mask)
    return attn.out(merge_heads(weights @ v)), weights
