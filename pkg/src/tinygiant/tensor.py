"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)

Outside a tape every op is a plain numpy computation, which is what
inference and generation use.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "tensor",
    "backward",
    "set_debug",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "relu",
    "sqrt",
    "softmax",
    "layer_norm",
    "concat",
    "embedding_lookup",
    "mean_over_indices",
    "gather",
    "replace_at",
    "scatter_add",
    "cross_entropy",
]

_TAPES: list["Tape"] = []
_DEBUG = False


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf (slow)."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable ops; backward replays it in reverse."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise TapeError("loss does not depend on any tensor that requires grad")
        if loss._tape is not None and loss._tape is not self:
            raise TapeError("loss was recorded on a different tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss._tape is None:
            leaves[id(loss)] = loss
        for out, parents, rule in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
                if parent._tape is None:
                    leaves[key] = parent
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> None:
    """Backpropagate ``loss`` through the tape that recorded it."""
    if loss._tape is None:
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise TapeError("loss is not reachable from any recorded tape")
    loss._tape.backward(loss)


def _result(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor(data)
    if _DEBUG and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite values produced by {rule.__qualname__}")
    if _TAPES and any(p.requires_grad for p in parents):
        tape = _TAPES[-1]
        out.requires_grad = True
        out._tape = tape
        tape.records.append((out, tuple(parents), rule))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return _result(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def rule(g):
        # subgradient 0 at the origin keeps zero-distance routing finite
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _result(out, (x,), rule)


# linear algebra and shape ---------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; a 1-D left operand is treated as a row vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 1 and b.ndim >= 2:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + (b.shape[-1],))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), rule)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape) -> Tensor:
    original = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


# normalizations --------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get exactly zero weight."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    n = x.shape[-1]

    def rule(g):
        gx_hat = g * gain.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), rule)


# indexing --------------------------------------------------------------------


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table of {table.shape[0]} rows")

    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result(table.data[ids], (table,), rule)


def mean_over_indices(x: Tensor, indices) -> Tensor:
    """Mean of the rows of ``x`` selected by ``indices``."""
    idx = np.asarray(sorted(indices), dtype=np.int64) if not isinstance(indices, np.ndarray) else indices
    if idx.size == 0:
        raise IndexError("mean over an empty index set")
    if idx.min() < 0 or idx.max() >= x.shape[0]:
        raise IndexError(f"row index out of range for {x.shape[0]} rows")
    n = idx.size

    def rule(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g / n)
        return (gx,)

    return _result(x.data[idx].sum(axis=0) / n, (x,), rule)


def gather(x: Tensor, index) -> Tensor:
    """``x[index]`` for integer (or tuple-of-integer) fancy indexing on leading axes."""

    def rule(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(x.data[index], (x,), rule)


def replace_at(x: Tensor, index, values: Tensor) -> Tensor:
    """Copy of ``x`` with ``x[index] = values``; the index must not repeat."""
    out = x.data.copy()
    out[index] = values.data

    def rule(g):
        gx = g.copy()
        gx[index] = 0.0
        return gx, g[index]

    return _result(out, (x, values), rule)


def scatter_add(values: Tensor, index, shape) -> Tensor:
    """Zeros of ``shape`` with ``values`` accumulated at ``index`` rows."""
    out = np.zeros(shape)
    np.add.at(out, index, values.data)
    return _result(out, (values,), lambda g: (g[index],))


# loss --------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets, pad_id: int | None = None) -> Tensor:
    """Mean token negative log-likelihood, skipping ``pad_id`` targets.

    ``logits`` has shape (..., V) and ``targets`` the matching leading shape.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    vocab = logits.shape[-1]
    keep = np.ones(targets.shape, dtype=bool) if pad_id is None else targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy over an all-pad target is undefined")
    if targets[keep].size and (targets[keep].min() < 0 or targets[keep].max() >= vocab):
        raise IndexError(f"target id out of range for vocabulary of {vocab}")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    safe_targets = np.where(keep, targets, 0)
    picked = np.take_along_axis(logp, safe_targets[..., None], axis=-1)[..., 0]
    loss = -(picked * keep).sum() / count

    def rule(g):
        probs = np.exp(logp)
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, safe_targets[..., None], 1.0, axis=-1)
        return (g * (probs - onehot) * keep[..., None] / count,)

    return _result(np.asarray(loss), (logits,), rule)
