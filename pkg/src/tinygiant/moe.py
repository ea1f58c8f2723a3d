"""Sparse mixture-of-experts with Laplace (negative Euclidean distance) gating.

Each token is sent to the k experts whose gating vectors are nearest to it.
The selected experts are weighted by ``exp(-distance)`` normalized over the
selected set, and their outputs are summed with those weights. Selection is
piecewise constant, so gradients flow through the weights and the experts
only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import FeedForward, param
from .tensor import Tensor

TASKS = ("distance", "count", "mcq", "left_right")


class RoutingError(ValueError):
    pass


@dataclass
class MoeConfig:
    num_experts: int = 4
    top_k: int = 2
    expert_hidden: int = 128
    enabled: bool = True

    def __post_init__(self):
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError(f"top_k must be in [1, {self.num_experts}], got {self.top_k}")


@dataclass
class MoeLayer:
    gates: Tensor  # (S, d) gating vectors
    experts: list[FeedForward]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, config: MoeConfig) -> "MoeLayer":
        gates = param(rng.standard_normal((config.num_experts, d)) / np.sqrt(d))
        experts = [FeedForward.init(rng, d, config.expert_hidden) for _ in range(config.num_experts)]
        return cls(gates, experts)

    @property
    def num_experts(self) -> int:
        return self.gates.shape[0]


@dataclass
class GateDecision:
    token: int
    selected: list[int]
    weights: list[float]
    distances: list[float]
    task: str | None = field(default=None, compare=False)


def gate_distances(c: np.ndarray, gates: np.ndarray) -> np.ndarray:
    """Euclidean distance from each row of ``c`` (N, d) to each gate (S, d) -> (N, S)."""
    diff = c[:, None, :] - gates[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def select_top_k(distances: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest distances per row, ties to the lowest index, sorted ascending."""
    order = np.argsort(distances, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def laplace_weights(distances: np.ndarray) -> np.ndarray:
    shifted = np.exp(-(distances - distances.min(axis=-1, keepdims=True)))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _decision(j: int, dist_row: np.ndarray, chosen: np.ndarray, weight_row: np.ndarray) -> GateDecision:
    return GateDecision(
        token=j,
        selected=[int(i) for i in chosen],
        weights=[float(weight_row[i]) for i in chosen],
        distances=[float(dist_row[i]) for i in chosen],
    )


def route(c: np.ndarray, gates, k: int, token: int = 0) -> GateDecision:
    """Routing decision for a single token vector."""
    w = gates.data if isinstance(gates, Tensor) else np.asarray(gates, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64).reshape(1, -1)
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(w))):
        raise RoutingError("non-finite token or gating vector")
    if not 1 <= k <= w.shape[0]:
        raise RoutingError(f"k={k} outside [1, {w.shape[0]}]")
    dist = gate_distances(c, w)[0]
    chosen = select_top_k(dist, k)
    full = np.zeros_like(dist)
    full[chosen] = laplace_weights(dist[chosen])
    return _decision(token, dist, chosen, full)


def moe_forward(c: Tensor, layer: MoeLayer, k: int) -> tuple[Tensor, list[GateDecision]]:
    """Route every row of ``c`` (N, d) and combine the selected experts' outputs."""
    n, d = c.shape
    s = layer.num_experts
    if not np.all(np.isfinite(c.data)):
        raise RoutingError("non-finite token passed to the router")
    diff = c.reshape(n, 1, d) - layer.gates.reshape(1, s, d)
    dist = T.sqrt(T.sum(diff * diff, axis=-1))
    chosen = select_top_k(dist.data, k)
    selected = np.zeros((n, s), dtype=bool)
    np.put_along_axis(selected, chosen, True, axis=-1)
    weights = T.softmax(-dist, axis=-1, mask=selected)

    out = None
    for i, expert in enumerate(layer.experts):
        rows = np.flatnonzero(selected[:, i])
        if rows.size == 0:
            continue
        y = expert(T.gather(c, rows))
        w = T.gather(weights, (rows, np.full(rows.size, i))).reshape(rows.size, 1)
        contrib = T.scatter_add(y * w, rows, (n, d))
        out = contrib if out is None else out + contrib

    decisions = [_decision(j, dist.data[j], chosen[j], weights.data[j]) for j in range(n)]
    if out is None:
        out = c * 0.0
    return out, decisions


def apply_moe(c: Tensor, layer: MoeLayer, config: MoeConfig) -> tuple[Tensor, list[GateDecision]]:
    """The fusion layer as used in the model: identity when disabled."""
    if not config.enabled or c.shape[0] == 0:
        return c, []
    return moe_forward(c, layer, config.top_k)


def expert_usage_report(decisions: Sequence[GateDecision], num_experts: int, tasks: Sequence[str] = TASKS) -> np.ndarray:
    """(num_experts, len(tasks)) count of how often each expert was selected per task."""
    table = np.zeros((num_experts, len(tasks)), dtype=np.int64)
    column = {t: i for i, t in enumerate(tasks)}
    for dec in decisions:
        if dec.task not in column:
            raise ValueError(f"decision for token {dec.token} has unknown task {dec.task!r}")
        for e in dec.selected:
            table[e, column[dec.task]] += 1
    return table


def format_usage_table(table: np.ndarray, tasks: Sequence[str] = TASKS) -> str:
    header = "expert  " + "  ".join(f"{t:>10}" for t in tasks) + "       total"
    lines = [header]
    for e, row in enumerate(table):
        lines.append(f"{e:>6}  " + "  ".join(f"{v:>10d}" for v in row) + f"  {row.sum():>10d}")
    lines.append("total   " + "  ".join(f"{v:>10d}" for v in table.sum(axis=0)) + f"  {table.sum():>10d}")
    return "\n".join(lines)
