import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from autograd import ops
from autograd.tensor import Tensor
from errors import ShapeError
from network.layers import Linear, Module, normal_init

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MoEConfig:
    hidden: int = 64
    num_experts: int = 8
    top_k: int = 2
    expert_dim: int = 0
    residual: bool = True
    aux_weight: float = 0.0

    def __post_init__(self) -> None:
        if not 1 <= self.top_k <= self.num_experts:
            raise ShapeError(f"top_k must be in [1, {self.num_experts}], got {self.top_k}")

    @property
    def inner_dim(self) -> int:
        return self.expert_dim or 4 * self.hidden


class Expert(Module):
    """H -> F -> H feed-forward with GELU."""

    def __init__(self, hidden: int, inner: int, rng: np.random.Generator):
        super().__init__()
        self.fc_in = self.add_child("fc_in", Linear(hidden, inner, rng))
        self.fc_out = self.add_child("fc_out", Linear(inner, hidden, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc_out(ops.gelu(self.fc_in(x)))


class Gate(Module):
    def __init__(self, hidden: int, num_experts: int, top_k: int, rng: np.random.Generator):
        super().__init__()
        self.top_k = top_k
        self.weight = self.add_param("weight", normal_init(rng, (num_experts, hidden)))
        self.bias = self.add_param("bias", np.zeros(num_experts))

    @property
    def num_experts(self) -> int:
        return self.weight.shape[0]


@dataclass
class MoEOutput:
    output: Tensor
    probs: Tensor
    keep: np.ndarray
    aux_loss: Optional[Tensor] = None

    @property
    def top1(self) -> np.ndarray:
        return np.argmax(self.probs.data, axis=-1)


def _as_rows(x: Tensor) -> Tensor:
    return ops.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def gate_probs(x: Tensor, gate: Gate) -> Tensor:
    """softmax(W x + b) over experts; x is [H] or [N x H]."""
    rows = _as_rows(x)
    logits = ops.add(ops.matmul(rows, ops.transpose(gate.weight, (1, 0))), gate.bias)
    probs = ops.softmax(logits)
    return ops.reshape(probs, (gate.num_experts,)) if x.ndim == 1 else probs


def select_top_k(probs: np.ndarray, top_k: int) -> np.ndarray:
    """Boolean keep-mask of the top_k largest entries per row; ties go to the lower expert index."""
    order = np.argsort(-probs, axis=-1, kind="stable")[..., :top_k]
    keep = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(keep, order, True, axis=-1)
    return keep


def importance_loss(probs: Tensor) -> Tensor:
    """Squared coefficient of variation of per-expert summed gate probability."""
    n, k = probs.shape
    importance = ops.sum(probs, axis=0)
    # Rows of probs sum to 1, so the mean importance is the constant n / k.
    centered = ops.sub(importance, Tensor(np.full(k, n / k)))
    return ops.scale(ops.sum(ops.mul(centered, centered)), k / float(n * n))


def moe_forward(x: Tensor, experts: List[Expert], gate: Gate, top_k: Optional[int] = None) -> MoEOutput:
    """
    Sparse mixture: keep the top_k gate probabilities, renormalise them, and sum
    the kept experts' outputs weighted by the renormalised gates.

    Each expert only sees the rows routed to it; contributions are merged in
    ascending expert order. x is [H] or [N x H].
    """
    k = gate.top_k if top_k is None else top_k
    if len(experts) != gate.num_experts:
        raise ShapeError(f"{len(experts)} experts for a {gate.num_experts}-way gate")
    rows = _as_rows(x)
    n = rows.shape[0]
    if n == 0:
        raise ShapeError("moe_forward needs at least one row")
    probs = gate_probs(rows, gate)
    keep = select_top_k(probs.data, k)
    weights = ops.topk_renormalize(probs, keep)

    merged: Optional[Tensor] = None
    for e, expert in enumerate(experts):
        routed = np.flatnonzero(keep[:, e])
        if routed.size == 0:
            continue
        expert_out = expert(ops.index(rows, routed))
        gate_w = ops.index(weights, (routed, np.full(routed.size, e)))
        part = ops.scatter_rows(ops.scale_rows(expert_out, gate_w), routed, n)
        merged = part if merged is None else ops.add(merged, part)

    output = ops.reshape(merged, (x.shape[0],)) if x.ndim == 1 else merged
    return MoEOutput(output=output, probs=probs, keep=keep)


def expert_load(top1: np.ndarray, num_experts: int) -> np.ndarray:
    """Top-1 assignment counts per expert."""
    top1 = np.asarray(top1, dtype=np.int64).ravel()
    if top1.size == 0:
        raise ValueError("expert_load needs at least one routed position")
    return np.bincount(top1, minlength=num_experts)


class MoEHead(Module):
    """Gate + K experts (+ residual) followed by the linear projection to location logits."""

    def __init__(self, config: MoEConfig, n_classes: int, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.gate = self.add_child("gate", Gate(config.hidden, config.num_experts, config.top_k, rng))
        self.experts: List[Expert] = [
            self.add_child(f"expert{e}", Expert(config.hidden, config.inner_dim, rng))
            for e in range(config.num_experts)
        ]
        self.head = self.add_child("head", Linear(config.hidden, n_classes, rng))


def mixture_rows(hidden: Tensor, moe: MoEHead) -> Tuple[Tensor, MoEOutput]:
    """The mixture (plus residual) feeding the output head, and the routing that produced it."""
    routed = moe_forward(hidden, moe.experts, moe.gate)
    mixed = ops.add(hidden, routed.output) if moe.config.residual else routed.output
    if moe.config.aux_weight > 0.0:
        routed.aux_loss = ops.scale(importance_loss(routed.probs), moe.config.aux_weight)
    return mixed, routed


def predict_logits(hidden: Tensor, moe: MoEHead) -> MoEOutput:
    """Position-wise MoE over [N x H] rows, then the output head: logits [N x G^2]."""
    mixed, routed = mixture_rows(hidden, moe)
    return MoEOutput(output=moe.head(mixed), probs=routed.probs, keep=routed.keep, aux_loss=routed.aux_loss)


@dataclass
class RoutingStats:
    """Per-epoch top-1 tallies, written as `epoch,expert,top1_count`."""

    num_experts: int
    rows: List[List[int]] = field(default_factory=list)
    _current: Dict[int, np.ndarray] = field(default_factory=dict)

    def record(self, epoch: int, top1: np.ndarray) -> None:
        counts = self._current.setdefault(epoch, np.zeros(self.num_experts, dtype=np.int64))
        counts += expert_load(top1, self.num_experts)

    def close_epoch(self, epoch: int) -> np.ndarray:
        counts = self._current.pop(epoch, np.zeros(self.num_experts, dtype=np.int64))
        for e, c in enumerate(counts.tolist()):
            self.rows.append([epoch, e, int(c)])
        total = int(counts.sum())
        if total:
            logger.info("Expert load epoch=%s max_share=%.3f counts=%s", epoch, counts.max() / total, counts.tolist())
        return counts
