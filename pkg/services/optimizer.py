import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Tuple

import numpy as np

from autograd.tensor import Tensor
from errors import ConfigError, NumericError

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class ParamGroup:
    name: str
    lr: float
    params: List[Tuple[str, Tensor]]


@dataclass
class OptimizerState:
    """
    AdamW with decoupled weight decay and per-group learning rates.

    Update per parameter p with gradient g at step t (1-based), group lr:
    p <- p - lr * wd * p, then p <- p - lr * m_hat / (sqrt(v_hat) + eps).
    """

    groups: List[ParamGroup]
    weight_decay: float = 1e-3
    warmup_steps: int = 0
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen: Dict[str, str] = {}
        for group in self.groups:
            for name, param in group.params:
                if name in seen:
                    raise ConfigError(f"parameter {name} is in groups {seen[name]} and {group.name}")
                seen[name] = group.name
                self.m.setdefault(name, np.zeros_like(param.data))
                self.v.setdefault(name, np.zeros_like(param.data))

    def group_lrs(self) -> Dict[str, float]:
        return {g.name: g.lr for g in self.groups}

    def scheduled_lr(self, lr: float, step: int) -> float:
        if self.warmup_steps <= 0:
            return lr
        return lr * min(1.0, step / float(self.warmup_steps))

    def named_parameters(self) -> Iterable[Tuple[str, Tensor]]:
        for group in self.groups:
            yield from group.params

    def apply(self) -> None:
        """One update from the gradients currently stored on the parameters."""
        self.step += 1
        t = self.step
        bias1 = 1.0 - BETA1 ** t
        bias2 = 1.0 - BETA2 ** t
        for group in self.groups:
            lr = self.scheduled_lr(group.lr, t)
            for name, param in group.params:
                grad = param.grad if param.grad is not None else np.zeros_like(param.data)
                m = self.m[name]
                v = self.v[name]
                m *= BETA1
                m += (1.0 - BETA1) * grad
                v *= BETA2
                v += (1.0 - BETA2) * grad * grad
                param.data -= lr * self.weight_decay * param.data
                param.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)


def build_optimizer(
    groups: Dict[str, List[Tuple[str, Tensor]]],
    lrs: Dict[str, float],
    *,
    weight_decay: float,
    warmup_steps: int = 0,
) -> OptimizerState:
    missing = set(groups) - set(lrs)
    if missing:
        raise ConfigError(f"no learning rate for groups {sorted(missing)}")
    return OptimizerState(
        groups=[ParamGroup(name=name, lr=lrs[name], params=params) for name, params in groups.items()],
        weight_decay=weight_decay,
        warmup_steps=warmup_steps,
    )


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_grad_norm(params: List[Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most max_norm; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        raise NumericError(f"non-finite gradient norm {norm}")
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm
