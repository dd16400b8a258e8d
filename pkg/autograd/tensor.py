import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import NumericError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording (evaluation, optimizer updates)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """
    Dense float64 array with optional reverse-mode gradient tracking.

    - Leaves created with requires_grad=True own a zero-initialised grad buffer.
    - Results of recorded ops keep references to their inputs and a backward
      closure; the tape is rebuilt on every forward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if self.requires_grad else None
        self.op = name or "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], None],
        op: str,
    ) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.op = op
        out.grad = None
        tracked = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = tuple(parents) if tracked else ()
        out._backward = backward if tracked else None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    def backward(self, accumulate: bool = False) -> None:
        backward(self, accumulate=accumulate)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operator sugar; the implementations live in autograd.ops.
    def __add__(self, other):
        from autograd.ops import add

        return add(self, _wrap(other))

    def __radd__(self, other):
        from autograd.ops import add

        return add(_wrap(other), self)

    def __sub__(self, other):
        from autograd.ops import sub

        return sub(self, _wrap(other))

    def __mul__(self, other):
        from autograd.ops import mul, scale

        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from autograd.ops import scale

        return scale(self, -1.0)

    def __matmul__(self, other):
        from autograd.ops import matmul

        return matmul(self, other)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Graph:
    """Recorded operations reachable from a root, inputs before consumers."""

    nodes: List[Tensor]

    @staticmethod
    def from_root(root: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return Graph(nodes=order)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(loss: Tensor, accumulate: bool = False) -> Graph:
    """
    Populate d loss / d leaf on every requires_grad leaf reachable from loss.

    By default leaf grads are reset first; accumulate=True adds into them.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.from_root(loss)
    for node in graph.nodes:
        if node.is_leaf:
            if not accumulate:
                node.zero_grad()
        else:
            node.grad = None
    if not loss.requires_grad:
        return graph

    if loss.is_leaf:
        loss.accumulate_grad(np.ones_like(loss.data))
        return graph
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
    return graph
