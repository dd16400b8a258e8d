from typing import Dict, Iterator, List, Tuple

import numpy as np

from autograd import ops
from autograd.tensor import Tensor

INIT_STD = 0.02


class Module:
    """Named parameter registry shared by every network component."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        tensor = Tensor(data, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._params.items():
            yield prefix + name, tensor
        for child_name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()


def normal_init(rng: np.random.Generator, shape: Tuple[int, ...], std: float = INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = self.add_param("weight", normal_init(rng, (in_dim, out_dim)))
        self.bias = self.add_param("bias", np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(ops.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-12):
        super().__init__()
        self.eps = eps
        self.gain = self.add_param("gain", np.ones(width))
        self.bias = self.add_param("bias", np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self.eps)
