"""Parameter containers and the layers shared by both training stages."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .rng import RngState
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor registered on a ``Module``."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


class Module:
    """Minimal registry of parameters and child modules in insertion order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        params, children = self.__dict__.get("_params"), self.__dict__.get("_children")
        if params is None:
            raise RuntimeError("Module.__init__ must run before attributes are set")
        # assignment to an existing key keeps its registry position
        if isinstance(value, Parameter):
            children.pop(name, None)
            params[name] = value
        elif isinstance(value, Module):
            params.pop(name, None)
            children[name] = value
        else:
            params.pop(name, None)
            children.pop(name, None)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, child in self._children.items():
            yield from child.named_modules(prefix + name + ".")

    def train(self, mode: bool = True):
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for name, p in own.items():
            if p.shape != state[name].shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {state[name].shape}")
            p.data = state[name].astype(p.data.dtype, copy=True)

    def num_parameters(self, trainable_only: bool = False) -> int:
        params = self.trainable_parameters() if trainable_only else self.parameters()
        return sum(p.data.size for p in params)


def xavier_uniform(rng: RngState, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (rng.random((fan_out, fan_in)) * 2 - 1) * bound


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        setattr(self, str(len(self._children)), module)

    def __getitem__(self, i: int) -> Module:
        return self._children[str(i % len(self._children))]

    def __len__(self):
        return len(self._children)

    def __iter__(self):
        return iter(list(self._children.values()))


class Linear(Module):
    """``y = x W^T + b`` with ``W`` stored as ``[out, in]``."""

    def __init__(self, in_features: int, out_features: int, rng: RngState, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(xavier_uniform(rng, out_features, in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(
                f"linear expects last dim {self.in_features}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        if x.ndim != 2:
            x = x.reshape(-1, self.in_features)
        y = T.matmul(x, T.transpose(self.weight, (1, 0)))
        if self.bias is not None:
            y = y + self.bias
        if len(lead) != 1:
            y = y.reshape(*lead, self.out_features)
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: RngState, std: float = 0.02):
        super().__init__()
        self.weight = Parameter(rng.normal((num, dim), std=std))

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)
