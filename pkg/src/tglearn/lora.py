"""Low-rank adapters on the encoder's linear projections."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .encoder import PROJECTIONS, EncoderModel
from .errors import ConfigError, DimensionError, StateError
from .nn import Linear, Module, Parameter
from .rng import RngState
from .tensor import Tensor


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 16.0
    dropout: float = 0.1
    targets: tuple = ("q", "v")
    seed: int = 0

    def __post_init__(self):
        self.targets = tuple(self.targets)

    def validate(self):
        if self.rank < 1:
            raise ConfigError("lora rank must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("lora alpha must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("lora dropout must lie in [0, 1)")
        if not self.targets:
            raise ConfigError("lora needs at least one target projection")
        unknown = [t for t in self.targets if t not in PROJECTIONS]
        if unknown:
            raise ConfigError(f"unknown lora target(s) {unknown}; choose from {PROJECTIONS}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class LoraLinear(Module):
    """Frozen ``W x + b`` plus a trainable ``(alpha / r) B A dropout(x)`` path."""

    def __init__(self, base: Linear, rank: int, alpha: float, dropout: float, rng: RngState):
        super().__init__()
        self.in_features = base.in_features
        self.out_features = base.out_features
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.dropout = dropout
        self.weight = base.weight
        self.bias = base.bias
        self.weight.requires_grad = False
        if self.bias is not None:
            self.bias.requires_grad = False
        self.lora_A = Parameter(rng.normal((rank, self.in_features), std=0.02))
        self.lora_B = Parameter(np.zeros((self.out_features, rank)))
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"lora layer expects last dim {self.in_features}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        if x.ndim != 2:
            x = x.reshape(-1, self.in_features)
        y = T.matmul(x, T.transpose(self.weight, (1, 0)))
        if self.bias is not None:
            y = y + self.bias
        xd = T.dropout(x, self.dropout, self.rng, self.training)
        low = T.matmul(T.matmul(xd, T.transpose(self.lora_A, (1, 0))), T.transpose(self.lora_B, (1, 0)))
        y = y + low * self.scaling
        if len(lead) != 1:
            y = y.reshape(*lead, self.out_features)
        return y

    def merged_weight(self) -> np.ndarray:
        return self.weight.data + self.scaling * (self.lora_B.data @ self.lora_A.data)


def lora_forward(layer: LoraLinear, x) -> Tensor:
    return layer(x if isinstance(x, Tensor) else T.as_tensor(x))


def lora_merge(layer: LoraLinear) -> Linear:
    """Fold the adapter into a plain ``Linear`` (eval mode only)."""
    if layer.training:
        raise StateError("merge a LoRA layer only in eval mode")
    merged = Linear.__new__(Linear)
    Module.__init__(merged)
    merged.in_features = layer.in_features
    merged.out_features = layer.out_features
    dtype = layer.weight.data.dtype
    merged.weight = Parameter(layer.merged_weight().astype(dtype), requires_grad=False, dtype=dtype)
    merged.bias = None if layer.bias is None else Parameter(layer.bias.data.copy(), requires_grad=False,
                                                             dtype=dtype)
    merged.training = False
    return merged


def lora_wrap(model: EncoderModel, cfg: LoraConfig) -> EncoderModel:
    """Freeze every encoder parameter and attach adapters to ``cfg.targets`` in place."""
    cfg.validate()
    if model.lora is not None:
        raise ConfigError("model already carries LoRA adapters")
    for p in model.parameters():
        p.requires_grad = False
    root = RngState(cfg.seed).spawn("lora")
    for i, layer in enumerate(model.layers):
        for name in cfg.targets:
            base = getattr(layer, name)
            setattr(layer, name, LoraLinear(base, cfg.rank, cfg.alpha, cfg.dropout,
                                            root.spawn(f"{i}.{name}")))
    model.lora = cfg
    return model


def lora_layers(model: EncoderModel):
    for i, layer in enumerate(model.layers):
        for name in PROJECTIONS:
            mod = getattr(layer, name)
            if isinstance(mod, LoraLinear):
                yield f"layers.{i}.{name}", mod


def merge_lora(model: EncoderModel) -> EncoderModel:
    """Eval-mode copy of ``model`` with every adapter folded into its base weight."""
    merged = copy.deepcopy(model)
    merged.eval()
    if merged.lora is None:
        return merged
    for layer in merged.layers:
        for name in PROJECTIONS:
            mod = getattr(layer, name)
            if isinstance(mod, LoraLinear):
                setattr(layer, name, lora_merge(mod))
    merged.lora = None
    return merged


def lora_config_dict(cfg: LoraConfig) -> dict:
    d = asdict(cfg)
    d["targets"] = list(cfg.targets)
    return d
