"""TOML run configuration with one section per pipeline stage.

Every key is checked against the section's known fields and every range
invariant is enforced while parsing, so a bad file fails before any work.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .corpus import SyntheticTgConfig
from .encoder import EncoderConfig
from .errors import ConfigError, ParameterError
from .gnn import GnnConfig
from .lora import LoraConfig
from .stage1 import Stage1Config


@dataclass
class DataSection:
    num_nodes: int = 1000
    num_classes: int = 4
    intra_edge_prob: float = 0.2
    inter_edge_prob: float = 0.02
    words_per_doc: int = 40
    class_vocab_size: int = 200
    shared_vocab_size: int = 500
    semantic_correlation: float = 0.8
    class_zipf: float = 0.0
    shared_zipf: float = 0.0
    link_split: bool = False
    valid_edge_frac: float = 0.1
    test_edge_frac: float = 0.1
    num_eval_negatives: int = 100
    min_freq: int = 1
    bow_dim: int = 64
    input_dir: str = ""

    def synthetic(self, seed: int) -> SyntheticTgConfig:
        names = {f.name for f in dataclasses.fields(SyntheticTgConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        return SyntheticTgConfig(seed=seed, **kw)


@dataclass
class EncoderSection:
    d_model: int = 128
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 256
    max_len: int = 64
    dropout_rate: float = 0.1
    pooling: str = "mean"
    mlm_steps: int = 300
    mlm_batch_size: int = 32
    mask_rate: float = 0.15
    mlm_learning_rate: float = 1e-3

    def encoder(self, vocab_size: int, seed: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, d_model=self.d_model, num_layers=self.num_layers,
                             num_heads=self.num_heads, ffn_dim=self.ffn_dim, max_len=self.max_len,
                             dropout_rate=self.dropout_rate, pooling=self.pooling, seed=seed)


@dataclass
class LoraSection:
    rank: int = 4
    alpha: float = 16.0
    dropout: float = 0.1
    targets: list = field(default_factory=lambda: ["q", "v"])

    def lora(self, seed: int) -> LoraConfig:
        return LoraConfig(self.rank, self.alpha, self.dropout, tuple(self.targets), seed)


@dataclass
class Stage1Section:
    task: str = "nodecls"
    peft: str = "lora"
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    label_smoothing: float = 0.1
    header_dropout: float = 0.1
    epochs: int = 5
    batch_size: int = 32
    link_hidden: int = 128
    max_steps_per_epoch: int = 0

    def stage1(self, lora: LoraSection, seed: int, max_len: int) -> Stage1Config:
        return Stage1Config(
            learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            label_smoothing=self.label_smoothing, header_dropout=self.header_dropout,
            lora=lora.lora(seed) if self.peft == "lora" else None, epochs=self.epochs,
            batch_size=self.batch_size, seed=seed, max_len=max_len, link_hidden=self.link_hidden,
            max_steps_per_epoch=self.max_steps_per_epoch or None)


@dataclass
class GnnSection:
    task: str = "nodecls"
    arch: str = "sage"
    archs: list = field(default_factory=lambda: ["sage"])
    num_layers: int = 2
    hidden_dim: int = 256
    dropout: float = 0.5
    learning_rate: float = 1e-2
    weight_decay: float = 1e-5
    label_smoothing: float = 0.1
    epochs: int = 100
    full_batch: bool = True
    fanouts: list = field(default_factory=lambda: [10, 10])
    batch_size: int = 256
    link_hidden: int = 128
    link_batch_size: int = 4096

    def gnn(self, seed: int, arch: str | None = None) -> GnnConfig:
        return GnnConfig(arch=arch or self.arch, num_layers=self.num_layers, hidden_dim=self.hidden_dim,
                         dropout=self.dropout, learning_rate=self.learning_rate,
                         weight_decay=self.weight_decay, label_smoothing=self.label_smoothing,
                         epochs=self.epochs, full_batch=self.full_batch, fanouts=tuple(self.fanouts),
                         batch_size=self.batch_size, link_hidden=self.link_hidden,
                         link_batch_size=self.link_batch_size, seed=seed)


@dataclass
class EvalSection:
    sources: list = field(default_factory=lambda: ["bow", "fixed", "finetuned"])
    sota: str = "sage"
    ensemble_weights: list = field(default_factory=list)
    project_per_class: int = 100


@dataclass
class HpoSection:
    stage: str = "gnn"
    trials: int = 0
    source: str = "finetuned"


SECTIONS = {
    "data": DataSection,
    "encoder": EncoderSection,
    "lora": LoraSection,
    "stage1": Stage1Section,
    "gnn": GnnSection,
    "eval": EvalSection,
    "hpo": HpoSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    lora: LoraSection = field(default_factory=LoraSection)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    gnn: GnnSection = field(default_factory=GnnSection)
    eval: EvalSection = field(default_factory=EvalSection)
    hpo: HpoSection = field(default_factory=HpoSection)

    def validate(self):
        """Build every component config once so its invariants are checked."""
        if self.stage1.task not in ("nodecls", "link") or self.gnn.task not in ("nodecls", "link"):
            raise ConfigError("task must be 'nodecls' or 'link'")
        if self.stage1.peft not in ("lora", "full"):
            raise ConfigError(f"peft must be 'lora' or 'full', got {self.stage1.peft!r}")
        if self.hpo.stage not in ("lm", "gnn"):
            raise ConfigError(f"hpo stage must be 'lm' or 'gnn', got {self.hpo.stage!r}")
        unknown = [s for s in self.eval.sources if s not in ("bow", "fixed", "finetuned", "finetuned-full")]
        if unknown:
            raise ConfigError(f"unknown feature source(s) {unknown}")
        if self.data.bow_dim < 1 or self.data.min_freq < 1:
            raise ConfigError("bow_dim and min_freq must be positive")
        if not self.data.input_dir:
            try:
                self.data.synthetic(self.seed).validate()
            except ParameterError as err:
                raise ConfigError(f"[data] {err}") from None
        if not 0 < self.encoder.mask_rate < 1:
            raise ConfigError("mask_rate must lie in (0, 1)")
        if self.encoder.mlm_steps < 0:
            raise ConfigError("mlm_steps must be non-negative")
        self.encoder.encoder(vocab_size=16, seed=self.seed).validate()
        s1 = self.stage1.stage1(self.lora, self.seed, self.encoder.max_len)
        s1.validate(self.stage1.task)
        for arch in set(self.gnn.archs) | {self.gnn.arch, self.eval.sota}:
            self.gnn.gnn(self.seed, arch).validate(self.gnn.task)
        if any(w < 0 for w in self.eval.ensemble_weights):
            raise ConfigError("ensemble weights must be non-negative")
        return self


def _coerce(section: str, key: str, default, value):
    """Check ``value`` against the type of the field's default."""
    where = f"[{section}] {key}" if section else key
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        return list(value)
    return value


def from_dict(raw: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in raw.items():
        if key == "seed":
            cfg.seed = _coerce("", "seed", 0, value)
            continue
        if key not in SECTIONS:
            raise ConfigError(f"unknown config key or section {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"[{key}] must be a table")
        section = getattr(cfg, key)
        known = {f.name: getattr(section, f.name) for f in dataclasses.fields(section)}
        for k, v in value.items():
            if k not in known:
                raise ConfigError(f"unknown key {k!r} in [{key}]")
            setattr(section, k, _coerce(key, k, known[k], v))
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    return from_dict(raw)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply ``{"section.key": value}`` (or ``{"seed": value}``) and revalidate."""
    raw = to_dict(cfg)
    for dotted, value in overrides.items():
        if value is None:
            continue
        if dotted == "seed":
            raw["seed"] = value
            continue
        section, _, key = dotted.partition(".")
        if section not in raw or not key:
            raise ConfigError(f"unknown override {dotted!r}")
        raw[section][key] = value
    return from_dict(raw)


def to_dict(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed}
    for name in SECTIONS:
        out[name] = dataclasses.asdict(getattr(cfg, name))
    return out


def dumps(cfg: RunConfig) -> str:
    """TOML text that ``load_config`` reads back to an equal config."""
    lines = [f"seed = {cfg.seed}", ""]
    for name, values in to_dict(cfg).items():
        if name == "seed":
            continue
        lines.append(f"[{name}]")
        for k, v in values.items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")
