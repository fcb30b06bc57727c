"""Compact pre-layer-norm transformer encoder, pooling, and masked-LM pretraining."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .corpus import CLS, UNK, TokenBatch
from .errors import ConfigError, LengthError, PoolingError
from .losses import cross_entropy_smoothed
from .nn import Embedding, LayerNorm, Linear, Module, ModuleList
from .rng import RngState
from .tensor import Tensor

PROJECTIONS = ("q", "k", "v", "o", "ff1", "ff2")


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 128
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 256
    max_len: int = 64
    dropout_rate: float = 0.1
    pooling: str = "mean"
    seed: int = 0

    def validate(self):
        if self.d_model % self.num_heads:
            raise ConfigError("d_model must be divisible by num_heads")
        if self.max_len < 2:
            raise ConfigError("max_len must be at least 2")
        if self.pooling not in ("mean", "cls"):
            raise ConfigError(f"unknown pooling mode {self.pooling!r}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.vocab_size < 5:
            raise ConfigError("vocabulary too small")


class EncoderLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng: RngState):
        super().__init__()
        d = cfg.d_model
        self.ln1 = LayerNorm(d)
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.ff1 = Linear(d, cfg.ffn_dim, rng)
        self.ff2 = Linear(cfg.ffn_dim, d, rng)


class EncoderModel(Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = RngState(cfg.seed).spawn("encoder-init")
        self.tok_emb = Embedding(cfg.vocab_size, cfg.d_model, rng)
        self.pos_emb = Embedding(cfg.max_len, cfg.d_model, rng)
        self.layers = ModuleList(EncoderLayer(cfg, rng) for _ in range(cfg.num_layers))
        self.ln_f = LayerNorm(cfg.d_model)
        self.mlm_head = Linear(cfg.d_model, cfg.vocab_size, rng)
        self.use_positions = True
        self.lora = None

    def forward(self, batch: TokenBatch, training: bool = False, rng: RngState | None = None) -> Tensor:
        """Hidden states ``[b, L, d]`` of the final layer (after the last layer norm)."""
        ids, mask = batch.input_ids, batch.attention_mask
        b, L = ids.shape
        cfg = self.cfg
        if L > cfg.max_len:
            raise LengthError(f"sequence length {L} exceeds max_len {cfg.max_len}")
        if ids.size and ids.max() >= cfg.vocab_size:
            raise IndexError("token id outside the vocabulary")
        rate = cfg.dropout_rate if training else 0.0
        if training and rate > 0 and rng is None:
            raise ValueError("training-mode forward with dropout needs an rng")

        x = self.tok_emb(ids)
        if self.use_positions:
            x = x + self.pos_emb(np.arange(L))
        x = T.dropout(x, rate, rng, training)

        dtype = x.data.dtype
        key_bias = np.where(mask[:, None, None, :] > 0, 0.0, -np.inf).astype(dtype)
        h, dh = cfg.num_heads, cfg.d_model // cfg.num_heads
        scale = 1.0 / math.sqrt(dh)
        for layer in self.layers:
            y = layer.ln1(x)
            q = layer.q(y).reshape(b, L, h, dh).transpose(0, 2, 1, 3)
            k = layer.k(y).reshape(b, L, h, dh).transpose(0, 2, 3, 1)
            v = layer.v(y).reshape(b, L, h, dh).transpose(0, 2, 1, 3)
            probs = T.softmax(T.matmul(q, k) * scale, axis=-1, bias=key_bias)
            ctx = T.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, L, cfg.d_model)
            x = x + T.dropout(layer.o(ctx), rate, rng, training)
            y = layer.ln2(x)
            y = layer.ff2(T.gelu(layer.ff1(y)))
            x = x + T.dropout(y, rate, rng, training)
        return self.ln_f(x)

    __call__ = forward

    def pool(self, hidden: Tensor, mask) -> Tensor:
        if self.cfg.pooling == "cls":
            return cls_pool(hidden, mask)
        return mean_pool(hidden, mask)

    def embed(self, batch: TokenBatch, training: bool = False, rng=None) -> Tensor:
        return self.pool(self.forward(batch, training, rng), batch.attention_mask)

    def base_parameters(self):
        """Encoder parameters used for text embeddings (excludes the MLM head)."""
        return [p for name, p in self.named_parameters() if not name.startswith("mlm_head.")]


def mean_pool(hidden: Tensor, mask) -> Tensor:
    """Average of hidden states over positions where ``mask`` is 1."""
    mask = np.asarray(mask)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        row = int(np.flatnonzero(counts == 0)[0])
        raise PoolingError(f"row {row} has no valid tokens to pool")
    dtype = hidden.data.dtype
    weights = (mask / counts[:, None]).astype(dtype)
    return (hidden * weights[:, :, None]).sum(axis=1)


def cls_pool(hidden: Tensor, mask=None) -> Tensor:
    return hidden[:, 0, :]


def full_finetune_setup(model: EncoderModel):
    """Mark every text-path parameter trainable (the MLM head stays frozen)."""
    for name, p in model.named_parameters():
        p.requires_grad = not name.startswith("mlm_head.")
    return model


def mlm_pretrain_step(model: EncoderModel, batch: TokenBatch, mask_rate: float,
                      rng: RngState, opt) -> float | None:
    """One masked-LM update; returns the loss, or ``None`` when nothing was maskable.

    Masked positions are replaced by ``[unk]`` and predicted by the MLM head.
    """
    if not 0 < mask_rate < 1:
        raise ValueError("mask_rate must lie in (0, 1)")
    ids, mask = batch.input_ids, batch.attention_mask
    maskable = (mask > 0) & (ids != CLS)
    chosen = maskable & (rng.random(ids.shape) < mask_rate)
    if not chosen.any():
        return None
    corrupted = np.where(chosen, UNK, ids)
    hidden = model.forward(TokenBatch(corrupted, mask, batch.node_ids), training=True, rng=rng)
    rows, cols = np.nonzero(chosen)
    picked = hidden[rows, cols]
    logits = model.mlm_head(picked)
    loss = cross_entropy_smoothed(logits, ids[rows, cols], 0.0)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.item())


def pretrain_mlm(model: EncoderModel, graph, vocab, *, steps: int, batch_size: int = 32,
                 mask_rate: float = 0.15, learning_rate: float = 1e-3, weight_decay: float = 0.0,
                 seed: int = 0, node_ids=None, log_every: int = 0):
    """Masked-LM pretraining over the texts of ``node_ids`` (default: all nodes)."""
    from .corpus import batch_texts
    from .optim import AdamW

    for p in model.parameters():
        p.requires_grad = True
    opt = AdamW(model.parameters(), lr=learning_rate, weight_decay=weight_decay)
    rng = RngState(seed).spawn("mlm")
    nodes = np.arange(graph.num_nodes) if node_ids is None else np.asarray(node_ids)
    losses = []
    epoch = 0
    model.train()
    while len(losses) < steps:
        epoch_seed = rng.spawn(f"epoch{epoch}").seed
        for batch in batch_texts(graph, nodes, vocab, model.cfg.max_len, batch_size, seed=epoch_seed):
            loss = mlm_pretrain_step(model, batch.trimmed(), mask_rate, rng, opt)
            if loss is not None:
                losses.append(loss)
                if log_every and len(losses) % log_every == 0:
                    print(f"mlm step {len(losses)}: loss {loss:.4f}")
            if len(losses) >= steps:
                break
        epoch += 1
    model.eval()
    return losses


def encoder_config_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)


ENCODER_MAGIC = b"STGM"


def save_encoder(path, model: EncoderModel):
    """Write the encoder (and its adapter section, if wrapped) to ``path``."""
    from .checkpoint import write_checkpoint
    from .lora import lora_config_dict

    adapter = [(n, p.data) for n, p in model.named_parameters() if ".lora_" in n]
    base = [(n, p.data) for n, p in model.named_parameters() if ".lora_" not in n]
    sections = [("base", {"use_positions": model.use_positions}, base)]
    if model.lora is not None:
        sections.append(("adapter", lora_config_dict(model.lora), adapter))
    write_checkpoint(path, ENCODER_MAGIC, encoder_config_dict(model.cfg), sections)


def load_encoder(path) -> EncoderModel:
    from .checkpoint import read_checkpoint
    from .errors import DependencyError
    from .lora import LoraConfig, lora_wrap

    try:
        config, sections = read_checkpoint(path, ENCODER_MAGIC)
    except FileNotFoundError:
        raise DependencyError(f"encoder checkpoint {path} does not exist") from None
    model = EncoderModel(EncoderConfig(**config))
    state = {}
    for name, meta, params in sections:
        if name == "base":
            model.use_positions = bool(meta.get("use_positions", True))
        elif name == "adapter":
            lora_wrap(model, LoraConfig(**meta))
        state.update(dict(params))
    model.load_state_dict(state)
    model.eval()
    return model
