"""Supervised encoder finetuning, embedding extraction, and the feature cache."""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .corpus import TextualGraph, TokenBatch, Vocab, batch_texts, words
from .encoder import EncoderModel, full_finetune_setup
from .errors import CacheError, ConfigError, DataError, ParameterError, PoolingError
from .evaluation import accuracy, ranking_metrics
from .graph import sample_negative_pairs
from .io import atomic_write_bytes
from .lora import LoraConfig, lora_wrap, merge_lora
from .losses import bce_with_logits, cross_entropy_smoothed
from .nn import Linear, Module
from .optim import AdamW
from .rng import RngState
from .tensor import Tensor

LM_RANGES = {
    "learning_rate": (1e-6, 1e-4),
    "weight_decay": (1e-7, 1e-4),
    "label_smoothing": (0.1, 0.7),
    "header_dropout": (0.1, 0.8),
}


class ClsHead(Module):
    """Dropout followed by a linear map to class logits."""

    def __init__(self, dim: int, num_classes: int, dropout: float, rng: RngState):
        super().__init__()
        self.dropout = dropout
        self.linear = Linear(dim, num_classes, rng)
        self.rng = rng.spawn("dropout")

    def __call__(self, x: Tensor) -> Tensor:
        return self.linear(T.dropout(x, self.dropout, self.rng, self.training))


class LinkHead(Module):
    """Two-layer MLP scoring ``[h_src, h_dst, h_src * h_dst]``."""

    def __init__(self, dim: int, hidden: int, dropout: float, rng: RngState):
        super().__init__()
        self.dropout = dropout
        self.fc1 = Linear(3 * dim, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)
        self.rng = rng.spawn("dropout")

    def __call__(self, h_src: Tensor, h_dst: Tensor) -> Tensor:
        x = T.concat([h_src, h_dst, h_src * h_dst], axis=-1)
        x = T.dropout(x, self.dropout, self.rng, self.training)
        return self.fc2(T.relu(self.fc1(x))).reshape(-1)


def score_pairs(head: LinkHead, emb: np.ndarray, src, dst, chunk: int = 16384) -> np.ndarray:
    """Eval-mode pair scores for rows of a fixed embedding matrix.

    The first layer is split by input block, so the source and destination
    projections are computed once per node instead of once per pair.
    """
    head.eval()
    src, dst = np.asarray(src).reshape(-1), np.asarray(dst).reshape(-1)
    W, b1 = head.fc1.weight.data, head.fc1.bias.data
    w2, b2 = head.fc2.weight.data[0], head.fc2.bias.data[0]
    d = emb.shape[1]
    e = np.asarray(emb, dtype=W.dtype)
    proj_src, proj_dst, w_prod = e @ W[:, :d].T, e @ W[:, d:2 * d].T, W[:, 2 * d:].T
    out = np.empty(len(src), dtype=np.float64)
    for s in range(0, len(src), chunk):
        a, b = src[s:s + chunk], dst[s:s + chunk]
        z = proj_src[a] + proj_dst[b] + (e[a] * e[b]) @ w_prod + b1
        out[s:s + chunk] = np.maximum(z, 0) @ w2 + b2
    return out


@dataclass
class Stage1Config:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    label_smoothing: float = 0.1
    header_dropout: float = 0.1
    lora: LoraConfig | None = field(default_factory=LoraConfig)
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    max_len: int = 64
    link_hidden: int = 128
    negatives_per_positive: int = 1
    max_steps_per_epoch: int | None = None
    check_ranges: bool = True

    @property
    def peft(self) -> str:
        return "full" if self.lora is None else "lora"

    def validate(self, task: str = "nodecls"):
        if self.check_ranges:
            for name, (lo, hi) in LM_RANGES.items():
                if task == "link" and name == "label_smoothing":
                    continue
                v = getattr(self, name)
                if not lo <= v <= hi:
                    raise ConfigError(f"{name}={v} outside [{lo}, {hi}]")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.negatives_per_positive < 1:
            raise ParameterError("link finetuning needs at least one negative per positive")
        if self.lora is not None:
            self.lora.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.lora is not None:
            d["lora"]["targets"] = list(self.lora.targets)
        return d


def config_hash(*parts) -> bytes:
    payload = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).digest()


@dataclass
class Stage1Result:
    model: EncoderModel
    head: Module
    history: list[dict]
    best_epoch: int
    config: Stage1Config

    @property
    def best(self) -> dict:
        return self.history[self.best_epoch - 1]


def prepare_model(model: EncoderModel, cfg: Stage1Config) -> EncoderModel:
    """LoRA-wrap or fully unfreeze ``model`` according to ``cfg``."""
    if cfg.lora is not None:
        if model.lora is None:
            lora_wrap(model, cfg.lora)
    else:
        full_finetune_setup(model)
    return model


def _snapshot(*modules):
    return [m.state_dict() for m in modules]


def _restore(state, *modules):
    for s, m in zip(state, modules):
        m.load_state_dict(s)


def encode_nodes(model: EncoderModel, graph: TextualGraph, vocab: Vocab, nodes,
                 batch_size: int = 128) -> np.ndarray:
    """Eval-mode pooled embeddings for ``nodes`` in the given order."""
    model.eval()
    nodes = np.asarray(nodes, dtype=np.int64)
    rows = []
    with T.no_grad():
        for batch in batch_texts(graph, nodes, vocab, model.cfg.max_len, batch_size):
            try:
                rows.append(model.embed(batch.trimmed()).data)
            except PoolingError as err:
                counts = batch.attention_mask.sum(axis=1)
                bad = batch.node_ids[np.flatnonzero(counts == 0)[0]]
                raise PoolingError(f"node {bad}: {err}") from err
    return np.concatenate(rows) if rows else np.zeros((0, model.cfg.d_model), dtype=np.float32)


def _cls_accuracy(model, head, graph, vocab, nodes, batch_size=128) -> float:
    emb = encode_nodes(model, graph, vocab, nodes, batch_size)
    head.eval()
    with T.no_grad():
        logits = head(Tensor(emb, dtype=emb.dtype)).data
    return accuracy(logits.argmax(axis=1), graph.labels[nodes])


def finetune_cls(graph: TextualGraph, model: EncoderModel, head: ClsHead, cfg: Stage1Config,
                 vocab: Vocab, verbose: bool = False) -> Stage1Result:
    """Node-classification finetuning; keeps the best-validation epoch."""
    cfg.validate("nodecls")
    if graph.labels is None or not graph.splits:
        raise DataError("node classification needs labels and node splits")
    train = graph.splits["train"]
    if np.any(graph.labels[train] < 0):
        raise DataError("a training node has no label")
    prepare_model(model, cfg)
    params = model.trainable_parameters() + head.trainable_parameters()
    opt = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = RngState(cfg.seed).spawn("finetune-cls")

    history, best_state, best_valid, best_epoch = [], None, -1.0, 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        head.train()
        losses = []
        epoch_seed = rng.spawn(f"epoch{epoch}").seed
        for step, batch in enumerate(batch_texts(graph, train, vocab, cfg.max_len, cfg.batch_size,
                                                 seed=epoch_seed)):
            if cfg.max_steps_per_epoch is not None and step >= cfg.max_steps_per_epoch:
                break
            batch = batch.trimmed()
            logits = head(model.embed(batch, training=True, rng=rng))
            loss = cross_entropy_smoothed(logits, graph.labels[batch.node_ids], cfg.label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        for split in ("train", "valid", "test"):
            row[f"{split}_acc"] = _cls_accuracy(model, head, graph, vocab, graph.splits[split])
        history.append(row)
        if verbose:
            print(f"[finetune {cfg.peft}] epoch {epoch}: " + ", ".join(
                f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
        if row["valid_acc"] > best_valid:
            best_valid, best_epoch = row["valid_acc"], epoch
            best_state = _snapshot(model, head)
    _restore(best_state, model, head)
    model.eval()
    head.eval()
    return Stage1Result(model, head, history, best_epoch, cfg)


def link_eval(emb: np.ndarray, head: LinkHead, pos: np.ndarray, neg: np.ndarray,
              ks=(1, 3, 10)) -> dict:
    """MRR and Hits@K of each positive against its fixed negatives."""
    pos_scores = score_pairs(head, emb, pos[:, 0], pos[:, 1])
    src = np.repeat(pos[:, 0], neg.shape[1])
    neg_scores = score_pairs(head, emb, src, neg.reshape(-1)).reshape(neg.shape)
    return ranking_metrics(pos_scores, neg_scores, ks)


def finetune_link(graph: TextualGraph, model: EncoderModel, head: LinkHead, cfg: Stage1Config,
                  vocab: Vocab, verbose: bool = False) -> Stage1Result:
    """Link-prediction finetuning with 1:1 uniform negatives; best valid MRR kept."""
    cfg.validate("link")
    es = graph.edge_splits
    if es is None:
        raise DataError("link finetuning needs edge splits")
    prepare_model(model, cfg)
    params = model.trainable_parameters() + head.trainable_parameters()
    opt = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = RngState(cfg.seed).spawn("finetune-link")
    ids_all, mask_all = graph.encoded(vocab, cfg.max_len)

    history, best_state, best_valid, best_epoch = [], None, -1.0, 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        head.train()
        order = es.train[rng.permutation(len(es.train))]
        losses = []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            if cfg.max_steps_per_epoch is not None and step >= cfg.max_steps_per_epoch:
                break
            pos = order[start:start + cfg.batch_size]
            neg = sample_negative_pairs(es.message_adj, len(pos) * cfg.negatives_per_positive, rng)
            pairs = np.concatenate([pos, neg])
            targets = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
            nodes, inverse = np.unique(pairs.reshape(-1), return_inverse=True)
            batch = TokenBatch(ids_all[nodes], mask_all[nodes], nodes).trimmed()
            emb = model.embed(batch, training=True, rng=rng)
            inverse = inverse.reshape(-1, 2)
            logits = head(emb[inverse[:, 0]], emb[inverse[:, 1]])
            loss = bce_with_logits(logits, targets)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        emb = encode_nodes(model, graph, vocab, np.arange(graph.num_nodes))
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        for split in ("valid", "test"):
            pos, neg = es.split_of(split)
            metrics = link_eval(emb, head, pos, neg)
            row.update({f"{split}_{k}": v for k, v in metrics.items()})
        history.append(row)
        if verbose:
            print(f"[finetune-link {cfg.peft}] epoch {epoch}: loss={row['loss']:.4f} "
                  f"valid_mrr={row['valid_mrr']:.4f}")
        if row["valid_mrr"] > best_valid:
            best_valid, best_epoch = row["valid_mrr"], epoch
            best_state = _snapshot(model, head)
    _restore(best_state, model, head)
    model.eval()
    head.eval()
    return Stage1Result(model, head, history, best_epoch, cfg)


# feature matrices ---------------------------------------------------------

PROVENANCE = {"bow": 0, "fixed": 1, "finetuned": 2, "finetuned-full": 3}
PROVENANCE_NAMES = {v: k for k, v in PROVENANCE.items()}


@dataclass
class FeatureMatrix:
    X: np.ndarray
    provenance: str
    config_hash: bytes = b"\0" * 32

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float32)
        if self.X.ndim != 2:
            raise CacheError("feature matrix must be 2-D")
        if self.provenance not in PROVENANCE:
            raise CacheError(f"unknown provenance {self.provenance!r}")
        if len(self.config_hash) != 32:
            raise CacheError("config hash must be 32 bytes")

    @property
    def num_nodes(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def extract_embeddings(graph: TextualGraph, model: EncoderModel, vocab: Vocab, batch_size: int = 128,
                       provenance: str = "finetuned", cfg_hash: bytes | None = None) -> FeatureMatrix:
    """Frozen pooled embeddings for every node, in node-id order.

    Adapters are merged into a copy first; the passed model is not modified.
    """
    merged = merge_lora(model) if model.lora is not None else model
    X = encode_nodes(merged, graph, vocab, np.arange(graph.num_nodes), batch_size)
    if cfg_hash is None:
        cfg_hash = config_hash(asdict(model.cfg), provenance)
    return FeatureMatrix(X, provenance, cfg_hash)


def bow_features(graph: TextualGraph, vocab: Vocab, d_cap: int) -> FeatureMatrix:
    """L2-normalized term frequencies over the ``d_cap`` most frequent vocabulary tokens."""
    d = min(d_cap, vocab.size - 4)
    X = np.zeros((graph.num_nodes, d), dtype=np.float64)
    for i, text in enumerate(graph.texts):
        for w in words(text):
            j = vocab.lookup(w) - 4
            if 0 <= j < d:
                X[i, j] += 1
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    X = np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)
    return FeatureMatrix(X, "bow", config_hash("bow", d_cap, vocab.size))


_CACHE_HEADER = struct.Struct("<4sIQIB32s")
CACHE_MAGIC = b"STGX"
CACHE_VERSION = 1


def encode_cache(fm: FeatureMatrix) -> bytes:
    if not np.isfinite(fm.X).all():
        raise CacheError("feature matrix contains non-finite values")
    n, d = fm.X.shape
    header = _CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, n, d, PROVENANCE[fm.provenance], fm.config_hash)
    return header + fm.X.astype("<f4").tobytes()


def decode_cache(buf: bytes) -> FeatureMatrix:
    if len(buf) < _CACHE_HEADER.size:
        raise CacheError("feature cache is truncated (incomplete header)")
    magic, version, n, d, tag, chash = _CACHE_HEADER.unpack_from(buf)
    if magic != CACHE_MAGIC:
        raise CacheError(f"bad feature cache magic {magic!r}")
    if version != CACHE_VERSION:
        raise CacheError(f"unsupported feature cache version {version}")
    if tag not in PROVENANCE_NAMES:
        raise CacheError(f"unknown provenance tag {tag}")
    expected = _CACHE_HEADER.size + 4 * n * d
    if len(buf) != expected:
        raise CacheError(f"feature cache has {len(buf)} bytes, expected {expected}")
    X = np.frombuffer(buf, dtype="<f4", offset=_CACHE_HEADER.size).reshape(n, d).astype(np.float32)
    if not np.isfinite(X).all():
        raise CacheError("feature cache contains non-finite values")
    return FeatureMatrix(X, PROVENANCE_NAMES[tag], chash)


def cache_write(path, fm: FeatureMatrix):
    atomic_write_bytes(path, encode_cache(fm))


def cache_read(path) -> FeatureMatrix:
    from .errors import DependencyError
    try:
        with open(path, "rb") as fh:
            return decode_cache(fh.read())
    except FileNotFoundError:
        raise DependencyError(f"feature cache {path} does not exist") from None
