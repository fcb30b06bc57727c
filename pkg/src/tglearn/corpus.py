"""Vocabulary, tokenization, batching and the synthetic textual-graph generator."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import CorpusError, GenerationError, IterationError, ParameterError
from .graph import CsrAdjacency, EdgeSplits, build_csr, split_edges
from .rng import RngState

PAD, UNK, CLS, SEP = 0, 1, 2, 3
SPECIALS = ("[pad]", "[unk]", "[cls]", "[sep]")

_WORD = re.compile(r"[^\W_]+")


def words(text: str) -> list[str]:
    """Lowercased runs of alphanumeric characters."""
    return _WORD.findall(text.lower())


@dataclass
class Vocab:
    itos: list[str]
    stoi: dict[str, int] = field(default=None, repr=False)

    def __post_init__(self):
        if tuple(self.itos[:4]) != SPECIALS:
            raise CorpusError("vocabulary must start with the four special tokens")
        if self.stoi is None:
            self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusError("vocabulary tokens must be unique")

    @property
    def size(self) -> int:
        return len(self.itos)

    def __len__(self):
        return len(self.itos)

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def save(self, path):
        from .io import atomic_write_text
        atomic_write_text(path, "\n".join(self.itos[4:]) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(list(SPECIALS) + tokens)


def build_vocab(texts, min_freq: int = 1) -> Vocab:
    """Tokens with frequency >= ``min_freq``, ordered by (-frequency, token)."""
    counts = Counter()
    for t in texts:
        counts.update(words(t))
    if not counts:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    kept = sorted((tok for tok, c in counts.items() if c >= min_freq),
                  key=lambda tok: (-counts[tok], tok))
    return Vocab(list(SPECIALS) + kept)


def tokenize(text: str, vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """``[cls, w1, ..., w_{max_len-1}]`` padded to ``max_len``, tail truncated."""
    if max_len < 2:
        raise ParameterError("max_len must be at least 2")
    ids = [CLS] + [vocab.lookup(w) for w in words(text)[:max_len - 1]]
    row = np.full(max_len, PAD, dtype=np.int64)
    row[:len(ids)] = ids
    mask = np.zeros(max_len, dtype=np.int64)
    mask[:len(ids)] = 1
    return row, mask


def encode_texts(texts, vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    ids = np.full((len(texts), max_len), PAD, dtype=np.int64)
    mask = np.zeros((len(texts), max_len), dtype=np.int64)
    for i, t in enumerate(texts):
        ids[i], mask[i] = tokenize(t, vocab, max_len)
    return ids, mask


@dataclass
class TokenBatch:
    input_ids: np.ndarray
    attention_mask: np.ndarray
    node_ids: np.ndarray

    def __len__(self):
        return len(self.node_ids)

    def trimmed(self) -> "TokenBatch":
        """Drop trailing columns that are padding in every row."""
        width = max(int(self.attention_mask.sum(axis=1).max()), 1)
        return TokenBatch(self.input_ids[:, :width], self.attention_mask[:, :width], self.node_ids)


@dataclass
class TextualGraph:
    adj: CsrAdjacency
    texts: list[str]
    labels: np.ndarray | None = None
    num_classes: int = 0
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    edge_splits: EdgeSplits | None = None
    _encoded: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_nodes(self) -> int:
        return self.adj.num_nodes

    @property
    def csr_row_ptr(self) -> np.ndarray:
        return self.adj.row_ptr

    @property
    def csr_col_idx(self) -> np.ndarray:
        return self.adj.col_idx

    def encoded(self, vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
        key = (id(vocab), vocab.size, max_len)
        if key not in self._encoded:
            self._encoded.clear()
            self._encoded[key] = encode_texts(self.texts, vocab, max_len)
        return self._encoded[key]

    def validate(self):
        self.adj.validate()
        assert len(self.texts) == self.num_nodes
        if self.splits:
            parts = [self.splits[k] for k in ("train", "valid", "test")]
            joined = np.concatenate(parts)
            assert len(np.unique(joined)) == len(joined), "splits overlap"
        if self.edge_splits is not None:
            es = self.edge_splits
            for part in (es.train, es.valid, es.test):
                if len(part):
                    assert self.adj.has_edge(part[:, 0], part[:, 1]).all()


def batch_texts(graph: TextualGraph, node_ids, vocab: Vocab, max_len: int, batch_size: int,
                seed: int | None = None) -> Iterator[TokenBatch]:
    """Yield token batches covering ``node_ids`` exactly once.

    With ``seed`` the order is a seeded permutation, otherwise the given order.
    """
    node_ids = np.asarray(node_ids, dtype=np.int64)
    if node_ids.size == 0:
        raise IterationError("cannot batch an empty node set")
    if batch_size < 1:
        raise ParameterError("batch_size must be positive")
    if node_ids.min() < 0 or node_ids.max() >= graph.num_nodes:
        raise IndexError("node id out of range")
    if seed is not None:
        node_ids = node_ids[RngState(seed).permutation(len(node_ids))]
    ids, mask = graph.encoded(vocab, max_len)
    for start in range(0, len(node_ids), batch_size):
        chunk = node_ids[start:start + batch_size]
        yield TokenBatch(ids[chunk], mask[chunk], chunk)


# synthetic graphs -----------------------------------------------------------

@dataclass
class SyntheticTgConfig:
    """Stochastic block model with class-correlated documents.

    Each word of a document comes from its class's private block with
    probability ``semantic_correlation`` and from the shared block otherwise.
    Within a block, words follow a Zipf law with the given exponent
    (0 is uniform).
    """

    num_nodes: int = 1000
    num_classes: int = 4
    intra_edge_prob: float = 0.2
    inter_edge_prob: float = 0.02
    words_per_doc: int = 40
    class_vocab_size: int = 200
    shared_vocab_size: int = 500
    semantic_correlation: float = 0.8
    seed: int = 0
    class_zipf: float = 0.0
    shared_zipf: float = 0.0
    link_split: bool = False
    valid_edge_frac: float = 0.1
    test_edge_frac: float = 0.1
    num_eval_negatives: int = 100

    def validate(self):
        for name in ("intra_edge_prob", "inter_edge_prob", "semantic_correlation"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ParameterError(f"{name} must lie in [0, 1], got {v}")
        if self.num_classes < 2:
            raise ParameterError("need at least two classes")
        if self.num_nodes < self.num_classes:
            raise ParameterError("fewer nodes than classes")
        if self.words_per_doc < 0 or self.class_vocab_size < 1 or self.shared_vocab_size < 1:
            raise ParameterError("document and vocabulary sizes must be positive")
        if self.intra_edge_prob == 0 and self.inter_edge_prob == 0:
            raise GenerationError("p = q = 0 generates a graph with no edges")


def _zipf_cdf(size: int, exponent: float) -> np.ndarray:
    w = np.arange(1, size + 1, dtype=np.float64) ** -exponent
    return np.cumsum(w)


def class_word(c: int, j: int) -> str:
    return f"c{c}w{j}"


def shared_word(j: int) -> str:
    return f"s{j}"


def _sbm_edges(labels: np.ndarray, p: float, q: float, rng: RngState) -> np.ndarray:
    n = len(labels)
    chunks = []
    for i in range(n - 1):
        j = np.arange(i + 1, n)
        prob = np.where(labels[j] == labels[i], p, q)
        hit = rng.random((len(j),)) < prob
        if hit.any():
            chunks.append(np.stack([np.full(hit.sum(), i), j[hit]], axis=1))
    return np.concatenate(chunks) if chunks else np.zeros((0, 2), dtype=np.int64)


def generate_synthetic_tg(cfg: SyntheticTgConfig) -> TextualGraph:
    cfg.validate()
    root = RngState(cfg.seed)
    rng_labels, rng_edges = root.spawn("labels"), root.spawn("edges")
    rng_text, rng_split = root.spawn("text"), root.spawn("splits")

    n, k = cfg.num_nodes, cfg.num_classes
    labels = rng_labels.integers(k, (n,))
    adj = build_csr(_sbm_edges(labels, cfg.intra_edge_prob, cfg.inter_edge_prob, rng_edges), n)

    class_cdf = _zipf_cdf(cfg.class_vocab_size, cfg.class_zipf)
    shared_cdf = _zipf_cdf(cfg.shared_vocab_size, cfg.shared_zipf)
    L = cfg.words_per_doc
    from_class = rng_text.random((n, L)) < cfg.semantic_correlation
    class_idx = rng_text.categorical(class_cdf, (n, L))
    shared_idx = rng_text.categorical(shared_cdf, (n, L))
    texts = []
    for i in range(n):
        c = int(labels[i])
        texts.append(" ".join(
            class_word(c, int(class_idx[i, t])) if from_class[i, t] else shared_word(int(shared_idx[i, t]))
            for t in range(L)))

    perm = rng_split.permutation(n)
    n_train, n_valid = int(0.6 * n), int(0.2 * n)
    splits = {
        "train": np.sort(perm[:n_train]),
        "valid": np.sort(perm[n_train:n_train + n_valid]),
        "test": np.sort(perm[n_train + n_valid:]),
    }
    edge_splits = None
    if cfg.link_split:
        edge_splits = split_edges(adj, cfg.valid_edge_frac, cfg.test_edge_frac,
                                  cfg.num_eval_negatives, root.spawn("edge-splits"))
    return TextualGraph(adj, texts, labels, k, splits, edge_splits)


def unigram_bayes_accuracy(graph: TextualGraph, alpha: float = 1.0) -> float:
    """Test accuracy of multinomial naive Bayes fitted on the train texts."""
    train, test = graph.splits["train"], graph.splits["test"]
    vocab = build_vocab([graph.texts[i] for i in train])
    k = graph.num_classes
    counts = np.zeros((k, vocab.size))
    for i in train:
        for w in words(graph.texts[i]):
            counts[graph.labels[i], vocab.lookup(w)] += 1
    counts[:, :4] = 0
    log_prob = np.log(counts + alpha) - np.log((counts + alpha).sum(axis=1, keepdims=True))
    prior = np.log(np.bincount(graph.labels[train], minlength=k) + 1.0)
    correct = 0
    for i in test:
        ids = [vocab.lookup(w) for w in words(graph.texts[i])]
        ids = [t for t in ids if t >= 4]
        score = prior + log_prob[:, ids].sum(axis=1)
        correct += int(np.argmax(score) == graph.labels[i])
    return correct / len(test)
