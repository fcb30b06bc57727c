"""Stage-two models (MLP, GCN, GraphSAGE) trained on a cached feature matrix."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .corpus import TextualGraph
from .errors import CompatibilityError, ConfigError, DataError, DimensionError
from .evaluation import accuracy
from .graph import Block, CsrAdjacency, NormalizedAdjacency, gcn_normalize, sample_negative_pairs, sample_neighbors
from .losses import bce_with_logits, cross_entropy_smoothed
from .nn import Linear, Module, ModuleList
from .optim import AdamW
from .rng import RngState
from .stage1 import FeatureMatrix, LinkHead, link_eval
from .tensor import Tensor

ARCHS = ("mlp", "gcn", "sage")
GNN_RANGES = {
    "dropout": (0.1, 0.8),
    "learning_rate": (1e-4, 1e-2),
    "weight_decay": (1e-7, 1e-4),
    "label_smoothing": (0.1, 0.7),
}
GNN_LAYER_CHOICES = (2, 3, 4, 6, 8)


@dataclass
class GnnConfig:
    arch: str = "sage"
    num_layers: int = 2
    hidden_dim: int = 256
    dropout: float = 0.5
    learning_rate: float = 1e-2
    weight_decay: float = 1e-5
    label_smoothing: float = 0.1
    epochs: int = 100
    full_batch: bool = True
    fanouts: tuple = (10, 10)
    batch_size: int = 256
    link_hidden: int = 128
    link_batch_size: int = 4096
    seed: int = 0
    check_ranges: bool = True

    def __post_init__(self):
        self.fanouts = tuple(int(f) for f in self.fanouts)

    def validate(self, task: str = "nodecls"):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r}; choose from {ARCHS}")
        if self.check_ranges:
            if self.num_layers not in GNN_LAYER_CHOICES:
                raise ConfigError(f"num_layers must be one of {GNN_LAYER_CHOICES}")
            for name, (lo, hi) in GNN_RANGES.items():
                if task == "link" and name == "label_smoothing":
                    continue
                v = getattr(self, name)
                if not lo <= v <= hi:
                    raise ConfigError(f"{name}={v} outside [{lo}, {hi}]")
        if self.num_layers < 1 or self.hidden_dim < 1:
            raise ConfigError("num_layers and hidden_dim must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.learning_rate < 0 or self.epochs < 1:
            raise ConfigError("learning_rate must be >= 0 and epochs >= 1")
        if not self.full_batch and len(self.fanouts) != self.num_layers:
            raise ConfigError(f"{len(self.fanouts)} fanouts for {self.num_layers} layers")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fanouts"] = list(self.fanouts)
        return d


# layer operations ---------------------------------------------------------

def _as_matrix(C) -> sp.csr_matrix:
    if isinstance(C, NormalizedAdjacency):
        return C.to_scipy()
    if isinstance(C, CsrAdjacency):
        return gcn_normalize(C).to_scipy()
    return sp.csr_matrix(C)


def _activate(h: Tensor, activation) -> Tensor:
    if activation is None or activation == "identity":
        return h
    if activation == "relu":
        return T.relu(h)
    return activation(h)


def gcn_layer(C, H, psi, bias=None, activation="relu") -> Tensor:
    """``act((C H) psi + b)`` with ``psi`` shaped ``[d_in, d_out]``."""
    H, psi = T.as_tensor(H), T.as_tensor(psi)
    if H.ndim != 2 or psi.ndim != 2 or H.shape[1] != psi.shape[0]:
        raise DimensionError(f"gcn layer: features {H.shape} do not fit transform {psi.shape}")
    h = T.matmul(T.spmm(_as_matrix(C), H), psi)
    if bias is not None:
        h = h + bias
    return _activate(h, activation)


def _mean_operator(adj) -> tuple[sp.csr_matrix, int]:
    if isinstance(adj, Block):
        return adj.mean_matrix(), adj.num_dst
    if isinstance(adj, CsrAdjacency):
        return adj.mean_matrix(), adj.num_nodes
    m = sp.csr_matrix(adj)
    return m, m.shape[0]


def sage_layer(adj, H, w_self, w_neigh, bias=None, activation="relu") -> Tensor:
    """``act(h_v W_self + mean_{u in N(v)} h_u W_neigh + b)``; isolated nodes get no neighbor term.

    ``adj`` is a full ``CsrAdjacency`` or a sampled ``Block`` (then ``H`` holds
    the block's source rows, destinations first).
    """
    H, w_self, w_neigh = T.as_tensor(H), T.as_tensor(w_self), T.as_tensor(w_neigh)
    if H.ndim != 2 or H.shape[1] != w_self.shape[0] or H.shape[1] != w_neigh.shape[0]:
        raise DimensionError(f"sage layer: features {H.shape} vs transforms {w_self.shape}, {w_neigh.shape}")
    M, num_dst = _mean_operator(adj)
    if M.shape[1] != H.shape[0]:
        raise DimensionError(f"sage layer: operator {M.shape} vs features {H.shape}")
    h_self = H if num_dst == H.shape[0] else H[:num_dst]
    h = T.matmul(h_self, w_self) + T.matmul(T.spmm(M, H), w_neigh)
    if bias is not None:
        h = h + bias
    return _activate(h, activation)


# models -------------------------------------------------------------------

class SageConv(Module):
    def __init__(self, d_in: int, d_out: int, rng: RngState):
        super().__init__()
        self.self_lin = Linear(d_in, d_out, rng)
        self.neigh_lin = Linear(d_in, d_out, rng, bias=False)


@dataclass
class GraphOperators:
    """Precomputed full-graph propagation matrices."""

    adj: CsrAdjacency
    gcn: sp.csr_matrix = None
    mean: sp.csr_matrix = None

    @classmethod
    def build(cls, adj: CsrAdjacency) -> "GraphOperators":
        return cls(adj, gcn_normalize(adj).to_scipy(), adj.mean_matrix())


class GnnModel(Module):
    """Stack of ``num_layers`` propagation layers plus a task head.

    For node classification the last layer is the linear classifier (output
    dim = number of classes).  For link prediction the layers produce node
    states of width ``hidden_dim`` and a pair MLP scores them.
    """

    def __init__(self, cfg: GnnConfig, in_dim: int, task: str, num_classes: int = 0):
        super().__init__()
        if task not in ("nodecls", "link"):
            raise ConfigError(f"unknown task {task!r}")
        if task == "nodecls" and num_classes < 2:
            raise ConfigError("node classification needs at least two classes")
        self.cfg = cfg
        self.task = task
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.provenance = None
        self.feature_hash = None
        rng = RngState(cfg.seed).spawn("gnn-init")
        out_dim = num_classes if task == "nodecls" else cfg.hidden_dim
        dims = [in_dim] + [cfg.hidden_dim] * (cfg.num_layers - 1) + [out_dim]
        layers = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            layers.append(SageConv(d_in, d_out, rng) if cfg.arch == "sage" else Linear(d_in, d_out, rng))
        self.layers = ModuleList(layers)
        self.head = LinkHead(cfg.hidden_dim, cfg.link_hidden, cfg.dropout, rng) if task == "link" else None
        self.rng = rng.spawn("dropout")

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task == "nodecls" else 1

    def _layer(self, i: int, h: Tensor, op, num_dst: int) -> Tensor:
        layer = self.layers[i]
        last = i == len(self.layers) - 1
        act = None if last else "relu"
        arch = self.cfg.arch
        if arch == "mlp":
            h = layer(h if num_dst == h.shape[0] else h[:num_dst])
            return _activate(h, act)
        if arch == "gcn":
            return gcn_layer(op, h, T.transpose(layer.weight, (1, 0)), layer.bias, act)
        return sage_layer(op, h, T.transpose(layer.self_lin.weight, (1, 0)),
                          T.transpose(layer.neigh_lin.weight, (1, 0)), layer.self_lin.bias, act)

    def forward_full(self, X, ops: GraphOperators, training: bool = False) -> Tensor:
        """Node states (or class logits) for every node of the graph."""
        h = T.as_tensor(X)
        n = h.shape[0]
        for i in range(len(self.layers)):
            h = T.dropout(h, self.cfg.dropout, self.rng, training)
            op = None if ops is None else (ops.gcn if self.cfg.arch == "gcn" else ops.mean)
            h = self._layer(i, h, op, n)
        return h

    def forward_blocks(self, X_src, blocks: list[Block], degrees: np.ndarray,
                       training: bool = False) -> Tensor:
        """Node states for the last block's destinations from sampled blocks."""
        if len(blocks) != len(self.layers):
            raise ConfigError(f"{len(blocks)} blocks for {len(self.layers)} layers")
        h = T.as_tensor(X_src)
        for i, block in enumerate(blocks):
            h = T.dropout(h, self.cfg.dropout, self.rng, training)
            if self.cfg.arch == "gcn":
                op = block.gcn_matrix(degrees)
            else:
                op = block
            h = self._layer(i, h, op, block.num_dst)
        return h

    def score(self, h_src: Tensor, h_dst: Tensor) -> Tensor:
        return self.head(h_src, h_dst)


def _check_features(graph: TextualGraph, fm: FeatureMatrix):
    if fm.num_nodes != graph.num_nodes:
        raise CompatibilityError(
            f"feature matrix has {fm.num_nodes} rows but the graph has {graph.num_nodes} nodes")


def _check_model_features(model: GnnModel, fm: FeatureMatrix):
    if fm.dim != model.in_dim:
        raise CompatibilityError(f"model expects {model.in_dim}-dim features, cache has {fm.dim}")
    if model.provenance is not None and fm.provenance != model.provenance:
        raise CompatibilityError(
            f"model was trained on {model.provenance!r} features, got {fm.provenance!r}")


def _node_states(model: GnnModel, X: np.ndarray, ops: GraphOperators, nodes: np.ndarray,
                 training: bool, rng: RngState | None, fanouts=None) -> Tensor:
    """States for ``nodes`` (distinct), via the full graph or sampled blocks."""
    if fanouts is None:
        return model.forward_full(X, ops, training)[nodes]
    if model.cfg.arch == "mlp":
        return model.forward_full(X[nodes], None, training)
    blocks = sample_neighbors(ops.adj, nodes, fanouts, rng)
    src = blocks[0].src_nodes
    return model.forward_blocks(X[src], blocks, ops.adj.degrees(), training)


@dataclass
class GnnResult:
    model: GnnModel
    history: list[dict]
    best_epoch: int
    epochs_to_95: int
    config: GnnConfig
    metric: str = "acc"

    @property
    def best(self) -> dict:
        return self.history[self.best_epoch - 1]


def epochs_to_fraction(values, fraction: float = 0.95, reference: float | None = None) -> int:
    """First (1-based) epoch whose value reaches ``fraction`` of ``reference``.

    ``reference`` defaults to the best value in ``values`` (the selected model).
    """
    values = np.asarray(values, dtype=np.float64)
    if reference is None:
        reference = values.max()
    hit = np.flatnonzero(values >= fraction * reference)
    return int(hit[0]) + 1 if len(hit) else len(values)


def train_gnn(graph: TextualGraph, fm: FeatureMatrix, cfg: GnnConfig, task: str = "nodecls",
              verbose: bool = False, edge_log: list | None = None, on_epoch=None) -> GnnResult:
    """Train a stage-two model; the best-validation epoch is restored at the end.

    ``edge_log``, when given, receives every positive pair fed to the link
    loss and the adjacency used for message passing (leakage auditing).
    ``on_epoch(epoch, model)`` is called after each epoch's update.
    """
    cfg.validate(task)
    _check_features(graph, fm)
    if task == "nodecls":
        if graph.labels is None or not graph.splits:
            raise DataError("node classification needs labels and node splits")
        return _train_cls(graph, fm, cfg, verbose, on_epoch)
    if task == "link":
        if graph.edge_splits is None:
            raise DataError("link prediction needs edge splits")
        return _train_link(graph, fm, cfg, verbose, edge_log, on_epoch)
    raise ConfigError(f"unknown task {task!r}")


def _train_cls(graph, fm, cfg, verbose, on_epoch) -> GnnResult:
    model = GnnModel(cfg, fm.dim, "nodecls", graph.num_classes)
    model.provenance, model.feature_hash = fm.provenance, fm.config_hash
    X = fm.X.astype(T.default_dtype())
    ops = GraphOperators.build(graph.adj)
    opt = AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = RngState(cfg.seed).spawn("gnn-train")
    train = graph.splits["train"]
    labels = graph.labels

    history, best_state, best_valid, best_epoch = [], None, -1.0, 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        losses = []
        if cfg.full_batch:
            logits = model.forward_full(X, ops, training=True)[train]
            loss = cross_entropy_smoothed(logits, labels[train], cfg.label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        else:
            order = train[rng.permutation(len(train))]
            for s in range(0, len(order), cfg.batch_size):
                nodes = order[s:s + cfg.batch_size]
                logits = _node_states(model, X, ops, nodes, True, rng, cfg.fanouts)
                loss = cross_entropy_smoothed(logits, labels[nodes], cfg.label_smoothing)
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
        if on_epoch is not None:
            on_epoch(epoch, model)
        model.eval()
        with T.no_grad():
            pred = model.forward_full(X, ops).data.argmax(axis=1)
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        for split in ("train", "valid", "test"):
            nodes = graph.splits[split]
            row[f"{split}_acc"] = accuracy(pred[nodes], labels[nodes])
        history.append(row)
        if verbose:
            print(f"[{cfg.arch}] epoch {epoch}: loss={row['loss']:.4f} "
                  f"valid_acc={row['valid_acc']:.4f} test_acc={row['test_acc']:.4f}")
        if row["valid_acc"] > best_valid:
            best_valid, best_epoch = row["valid_acc"], epoch
            best_state = model.state_dict()
    model.load_state_dict(best_state)
    model.eval()
    e95 = epochs_to_fraction([r["valid_acc"] for r in history])
    return GnnResult(model, history, best_epoch, e95, cfg, "acc")


def _train_link(graph, fm, cfg, verbose, edge_log, on_epoch) -> GnnResult:
    es = graph.edge_splits
    model = GnnModel(cfg, fm.dim, "link")
    model.provenance, model.feature_hash = fm.provenance, fm.config_hash
    X = fm.X.astype(T.default_dtype())
    # message passing only sees training edges
    ops = GraphOperators.build(es.message_adj)
    if edge_log is not None:
        edge_log.append(("message", es.message_adj.undirected_edges()))
    opt = AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = RngState(cfg.seed).spawn("gnn-train-link")

    history, best_state, best_valid, best_epoch = [], None, -1.0, 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = es.train[rng.permutation(len(es.train))]
        # fresh uniform negatives each epoch, drawn against the message graph
        negatives = sample_negative_pairs(es.message_adj, len(order), rng)
        losses = []
        for s in range(0, len(order), cfg.link_batch_size):
            pos = order[s:s + cfg.link_batch_size]
            neg = negatives[s:s + cfg.link_batch_size]
            if edge_log is not None:
                edge_log.append(("positive", pos.copy()))
            pairs = np.concatenate([pos, neg])
            targets = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
            if cfg.full_batch:
                h = model.forward_full(X, ops, training=True)
                src, dst = h[pairs[:, 0]], h[pairs[:, 1]]
            else:
                nodes, inverse = np.unique(pairs.reshape(-1), return_inverse=True)
                h = _node_states(model, X, ops, nodes, True, rng, cfg.fanouts)
                inverse = inverse.reshape(-1, 2)
                src, dst = h[inverse[:, 0]], h[inverse[:, 1]]
            loss = bce_with_logits(model.score(src, dst), targets)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        if on_epoch is not None:
            on_epoch(epoch, model)
        model.eval()
        with T.no_grad():
            h = model.forward_full(X, ops).data
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        pos, neg = es.split_of("valid")
        row.update({f"valid_{k}": v for k, v in link_eval(h, model.head, pos, neg).items()})
        if row["valid_mrr"] > best_valid:
            # test ranking is only needed for epochs that become the selected model
            pos, neg = es.split_of("test")
            row.update({f"test_{k}": v for k, v in link_eval(h, model.head, pos, neg).items()})
            best_valid, best_epoch = row["valid_mrr"], epoch
            best_state = model.state_dict()
        history.append(row)
        if verbose:
            print(f"[{cfg.arch}-link] epoch {epoch}: loss={row['loss']:.4f} valid_mrr={row['valid_mrr']:.4f}")
    model.load_state_dict(best_state)
    model.eval()
    e95 = epochs_to_fraction([r["valid_mrr"] for r in history])
    return GnnResult(model, history, best_epoch, e95, cfg, "mrr")


def predict(model: GnnModel, graph: TextualGraph, fm: FeatureMatrix, items=None,
            fanouts=None, seed: int = 0) -> np.ndarray:
    """Eval-mode outputs: class-probability rows for nodes, or scores for pairs.

    ``items`` is a node-id vector (classification) or a ``[P, 2]`` pair array
    (link); ``None`` means every node.  With ``fanouts`` the sampled
    mini-batch path is used instead of the full graph.
    """
    _check_features(graph, fm)
    _check_model_features(model, fm)
    model.eval()
    n = graph.num_nodes
    X = fm.X.astype(T.default_dtype())
    if model.task == "nodecls":
        nodes = np.arange(n) if items is None else np.asarray(items, dtype=np.int64).reshape(-1)
        if nodes.size and (nodes.min() < 0 or nodes.max() >= n):
            raise IndexError(f"node id outside [0, {n})")
        ops = GraphOperators.build(graph.adj)
        with T.no_grad():
            if fanouts is None:
                logits = model.forward_full(X, ops).data[nodes]
            else:
                uniq, inverse = np.unique(nodes, return_inverse=True)
                rng = RngState(seed).spawn("predict")
                logits = _node_states(model, X, ops, uniq, False, rng, fanouts).data[inverse]
        logits = logits.astype(np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    pairs = np.asarray(items, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        raise IndexError(f"node id outside [0, {n})")
    adj = graph.edge_splits.message_adj if graph.edge_splits is not None else graph.adj
    ops = GraphOperators.build(adj)
    with T.no_grad():
        if fanouts is None:
            h = model.forward_full(X, ops).data
            idx = pairs
        else:
            uniq, inverse = np.unique(pairs.reshape(-1), return_inverse=True)
            rng = RngState(seed).spawn("predict")
            h = _node_states(model, X, ops, uniq, False, rng, fanouts).data
            idx = inverse.reshape(-1, 2)
    from .stage1 import score_pairs
    return score_pairs(model.head, h, idx[:, 0], idx[:, 1])


GNN_MAGIC = b"STGG"


def save_gnn(path, model: GnnModel):
    from .checkpoint import write_checkpoint

    config = {"gnn": model.cfg.to_dict(), "task": model.task, "in_dim": model.in_dim,
              "num_classes": model.num_classes, "provenance": model.provenance,
              "feature_hash": None if model.feature_hash is None else model.feature_hash.hex()}
    weights = [(name, p.data) for name, p in model.named_parameters()]
    write_checkpoint(path, GNN_MAGIC, config, [("weights", {}, weights)])


def load_gnn(path) -> GnnModel:
    from .checkpoint import read_checkpoint
    from .errors import DependencyError

    try:
        config, sections = read_checkpoint(path, GNN_MAGIC)
    except FileNotFoundError:
        raise DependencyError(f"GNN checkpoint {path} does not exist") from None
    model = GnnModel(GnnConfig(**config["gnn"]), config["in_dim"], config["task"], config["num_classes"])
    model.provenance = config["provenance"]
    fh = config["feature_hash"]
    model.feature_hash = None if fh is None else bytes.fromhex(fh)
    state = {}
    for _, _, params in sections:
        state.update(dict(params))
    model.load_state_dict(state)
    model.eval()
    return model

