"""CSR adjacency, GCN normalization, neighbor sampling and the edge-split protocol."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ProtocolError, SamplingError
from .rng import RngState


@dataclass(frozen=True)
class CsrAdjacency:
    """Undirected, unweighted adjacency; every pair is stored in both rows."""

    row_ptr: np.ndarray
    col_idx: np.ndarray
    num_nodes: int

    @property
    def num_edges(self) -> int:
        """Directed count (twice the number of undirected edges)."""
        return int(self.col_idx.shape[0])

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def neighbors(self, node: int) -> np.ndarray:
        return self.col_idx[self.row_ptr[node]:self.row_ptr[node + 1]]

    def has_edge(self, u, v) -> np.ndarray:
        """Vectorized membership test for pairs ``(u[i], v[i])``."""
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        keys = self._keys()
        probe = u * self.num_nodes + v
        pos = np.searchsorted(keys, probe)
        pos = np.minimum(pos, max(len(keys) - 1, 0))
        return (keys[pos] == probe) if len(keys) else np.zeros(probe.shape, bool)

    def _keys(self) -> np.ndarray:
        rows = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees())
        return rows * self.num_nodes + self.col_idx

    def undirected_edges(self) -> np.ndarray:
        """``[E, 2]`` array of pairs with ``u < v`` in sorted order."""
        rows = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees())
        keep = rows < self.col_idx
        return np.stack([rows[keep], self.col_idx[keep]], axis=1)

    def to_scipy(self, weights=None) -> sp.csr_matrix:
        data = np.ones(self.num_edges) if weights is None else weights
        return sp.csr_matrix((data, self.col_idx, self.row_ptr),
                             shape=(self.num_nodes, self.num_nodes))

    def mean_matrix(self) -> sp.csr_matrix:
        """Row-normalized adjacency; isolated rows stay zero."""
        deg = self.degrees().astype(np.float64)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return self.to_scipy(np.repeat(inv, self.degrees()))

    def validate(self):
        rp, ci = self.row_ptr, self.col_idx
        assert rp[0] == 0 and rp[-1] == len(ci)
        assert np.all(np.diff(rp) >= 0)
        assert len(ci) == 0 or (ci.min() >= 0 and ci.max() < self.num_nodes)
        for i in range(self.num_nodes):
            row = ci[rp[i]:rp[i + 1]]
            assert np.all(np.diff(row) > 0), f"row {i} not strictly increasing"
            assert not np.any(row == i), f"self-loop at {i}"
        assert np.all(self.has_edge(self.col_idx, np.repeat(np.arange(self.num_nodes), self.degrees())))


def build_csr(edges, num_nodes: int) -> CsrAdjacency:
    """Symmetrize, deduplicate, drop self-loops and sort an edge list."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        bad = edges[(edges < 0).any(1) | (edges >= num_nodes).any(1)][0]
        raise IndexError(f"edge {tuple(bad)} has an endpoint outside [0, {num_nodes})")
    edges = edges[edges[:, 0] != edges[:, 1]]
    both = np.concatenate([edges, edges[:, ::-1]])
    keys = np.unique(both[:, 0] * num_nodes + both[:, 1])
    rows, cols = keys // num_nodes, keys % num_nodes
    row_ptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=num_nodes), out=row_ptr[1:])
    return CsrAdjacency(row_ptr, cols.astype(np.int64), int(num_nodes))


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Self-loop augmented ``D^-1/2 (A + I) D^-1/2`` in CSR form."""

    row_ptr: np.ndarray
    col_idx: np.ndarray
    weight: np.ndarray
    num_nodes: int

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.weight, self.col_idx, self.row_ptr),
                             shape=(self.num_nodes, self.num_nodes))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()


def gcn_normalize(adj: CsrAdjacency) -> NormalizedAdjacency:
    n = adj.num_nodes
    deg_hat = adj.degrees() + 1
    rows = np.repeat(np.arange(n, dtype=np.int64), adj.degrees())
    rows = np.concatenate([rows, np.arange(n, dtype=np.int64)])
    cols = np.concatenate([adj.col_idx, np.arange(n, dtype=np.int64)])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    inv_sqrt = 1.0 / np.sqrt(deg_hat.astype(np.float64))
    weight = inv_sqrt[rows] * inv_sqrt[cols]
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=row_ptr[1:])
    return NormalizedAdjacency(row_ptr, cols, weight, n)


@dataclass
class Block:
    """One bipartite message-passing layer of a sampled subgraph.

    ``src_nodes`` starts with ``dst_nodes`` so a destination's own state sits
    at the same local index on both sides.  Edges are local indices.
    """

    dst_nodes: np.ndarray
    src_nodes: np.ndarray
    edge_dst: np.ndarray
    edge_src: np.ndarray
    full_degree: np.ndarray = field(default=None)

    @property
    def num_dst(self) -> int:
        return len(self.dst_nodes)

    @property
    def num_src(self) -> int:
        return len(self.src_nodes)

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.edge_dst, minlength=self.num_dst)

    def mean_matrix(self) -> sp.csr_matrix:
        cnt = self.in_degree().astype(np.float64)
        inv = np.divide(1.0, cnt, out=np.zeros_like(cnt), where=cnt > 0)
        return sp.csr_matrix((inv[self.edge_dst], (self.edge_dst, self.edge_src)),
                             shape=(self.num_dst, self.num_src))

    def gcn_matrix(self, degrees: np.ndarray) -> sp.csr_matrix:
        """GCN weights with full-graph degrees; sampled neighbor terms are
        rescaled by ``degree / sampled`` so exhaustive sampling is exact."""
        deg_hat = degrees.astype(np.float64) + 1
        inv_sqrt = 1 / np.sqrt(deg_hat)
        gd, gs = self.dst_nodes[self.edge_dst], self.src_nodes[self.edge_src]
        cnt = self.in_degree().astype(np.float64)
        scale = np.divide(degrees[self.dst_nodes], cnt, out=np.zeros_like(cnt), where=cnt > 0)
        w = inv_sqrt[gd] * inv_sqrt[gs] * scale[self.edge_dst]
        loops = np.arange(self.num_dst)
        w = np.concatenate([w, inv_sqrt[self.dst_nodes] ** 2])
        r = np.concatenate([self.edge_dst, loops])
        c = np.concatenate([self.edge_src, loops])
        return sp.csr_matrix((w, (r, c)), shape=(self.num_dst, self.num_src))


def sample_neighbors(adj: CsrAdjacency, seed_nodes, fanouts, rng: RngState) -> list[Block]:
    """Layer-wise uniform neighbor sampling without replacement.

    ``fanouts[l]`` applies to GNN layer ``l`` (input side first).  Blocks are
    returned in the same input-to-output order; the last block's
    ``dst_nodes`` are the seeds.
    """
    seeds = np.asarray(seed_nodes, dtype=np.int64)
    if seeds.size == 0:
        raise SamplingError("cannot sample a subgraph for an empty seed set")
    if len(np.unique(seeds)) != len(seeds):
        raise SamplingError("seed nodes must be distinct")
    degrees = adj.degrees()
    blocks = []
    frontier = seeds
    for fanout in reversed(list(fanouts)):
        local = {int(v): i for i, v in enumerate(frontier)}
        src = list(frontier)
        edge_dst, edge_src = [], []
        for i, v in enumerate(frontier):
            nbrs = adj.neighbors(v)
            if len(nbrs) > fanout:
                nbrs = np.sort(nbrs[rng.choice(len(nbrs), fanout)])
            for u in nbrs:
                u = int(u)
                j = local.get(u)
                if j is None:
                    j = len(src)
                    local[u] = j
                    src.append(u)
                edge_dst.append(i)
                edge_src.append(j)
        src = np.asarray(src, dtype=np.int64)
        blocks.append(Block(frontier, src, np.asarray(edge_dst, dtype=np.int64),
                            np.asarray(edge_src, dtype=np.int64), degrees[frontier]))
        frontier = src
    return blocks[::-1]


@dataclass
class EdgeSplits:
    """Held-out positives plus fixed evaluation negatives.

    ``valid_neg[i]`` lists destination nodes paired with the source of
    ``valid[i]``; all of them are non-edges of the original graph.
    """

    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    valid_neg: np.ndarray
    test_neg: np.ndarray
    message_adj: CsrAdjacency

    @property
    def num_eval_negatives(self) -> int:
        return int(self.valid_neg.shape[1]) if self.valid_neg.ndim == 2 else 0

    def split_of(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "valid":
            return self.valid, self.valid_neg
        if name == "test":
            return self.test, self.test_neg
        raise KeyError(name)


def _eval_negatives(adj: CsrAdjacency, sources: np.ndarray, k: int, rng: RngState) -> np.ndarray:
    n = adj.num_nodes
    out = np.zeros((len(sources), k), dtype=np.int64)
    all_nodes = np.arange(n)
    for i, u in enumerate(sources):
        excluded = np.append(adj.neighbors(u), u)
        candidates = np.setdiff1d(all_nodes, excluded, assume_unique=True)
        if len(candidates) < k:
            raise ProtocolError(
                f"node {u} has only {len(candidates)} non-neighbors; {k} negatives requested")
        out[i] = candidates[rng.choice(len(candidates), k)]
    return out


def split_edges(adj: CsrAdjacency, valid_frac: float, test_frac: float,
                num_eval_negatives: int, rng: RngState) -> EdgeSplits:
    if valid_frac < 0 or test_frac < 0 or valid_frac + test_frac >= 1:
        raise ProtocolError("edge split fractions must be non-negative and sum below 1")
    edges = adj.undirected_edges()
    m = len(edges)
    n_valid = int(round(valid_frac * m))
    n_test = int(round(test_frac * m))
    order = rng.permutation(m)
    valid = edges[np.sort(order[:n_valid])]
    test = edges[np.sort(order[n_valid:n_valid + n_test])]
    train = edges[np.sort(order[n_valid + n_test:])]
    if (n_valid or n_test) and num_eval_negatives >= adj.num_nodes - 1:
        raise ProtocolError(
            f"graph with {adj.num_nodes} nodes cannot supply {num_eval_negatives} negatives")
    valid_neg = _eval_negatives(adj, valid[:, 0], num_eval_negatives, rng)
    test_neg = _eval_negatives(adj, test[:, 0], num_eval_negatives, rng)
    message = build_csr(train, adj.num_nodes)
    return EdgeSplits(train, valid, test, valid_neg, test_neg, message)


def sample_negative_pairs(adj: CsrAdjacency, count: int, rng: RngState,
                          max_rounds: int = 20) -> np.ndarray:
    """``count`` uniform node pairs that are not edges of ``adj`` (nor self-pairs).

    Colliding draws are redrawn; gives up after ``max_rounds`` rounds.
    """
    if count <= 0:
        raise ValueError("negative sample count must be positive")
    n = adj.num_nodes
    out = np.empty((0, 2), dtype=np.int64)
    for _ in range(max_rounds):
        need = count - len(out)
        draws = rng.integers(n, (need * 2,)).reshape(need, 2)
        ok = (draws[:, 0] != draws[:, 1]) & ~adj.has_edge(draws[:, 0], draws[:, 1])
        out = np.concatenate([out, draws[ok]])
        if len(out) >= count:
            return out[:count]
    raise SamplingError(f"could not draw {count} non-edges after {max_rounds} rounds")
