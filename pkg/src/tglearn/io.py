"""Plain-text graph files and atomic artifact writes.

File formats (UTF-8, LF line endings, 0-based node ids):

* texts      ``node_id<TAB>text``
* edges      ``u<TAB>v`` (undirected; each pair once)
* labels     ``node_id<TAB>class``
* node split ``node_id<TAB>{train,valid,test}``
* edge split ``u v s`` with ``s`` in ``{t,v,s}`` (train, valid, test)
* negatives  ``u<TAB>w<TAB>{v,s}`` evaluation negatives per held-out positive,
  written in positive order, ``num_eval_negatives`` lines per positive
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DuplicateError, MissingIdError, ParseError


def atomic_write_bytes(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_tsv(path, texts):
    lines = []
    for i, t in enumerate(texts):
        if "\t" in t or "\n" in t or "\r" in t:
            raise ValueError(f"text of node {i} contains a tab or newline")
        lines.append(f"{i}\t{t}\n")
    atomic_write_text(path, "".join(lines))


def load_tsv(path, num_nodes: int | None = None) -> list[str]:
    """Dense, id-indexed texts from a ``node_id<TAB>text`` file."""
    store: dict[int, str] = {}
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            head, sep, text = line.partition("\t")
            if not sep:
                raise ParseError("expected node_id<TAB>text", lineno)
            try:
                node = int(head)
            except ValueError:
                raise ParseError(f"node id {head!r} is not an integer", lineno) from None
            if node < 0:
                raise ParseError(f"negative node id {node}", lineno)
            if node in store:
                raise DuplicateError(f"line {lineno}: duplicate node id {node}")
            store[node] = text
    n = num_nodes if num_nodes is not None else (max(store) + 1 if store else 0)
    missing = [i for i in range(n) if i not in store]
    if missing:
        raise MissingIdError(missing)
    extra = [i for i in store if i >= n]
    if extra:
        raise ParseError(f"node id {extra[0]} outside graph of {n} nodes")
    return [store[i] for i in range(n)]


def _read_int_rows(path, width: int) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != width:
                raise ParseError(f"expected {width} fields, got {len(parts)}", lineno)
            try:
                rows.append([int(p) for p in parts])
            except ValueError:
                raise ParseError(f"non-integer field in {line.strip()!r}", lineno) from None
    return np.asarray(rows, dtype=np.int64).reshape(-1, width)


def write_edges(path, edges):
    atomic_write_text(path, "".join(f"{u}\t{v}\n" for u, v in np.asarray(edges)))


def load_edges(path) -> np.ndarray:
    return _read_int_rows(path, 2)


def write_labels(path, labels):
    atomic_write_text(path, "".join(f"{i}\t{c}\n" for i, c in enumerate(labels)))


def load_labels(path, num_nodes: int) -> np.ndarray:
    rows = _read_int_rows(path, 2)
    labels = np.full(num_nodes, -1, dtype=np.int64)
    for node, c in rows:
        if not 0 <= node < num_nodes:
            raise ParseError(f"label for unknown node {node}")
        if labels[node] != -1:
            raise DuplicateError(f"duplicate label for node {node}")
        labels[node] = c
    return labels


def write_node_splits(path, splits: dict):
    lines = []
    for name in ("train", "valid", "test"):
        lines += [f"{i}\t{name}\n" for i in splits.get(name, [])]
    atomic_write_text(path, "".join(lines))


def load_node_splits(path) -> dict:
    out = {"train": [], "valid": [], "test": []}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2 or parts[1] not in out:
                raise ParseError("expected node_id<TAB>{train,valid,test}", lineno)
            out[parts[1]].append(int(parts[0]))
    return {k: np.asarray(sorted(v), dtype=np.int64) for k, v in out.items()}


_EDGE_TAGS = {"train": "t", "valid": "v", "test": "s"}


def write_edge_splits(path, train, valid, test):
    lines = []
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        tag = _EDGE_TAGS[name]
        lines += [f"{u} {v} {tag}\n" for u, v in part]
    atomic_write_text(path, "".join(lines))


def load_edge_splits(path) -> dict:
    parts = {"t": [], "v": [], "s": []}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 3 or fields[2] not in parts:
                raise ParseError("expected 'u v split' with split in {t,v,s}", lineno)
            parts[fields[2]].append((int(fields[0]), int(fields[1])))
    names = {v: k for k, v in _EDGE_TAGS.items()}
    return {names[t]: np.asarray(p, dtype=np.int64).reshape(-1, 2) for t, p in parts.items()}


def write_negatives(path, valid_pos, valid_neg, test_pos, test_neg):
    lines = []
    for tag, pos, neg in (("v", valid_pos, valid_neg), ("s", test_pos, test_neg)):
        for (u, _), row in zip(pos, neg):
            lines += [f"{u}\t{w}\t{tag}\n" for w in row]
    atomic_write_text(path, "".join(lines))


def load_negatives(path, n_valid: int, n_test: int) -> tuple[np.ndarray, np.ndarray]:
    rows = {"v": [], "s": []}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 3 or fields[2] not in rows:
                raise ParseError("expected u<TAB>w<TAB>{v,s}", lineno)
            rows[fields[2]].append(int(fields[1]))

    def shape(vals, count):
        if count == 0:
            return np.zeros((0, 0), dtype=np.int64)
        if len(vals) % count:
            raise ParseError("negatives are not a whole multiple of the positives")
        return np.asarray(vals, dtype=np.int64).reshape(count, -1)

    return shape(rows["v"], n_valid), shape(rows["s"], n_test)


def save_graph(graph, directory):
    """Materialize texts, edges, labels and splits for ``graph`` under ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tsv(d / "texts.tsv", graph.texts)
    write_edges(d / "edges.tsv", graph.adj.undirected_edges())
    paths = {"texts": d / "texts.tsv", "edges": d / "edges.tsv"}
    if graph.labels is not None:
        write_labels(d / "labels.tsv", graph.labels)
        paths["labels"] = d / "labels.tsv"
    if graph.splits:
        write_node_splits(d / "node_splits.tsv", graph.splits)
        paths["node_splits"] = d / "node_splits.tsv"
    if graph.edge_splits is not None:
        es = graph.edge_splits
        write_edge_splits(d / "edge_splits.txt", es.train, es.valid, es.test)
        write_negatives(d / "eval_negatives.tsv", es.valid, es.valid_neg, es.test, es.test_neg)
        paths["edge_splits"] = d / "edge_splits.txt"
        paths["eval_negatives"] = d / "eval_negatives.tsv"
    return paths


def load_graph(directory):
    from .corpus import TextualGraph
    from .errors import DependencyError
    from .graph import EdgeSplits, build_csr

    d = Path(directory)
    for name in ("texts.tsv", "edges.tsv"):
        if not (d / name).exists():
            raise DependencyError(f"missing graph file {d / name}")
    texts = load_tsv(d / "texts.tsv")
    n = len(texts)
    adj = build_csr(load_edges(d / "edges.tsv"), n)
    labels, k = None, 0
    if (d / "labels.tsv").exists():
        labels = load_labels(d / "labels.tsv", n)
        k = int(labels.max()) + 1
    splits = load_node_splits(d / "node_splits.tsv") if (d / "node_splits.tsv").exists() else {}
    edge_splits = None
    if (d / "edge_splits.txt").exists():
        parts = load_edge_splits(d / "edge_splits.txt")
        vneg, sneg = load_negatives(d / "eval_negatives.tsv", len(parts["valid"]), len(parts["test"]))
        edge_splits = EdgeSplits(parts["train"], parts["valid"], parts["test"], vneg, sneg,
                                 build_csr(parts["train"], n))
    return TextualGraph(adj, texts, labels, k, splits, edge_splits)
