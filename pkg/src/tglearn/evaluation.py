"""Metrics, ensembling, comparison deltas and the 2-D feature projection."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ComparisonError, EnsembleError, MetricError, ParameterError, ProjectionError
from .rng import RngState


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.shape != labels.shape:
        raise MetricError(f"prediction/label length mismatch: {pred.shape} vs {labels.shape}")
    if pred.size == 0:
        raise MetricError("accuracy of an empty set is undefined")
    return float(np.mean(pred == labels))


def ranks(pos_scores, neg_scores) -> np.ndarray:
    """Rank of each positive among its negatives, ties counted as half.

    ``rank = 1 + #{neg > pos} + #{neg == pos} / 2``.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if neg.ndim == 1:
        neg = neg.reshape(1, -1)
    if neg.shape[0] != pos.shape[0] or neg.shape[1] < 1:
        raise MetricError(f"need one row of >= 1 negatives per positive, got {neg.shape}")
    if np.isnan(pos).any() or np.isnan(neg).any():
        raise MetricError("NaN score")
    above = (neg > pos[:, None]).sum(axis=1)
    ties = (neg == pos[:, None]).sum(axis=1)
    return 1.0 + above + 0.5 * ties


def mrr(pos_scores, neg_scores) -> float:
    return float(np.mean(1.0 / ranks(pos_scores, neg_scores)))


def hits_at_k(pos_scores, neg_scores, k: int) -> float:
    neg = np.asarray(neg_scores)
    num_neg = neg.shape[-1]
    if not 1 <= k <= num_neg + 1:
        raise ParameterError(f"k must lie in [1, {num_neg + 1}], got {k}")
    return float(np.mean(ranks(pos_scores, neg_scores) <= k))


def ranking_metrics(pos_scores, neg_scores, ks=(1, 3, 10)) -> dict:
    r = ranks(pos_scores, neg_scores)
    out = {"mrr": float(np.mean(1.0 / r))}
    for k in ks:
        if k <= np.asarray(neg_scores).shape[-1] + 1:
            out[f"hits@{k}"] = float(np.mean(r <= k))
    return out


# ensembling ---------------------------------------------------------------

@dataclass
class EnsembleSpec:
    members: list
    weights: list | None = None

    def normalized_weights(self) -> np.ndarray:
        n = len(self.members)
        if n < 2:
            raise EnsembleError("an ensemble needs at least two members")
        w = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (n,):
            raise EnsembleError(f"{len(w)} weights for {n} members")
        if np.any(w < 0) or not np.isfinite(w).all() or w.sum() <= 0:
            raise EnsembleError("weights must be finite, non-negative and not all zero")
        return w / w.sum()


def ensemble(members, spec: EnsembleSpec | None = None) -> np.ndarray:
    """Weighted elementwise mean of member predictions (probabilities or scores)."""
    arrays = [np.asarray(m, dtype=np.float64) for m in members]
    spec = spec or EnsembleSpec(list(range(len(arrays))))
    if len(spec.members) != len(arrays):
        raise EnsembleError("spec and member list differ in length")
    w = spec.normalized_weights()
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise EnsembleError(f"member shapes differ: {[a.shape for a in arrays]}")
    out = np.zeros(shape)
    for wi, a in zip(w, arrays):
        out += wi * a
    return out


def ensemble_predict(members, spec: EnsembleSpec | None = None) -> np.ndarray:
    return ensemble(members, spec).argmax(axis=1)


# feature-space diagnostics --------------------------------------------------

def _top_direction(M: np.ndarray, rng: RngState, tol: float, max_iter: int) -> np.ndarray:
    v = rng.normal((M.shape[0],))
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = M @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return v
        w /= norm
        if np.linalg.norm(w - v) < tol:
            return w
        v = w
    return v


def principal_directions(X: np.ndarray, k: int = 2, tol: float = 1e-9, max_iter: int = 20000,
                         seed: int = 0) -> np.ndarray:
    """Top-``k`` principal directions of centered ``X`` by power iteration with deflation."""
    cov = X.T @ X
    rng = RngState(seed).spawn("power-iteration")
    dirs = []
    for _ in range(k):
        v = _top_direction(cov, rng, tol, max_iter)
        dirs.append(v)
        cov = cov - (v @ cov @ v) * np.outer(v, v)
    return np.stack(dirs, axis=1)


def sample_per_class(labels, per_class: int, rng: RngState) -> np.ndarray:
    labels = np.asarray(labels)
    picked = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        take = min(per_class, len(idx))
        picked.append(np.sort(idx[rng.choice(len(idx), take)]))
    return np.concatenate(picked)


def project_2d(X, labels, sample_per_class_n: int | None = None, seed: int = 0):
    """Mean-centered projection of (sampled) rows onto the top two principal directions.

    Returns ``(coords, labels, row_index)``.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    rows = np.arange(len(X))
    if sample_per_class_n is not None:
        rows = sample_per_class(labels, sample_per_class_n, RngState(seed).spawn("projection"))
    sub = X[rows]
    if len(sub) < 2:
        raise ProjectionError("projection needs at least two samples")
    centered = sub - sub.mean(axis=0)
    if np.allclose(centered, 0):
        raise ProjectionError("all sampled rows are identical; nothing to project")
    W = principal_directions(centered, 2, seed=seed)
    return centered @ W, labels[rows], rows


def projection_csv(coords, labels) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "label"])
    for (x, y), c in zip(coords, labels):
        w.writerow([repr(float(x)), repr(float(y)), int(c)])
    return buf.getvalue()


def scatter_ratio(X, labels) -> float:
    """trace(between-class scatter) / trace(within-class scatter)."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    mu = X.mean(axis=0)
    between = within = 0.0
    for c in np.unique(labels):
        Xc = X[labels == c]
        mc = Xc.mean(axis=0)
        between += len(Xc) * float(np.sum((mc - mu) ** 2))
        within += float(np.sum((Xc - mc) ** 2))
    if within == 0:
        return float("inf")
    return between / within


# reports ----------------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-split metrics for one or more seeded runs of a single configuration."""

    task: str
    name: str
    metric: str
    runs: list[dict] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    config_hash: str = ""
    num_eval_negatives: int = 0

    def add_run(self, seed: int, values: dict):
        self.seeds.append(int(seed))
        self.runs.append({k: float(v) for k, v in values.items()})

    def values(self, key: str) -> np.ndarray:
        return np.asarray([r[key] for r in self.runs], dtype=np.float64)

    def mean(self, key: str) -> float:
        return float(self.values(key).mean())

    def std(self, key: str) -> float | None:
        v = self.values(key)
        return float(v.std(ddof=1)) if len(v) >= 2 else None

    def keys(self) -> list[str]:
        out = []
        for r in self.runs:
            out += [k for k in r if k not in out]
        return out

    @property
    def delta_overfit(self) -> float:
        m = self.metric
        return self.mean(f"train_{m}") - self.mean(f"test_{m}")

    def summary(self) -> dict:
        out = {"task": self.task, "name": self.name, "metric": self.metric,
               "seeds": ",".join(str(s) for s in self.seeds), "config_hash": self.config_hash,
               "num_eval_negatives": self.num_eval_negatives, "runs": len(self.runs)}
        for k in self.keys():
            out[f"{k}_mean"] = self.mean(k)
            sd = self.std(k)
            if sd is not None:
                out[f"{k}_std"] = sd
        if f"train_{self.metric}" in self.keys() and f"test_{self.metric}" in self.keys():
            out["delta_overfit"] = self.delta_overfit
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.summary().items())

    def to_csv_row(self, header: bool = True) -> str:
        s = self.summary()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(list(s))
        w.writerow([_fmt(v) for v in s.values()])
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = {}
        for line in text.splitlines():
            if " = " in line:
                k, v = line.split(" = ", 1)
                kv[k.strip()] = v.strip()
        rep = cls(kv["task"], kv["name"], kv["metric"], config_hash=kv.get("config_hash", ""),
                  num_eval_negatives=int(kv.get("num_eval_negatives", 0)))
        rep.seeds = [int(s) for s in kv["seeds"].split(",") if s]
        means = {k[:-5]: float(v) for k, v in kv.items() if k.endswith("_mean")}
        # a flattened report keeps only aggregate values; expose them as one run
        rep.runs = [means]
        return rep


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def compare_report(reports: dict, sota: str, mlp: str = "mlp", gnn: str = "sage",
                   split: str = "test") -> dict:
    """Table of ``metric(sota) - metric(mlp)`` and ``metric(sota) - metric(gnn)``."""
    missing = [n for n in (sota, mlp, gnn) if n not in reports]
    if missing:
        raise ComparisonError(f"missing report(s): {missing}")
    r0 = reports[sota]
    for name in (mlp, gnn):
        r = reports[name]
        if r.task != r0.task or r.metric != r0.metric:
            raise ComparisonError(f"report {name!r} differs in task or metric")
        if r.seeds != r0.seeds:
            raise ComparisonError(f"report {name!r} was run on seeds {r.seeds}, expected {r0.seeds}")
    key = f"{split}_{r0.metric}"
    value = {n: reports[n].mean(key) for n in (sota, mlp, gnn)}
    return {
        "metric": key,
        "values": value,
        "delta_mlp": value[sota] - value[mlp],
        "delta_gnn": value[sota] - value[gnn],
    }


def metric_delta(a: EvalReport, b: EvalReport, key: str) -> float:
    if a.seeds != b.seeds:
        raise ComparisonError("reports were run on different seeds")
    return a.mean(key) - b.mean(key)


def comparison_table(reports: dict, split: str = "test") -> str:
    """CSV table with one row per report: name, mean and std of each split metric."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "task", "metric", "seeds", "train_mean", "valid_mean", "test_mean",
                "test_std", "delta_overfit"])
    for name, r in reports.items():
        m = r.metric
        keys = r.keys()
        cells = [name, r.task, m, ",".join(map(str, r.seeds))]
        for s in ("train", "valid", "test"):
            cells.append(f"{r.mean(f'{s}_{m}'):.6f}" if f"{s}_{m}" in keys else "")
        sd = r.std(f"test_{m}") if f"test_{m}" in keys else None
        cells.append("" if sd is None else f"{sd:.6f}")
        cells.append(f"{r.delta_overfit:.6f}" if f"train_{m}" in keys else "")
        w.writerow(cells)
    return buf.getvalue()
