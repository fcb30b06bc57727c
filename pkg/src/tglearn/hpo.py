"""Uniform random search over the finetuning and GNN hyperparameter spaces."""

from __future__ import annotations

import csv
import io
import math
import traceback
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SearchError
from .rng import RngState

LM_TRIALS = 10
GNN_TRIALS = 20


@dataclass(frozen=True)
class Continuous:
    lo: float
    hi: float
    log: bool | None = None

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError(f"continuous range needs lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def is_log(self) -> bool:
        if self.log is not None:
            return self.log
        return self.lo > 0 and self.hi / self.lo >= 100

    def sample(self, rng: RngState) -> float:
        u = float(rng.random())
        if self.is_log:
            return math.exp(math.log(self.lo) + u * (math.log(self.hi) - math.log(self.lo)))
        return self.lo + u * (self.hi - self.lo)

    def contains(self, v) -> bool:
        return self.lo <= v <= self.hi


@dataclass(frozen=True)
class Discrete:
    values: tuple

    def __post_init__(self):
        if not self.values:
            raise ConfigError("discrete choice list is empty")

    def sample(self, rng: RngState):
        return self.values[int(rng.integers(len(self.values)))]

    def contains(self, v) -> bool:
        return v in self.values


@dataclass
class SearchSpace:
    stage: str
    params: dict

    def __post_init__(self):
        if self.stage not in ("lm", "gnn"):
            raise ConfigError(f"unknown search stage {self.stage!r}")

    @classmethod
    def lm(cls, task: str = "nodecls") -> "SearchSpace":
        params = {
            "learning_rate": Continuous(1e-6, 1e-4),
            "weight_decay": Continuous(1e-7, 1e-4),
            "label_smoothing": Continuous(0.1, 0.7),
            "header_dropout": Continuous(0.1, 0.8),
            "lora_rank": Discrete((1, 2, 4, 8)),
            "lora_alpha": Discrete((4, 8, 16, 32)),
            "lora_dropout": Continuous(0.1, 0.8),
        }
        if task == "link":
            # no label smoothing for the link objective
            del params["label_smoothing"]
        return cls("lm", params)

    @classmethod
    def gnn(cls, task: str = "nodecls") -> "SearchSpace":
        params = {
            "num_layers": Discrete((2, 3, 4, 6, 8)),
            "hidden_dim": Discrete((64, 128, 256)),
            "dropout": Continuous(0.1, 0.8),
            "learning_rate": Continuous(1e-4, 1e-2),
            "weight_decay": Continuous(1e-7, 1e-4),
            "label_smoothing": Continuous(0.1, 0.7),
        }
        if task == "link":
            del params["label_smoothing"]
        return cls("gnn", params)

    @property
    def default_budget(self) -> int:
        return LM_TRIALS if self.stage == "lm" else GNN_TRIALS

    def contains(self, config: dict) -> bool:
        return set(config) == set(self.params) and all(
            self.params[k].contains(v) for k, v in config.items())


def sample_trial(space: SearchSpace, rng: RngState) -> dict:
    """One configuration; parameters are drawn in declaration order."""
    return {name: spec.sample(rng) for name, spec in space.params.items()}


@dataclass
class Trial:
    trial_id: int
    params: dict
    objective: float | None = None
    status: str = "pending"
    error: str = ""


@dataclass
class SearchResult:
    best: Trial
    trials: list[Trial] = field(default_factory=list)

    def best_prefix(self) -> list[float]:
        """Running best objective after each trial (failed trials keep the previous best)."""
        out, cur = [], -math.inf
        for t in self.trials:
            if t.status == "ok":
                cur = max(cur, t.objective)
            out.append(cur)
        return out


def run_search(space: SearchSpace, budget: int, objective_fn, seed: int = 0) -> SearchResult:
    """Sequential random search; a raising or non-finite trial is logged as failed.

    The best trial maximizes the objective; ties go to the earlier trial.
    """
    if budget < 1:
        raise ConfigError("search budget must be at least 1")
    root = RngState(seed).spawn(f"search-{space.stage}")
    trials = []
    for i in range(budget):
        params = sample_trial(space, root.spawn(f"trial{i}"))
        trial = Trial(i, params)
        try:
            value = float(objective_fn(dict(params)))
            if math.isfinite(value):
                trial.objective, trial.status = value, "ok"
            else:
                trial.status, trial.error = "failed", f"non-finite objective {value}"
        except Exception as err:  # noqa: BLE001 - a failed trial must not end the search
            trial.status = "failed"
            trial.error = "".join(traceback.format_exception_only(type(err), err)).strip()
        trials.append(trial)
    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        raise SearchError(f"all {budget} trials failed; first error: {trials[0].error}")
    best = max(ok, key=lambda t: (t.objective, -t.trial_id))
    return SearchResult(best, trials)


def trial_log_csv(space: SearchSpace, result: SearchResult) -> str:
    names = list(space.params)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial_id", *names, "objective", "status"])
    for t in result.trials:
        w.writerow([t.trial_id, *(repr(t.params[n]) for n in names),
                    "" if t.objective is None else repr(t.objective), t.status])
    return buf.getvalue()


def parse_trial_log(text: str) -> list[Trial]:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    names = header[1:-2]
    trials = []
    for row in body:
        params = {n: _parse_value(v) for n, v in zip(names, row[1:-2])}
        obj = float(row[-2]) if row[-2] else None
        trials.append(Trial(int(row[0]), params, obj, row[-1]))
    return trials


def _parse_value(text: str):
    try:
        v = float(text)
    except ValueError:
        return text
    return int(v) if v.is_integer() and "." not in text and "e" not in text else v


def apply_lm_params(cfg, params: dict):
    """Copy of a ``Stage1Config`` with sampled LM parameters applied."""
    import copy

    from .lora import LoraConfig

    out = copy.deepcopy(cfg)
    for key in ("learning_rate", "weight_decay", "label_smoothing", "header_dropout"):
        if key in params:
            setattr(out, key, params[key])
    if out.lora is not None:
        base = out.lora
        out.lora = LoraConfig(rank=params.get("lora_rank", base.rank),
                              alpha=params.get("lora_alpha", base.alpha),
                              dropout=params.get("lora_dropout", base.dropout),
                              targets=base.targets, seed=base.seed)
    return out


def apply_gnn_params(cfg, params: dict):
    """Copy of a ``GnnConfig`` with sampled parameters applied (fanouts follow depth)."""
    import copy

    out = copy.deepcopy(cfg)
    for key, v in params.items():
        setattr(out, key, v)
    if len(out.fanouts) != out.num_layers:
        f = out.fanouts[0] if out.fanouts else 10
        out.fanouts = tuple([f] * out.num_layers)
    return out


def objective_values(result: SearchResult) -> np.ndarray:
    return np.asarray([np.nan if t.objective is None else t.objective for t in result.trials])
