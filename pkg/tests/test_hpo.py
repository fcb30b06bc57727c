import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tglearn.errors import ConfigError, SearchError
from tglearn.gnn import GnnConfig
from tglearn.hpo import (Continuous, Discrete, SearchSpace, apply_gnn_params, apply_lm_params,
                         parse_trial_log, run_search, sample_trial, trial_log_csv)
from tglearn.lora import LoraConfig
from tglearn.rng import RngState
from tglearn.stage1 import Stage1Config


def test_lm_learning_rate_log_uniform():
    spec = SearchSpace.lm().params["learning_rate"]
    rng = RngState(0)
    draws = np.array([spec.sample(rng) for _ in range(10_000)])
    assert draws.min() >= 1e-6 and draws.max() <= 1e-4
    assert abs((draws < 1e-5).mean() - 0.5) <= 0.05


def test_linear_range_is_uniform():
    spec = SearchSpace.lm().params["header_dropout"]
    assert not spec.is_log
    rng = RngState(1)
    draws = np.array([spec.sample(rng) for _ in range(10_000)])
    assert abs(draws.mean() - 0.45) < 0.01


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**9), st.sampled_from(["lm", "gnn"]), st.sampled_from(["nodecls", "link"]))
def test_samples_stay_in_space(seed, stage, task):
    space = getattr(SearchSpace, stage)(task)
    assert space.contains(sample_trial(space, RngState(seed)))


def test_spaces_mirror_documented_ranges():
    lm = SearchSpace.lm().params
    assert (lm["learning_rate"].lo, lm["learning_rate"].hi) == (1e-6, 1e-4)
    assert (lm["weight_decay"].lo, lm["weight_decay"].hi) == (1e-7, 1e-4)
    assert (lm["label_smoothing"].lo, lm["label_smoothing"].hi) == (0.1, 0.7)
    assert (lm["header_dropout"].lo, lm["header_dropout"].hi) == (0.1, 0.8)
    assert lm["lora_rank"].values == (1, 2, 4, 8) and lm["lora_alpha"].values == (4, 8, 16, 32)
    gnn = SearchSpace.gnn().params
    assert gnn["num_layers"].values == (2, 3, 4, 6, 8) and gnn["hidden_dim"].values == (64, 128, 256)
    assert (gnn["learning_rate"].lo, gnn["learning_rate"].hi) == (1e-4, 1e-2)
    assert "label_smoothing" not in SearchSpace.gnn("link").params
    assert SearchSpace.lm().default_budget == 10 and SearchSpace.gnn().default_budget == 20


def test_space_guards():
    with pytest.raises(ConfigError):
        Continuous(1.0, 1.0)
    with pytest.raises(ConfigError):
        Discrete(())
    with pytest.raises(ConfigError):
        SearchSpace("tpe", {})


def test_budget_one():
    res = run_search(SearchSpace.gnn(), 1, lambda p: p["dropout"], seed=3)
    assert len(res.trials) == 1 and res.best is res.trials[0]


def test_budget_zero_rejected():
    with pytest.raises(ConfigError):
        run_search(SearchSpace.gnn(), 0, lambda p: 0.0)


def test_same_seed_same_sequence():
    a = run_search(SearchSpace.lm(), 5, lambda p: p["learning_rate"], seed=7)
    b = run_search(SearchSpace.lm(), 5, lambda p: p["learning_rate"], seed=7)
    c = run_search(SearchSpace.lm(), 5, lambda p: p["learning_rate"], seed=8)
    assert [t.params for t in a.trials] == [t.params for t in b.trials]
    assert [t.params for t in a.trials] != [t.params for t in c.trials]


def test_best_maximizes_objective():
    res = run_search(SearchSpace.gnn(), 8, lambda p: -abs(p["dropout"] - 0.4), seed=0)
    assert res.best.objective == max(t.objective for t in res.trials)
    prefix = res.best_prefix()
    assert prefix == sorted(prefix) and prefix[-1] == res.best.objective


def test_failed_trials_are_logged():
    calls = []

    def objective(p):
        calls.append(p)
        if len(calls) % 2:
            raise FloatingPointError("diverged")
        return math.nan if len(calls) == 4 else 1.0

    res = run_search(SearchSpace.gnn(), 6, objective, seed=1)
    status = [t.status for t in res.trials]
    assert status == ["failed", "ok", "failed", "failed", "failed", "ok"]
    assert "diverged" in res.trials[0].error and "non-finite" in res.trials[3].error
    assert res.best.trial_id == 1


def test_all_failed_raises():
    with pytest.raises(SearchError):
        run_search(SearchSpace.gnn(), 3, lambda p: 1 / 0)


def test_trial_log_round_trip():
    space = SearchSpace.gnn()
    res = run_search(space, 4, lambda p: p["learning_rate"] if p["num_layers"] != 2 else 1 / 0, seed=2)
    text = trial_log_csv(space, res)
    assert text.splitlines()[0].split(",") == ["trial_id", *space.params, "objective", "status"]
    back = parse_trial_log(text)
    for a, b in zip(res.trials, back):
        assert (a.trial_id, a.params, a.objective, a.status) == (b.trial_id, b.params, b.objective, b.status)


def test_apply_params():
    lm = apply_lm_params(Stage1Config(lora=LoraConfig()), {"learning_rate": 3e-5, "lora_rank": 8})
    assert lm.learning_rate == 3e-5 and lm.lora.rank == 8
    gnn = apply_gnn_params(GnnConfig(fanouts=(5, 5)), {"num_layers": 3, "hidden_dim": 64})
    assert gnn.num_layers == 3 and gnn.fanouts == (5, 5, 5)
