import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tglearn.rng import RngState


def test_same_seed_same_stream():
    a, b = RngState(5), RngState(5)
    np.testing.assert_array_equal(a.random(100), b.random(100))
    assert a.position == 100


def test_draws_depend_only_on_position():
    whole = RngState(3).random(10)
    split = RngState(3)
    np.testing.assert_array_equal(np.concatenate([split.random(4), split.random(6)]), whole)


def test_spawn_is_independent_and_stable():
    root = RngState(1)
    a = root.spawn("x").random(5)
    assert root.position == 0
    np.testing.assert_array_equal(a, RngState(1).spawn("x").random(5))
    assert not np.array_equal(a, root.spawn("y").random(5))


def test_uniform_moments():
    u = RngState(0).random(100_000)
    assert 0 <= u.min() and u.max() < 1
    assert abs(u.mean() - 0.5) < 0.01 and abs(u.var() - 1 / 12) < 0.005


def test_normal_moments():
    z = RngState(2).normal(100_000)
    assert abs(z.mean()) < 0.02 and abs(z.std() - 1) < 0.02


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63), st.floats(0.0, 1.0))
def test_bernoulli_frequency(seed, p):
    mask = RngState(seed).bernoulli((20_000,), p)
    assert mask.dtype == bool
    assert abs(mask.mean() - p) < 5 * np.sqrt(p * (1 - p) / 20_000) + 1e-9


def test_bernoulli_extremes_and_odd_sizes():
    assert RngState(0).bernoulli((3, 3), 1.0).all()
    assert not RngState(0).bernoulli((7,), 0.0).any()
    np.testing.assert_array_equal(RngState(4).bernoulli((5,), 0.5), RngState(4).bernoulli((5,), 0.5))


def test_permutation_and_choice():
    rng = RngState(9)
    assert sorted(rng.permutation(20).tolist()) == list(range(20))
    c = rng.choice(10, 4)
    assert len(set(c.tolist())) == 4
    with pytest.raises(ValueError):
        rng.choice(3, 4)


def test_integers_range():
    d = RngState(7).integers(6, (10_000,))
    assert d.min() == 0 and d.max() == 5
    assert np.all(np.abs(np.bincount(d) / 10_000 - 1 / 6) < 0.02)
