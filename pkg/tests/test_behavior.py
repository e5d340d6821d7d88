import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poela import behavior as bh
from poela.envs import EnvSpec, generate_logged_data, make_env
from poela.errors import DatasetError

from conftest import bandit_dataset, random_dataset


def planar():
    pts = np.array([[0, 0], [1, 0], [0, 1], [2, 2], [3, 0], [0.5, 0.5]], dtype=float)
    return bandit_dataset(pts, [0, 1, 1, 2, 0, 2], [0.0] * 6, [0.5] * 6, 3)


def test_k_equals_n_gives_global_frequencies(rng):
    ds = random_dataset(rng, n=10, A=4)
    est = bh.knn_behavior(ds, ds.n_steps)
    freq = np.bincount(ds.actions, minlength=4) / ds.n_steps
    np.testing.assert_allclose(est.probs(rng.normal(size=(5, 2))), np.tile(freq, (5, 1)))


def test_k_one_is_nearest_action():
    ds = planar()
    est = bh.knn_behavior(ds, 1)
    np.testing.assert_array_equal(est.probs([[2.9, 0.1]]), [[1, 0, 0]])
    np.testing.assert_array_equal(est.probs(ds.contexts), np.eye(3)[ds.actions])


def test_six_point_oracle():
    ds = planar()
    x = np.array([0.4, 0.3])
    d = np.linalg.norm(ds.contexts - x, axis=1)
    order = sorted(range(6), key=lambda i: (d[i], i))[:3]
    expected = np.bincount(ds.actions[order], minlength=3) / 3
    np.testing.assert_allclose(bh.knn_behavior(ds, 3).probs(x)[0], expected)


def test_ties_broken_by_dataset_order():
    pts = np.array([[1.0, 0], [-1.0, 0], [0, 1.0], [0, -1.0]])
    ds = bandit_dataset(pts, [0, 1, 2, 2], [0.0] * 4, [0.5] * 4, 3)
    np.testing.assert_allclose(bh.knn_behavior(ds, 2).probs([[0.0, 0.0]])[0], [0.5, 0.5, 0])


def test_k_too_large(rng):
    ds = random_dataset(rng, n=2, h_max=1)
    with pytest.raises(ValueError):
        bh.knn_behavior(ds, ds.n_steps + 1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 8))
def test_estimate_is_distribution(seed, k):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n=8, A=4, h_max=2)
    k = min(k, ds.n_steps)
    P = bh.knn_behavior(ds, k).probs(rng.normal(size=(6, 2)))
    assert np.all(P >= 0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)


def test_knn_consistent_on_synthetic():
    env = make_env(EnvSpec("bandit", {"n_contexts": 4, "n_actions": 3}, 0))
    table = np.array([[0.6, 0.3, 0.1], [0.2, 0.2, 0.6], [1 / 3, 1 / 3, 1 / 3], [0.5, 0.5, 0.0]])
    env = make_env(EnvSpec("bandit", {"n_contexts": 4, "n_actions": 3,
                                      "behavior": table.tolist()}, 0))
    ds = generate_logged_data(env, "env", 8000, seed=1)
    est = bh.knn_behavior(ds, 1000)
    assert np.max(np.abs(est.probs(np.eye(4)) - table)) < 0.05


def test_overlap_mask_floor_cases(rng):
    ds = random_dataset(rng, n=12, A=3)
    uniform_logs = bh.knn_behavior(ds, ds.n_steps)
    if np.all(np.bincount(ds.actions, minlength=3) > 0):
        assert bh.overlap_mask(uniform_logs, ds, 0.0).all()
    np.testing.assert_array_equal(bh.overlap_mask(uniform_logs, ds, 1.0), np.eye(3, dtype=bool)[ds.actions])


def test_overlap_mask_matches_thresholded_oracle_frequencies():
    env = make_env(EnvSpec("example1", {"n_contexts": 10, "n_actions": 10}, 0))
    ds = generate_logged_data(env, "uniform", 3000, seed=2)
    est = bh.knn_behavior(ds, 100)
    # Oracle kNN on one-hot contexts: the 100 nearest are the first 100 same-context samples.
    ctx = np.argmax(ds.contexts, axis=1)
    oracle = np.zeros((ds.n_steps, 10))
    for c in range(10):
        first = np.flatnonzero(ctx == c)[:100]
        oracle[ctx == c] = np.bincount(ds.actions[first], minlength=10) / 100
    expected = oracle > 0.05
    expected[np.arange(ds.n_steps), ds.actions] = True
    np.testing.assert_array_equal(bh.overlap_mask(est, ds, 0.05), expected)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), lo=st.floats(0, 1), hi=st.floats(0, 1))
def test_mask_shrinks_with_floor(seed, lo, hi):
    lo, hi = sorted((lo, hi))
    ds = random_dataset(np.random.default_rng(seed), n=8, A=4)
    est = bh.knn_behavior(ds, min(5, ds.n_steps))
    assert np.all(bh.overlap_mask(est, ds, hi) <= bh.overlap_mask(est, ds, lo))


def test_estimated_propensities_swap(rng):
    ds = random_dataset(rng, n=10, A=3)
    est = bh.knn_behavior(ds, ds.n_steps)
    swapped = bh.with_estimated_propensities(ds, est)
    freq = np.bincount(ds.actions, minlength=3) / ds.n_steps
    np.testing.assert_allclose(swapped.behavior_probs, freq[ds.actions])
    np.testing.assert_array_equal(swapped.rewards, ds.rewards)
    zero = bh.known_behavior(lambda X: np.tile([1.0, 0, 0], (len(X), 1)), 3)
    if np.any(ds.actions != 0):
        with pytest.raises(DatasetError):
            bh.with_estimated_propensities(ds, zero)
