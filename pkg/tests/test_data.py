import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poela.data import (Dataset, SplitSpec, Trajectory, dumps_dataset, load_dataset, loads_dataset,
                        save_dataset, split, split_sizes, summarize)
from poela.errors import DatasetError
from poela.envs import EnvSpec, generate_logged_data, make_env

from conftest import random_dataset


def _record(**over):
    rec = {"contexts": [[0.0, 1.0], [1.0, 0.5]], "actions": [0, 1], "rewards": [0.0, 1.0],
           "behavior_probs": [0.5, 0.25]}
    rec.update(over)
    return json.dumps(rec)


def test_two_records_round_trip_byte_identical(tmp_path):
    path = tmp_path / "two.ds.jsonl"
    path.write_text(_record() + "\n" + _record(rewards=[1.0, -0.5]) + "\n")
    ds = load_dataset(path)
    assert ds.n == 2
    first = save_dataset(ds, tmp_path / "a.ds.jsonl").read_bytes()
    second = save_dataset(load_dataset(tmp_path / "a.ds.jsonl"), tmp_path / "b.ds.jsonl").read_bytes()
    assert first == second
    np.testing.assert_array_equal(load_dataset(tmp_path / "a.ds.jsonl").rewards, ds.rewards)


def test_zero_behavior_prob_rejected():
    with pytest.raises(DatasetError, match="behavior_probs must be > 0"):
        loads_dataset(_record(behavior_probs=[0.5, 0.0]))


def test_length_mismatch_names_trajectory():
    text = _record() + "\n" + _record(contexts=[[0, 0], [1, 1], [2, 2]])
    with pytest.raises(DatasetError, match="trajectory 1") as err:
        loads_dataset(text)
    assert err.value.line == 2


def test_parse_error_reports_line():
    with pytest.raises(DatasetError, match="line 2"):
        loads_dataset(_record() + "\n{not json\n")


def test_action_out_of_range_and_reward_bound(rng):
    t = Trajectory([[0.0]], [3], [1.0], [0.5])
    with pytest.raises(DatasetError):
        Dataset((t,), 1, 3, 1.0, 1)
    t = Trajectory([[0.0]], [0], [2.0], [0.5])
    with pytest.raises(DatasetError):
        Dataset((t,), 1, 3, 1.0, 1)


def test_dataset_is_immutable(rng):
    ds = random_dataset(rng)
    with pytest.raises(Exception):
        ds.trajectories[0].rewards[0] = 3.0
    with pytest.raises(Exception):
        ds.feature_dim = 7


def test_split_sizes_and_determinism(rng):
    ds = random_dataset(rng, n=10)
    spec = SplitSpec(0.6, 0.2, 0.2, seed=7)
    parts = split(ds, spec)
    assert [p.n for p in parts] == [6, 2, 2]
    again = split(ds, spec)
    assert [p.fingerprint for p in parts] == [p.fingerprint for p in again]


def test_degenerate_split(rng):
    ds = random_dataset(rng, n=10)
    tr, va, te = split(ds, SplitSpec(1.0, 0.0, 0.0))
    assert (tr.n, va.n, te.n) == (10, 0, 0)
    assert tr.trajectories == ds.trajectories


def test_split_floor_rule_large_n():
    assert split_sizes(14971, SplitSpec(0.6, 0.2, 0.2)) == (8983, 2994, 2994)


def test_split_of_empty_dataset_fails():
    with pytest.raises(DatasetError):
        split(Dataset((), 1, 2, 1.0, 1), SplitSpec())


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.2, 0.2)
    with pytest.raises(ValueError):
        SplitSpec(1.2, -0.1, -0.1)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 40), seed=st.integers(0, 10_000),
       fr=st.sampled_from([(0.6, 0.2, 0.2), (0.5, 0.25, 0.25), (0.8, 0.1, 0.1), (0.0, 0.5, 0.5)]))
def test_split_is_partition(n, seed, fr):
    ds = random_dataset(np.random.default_rng(seed), n=n, h_max=2)
    parts = split(ds, SplitSpec(*fr, seed=seed))
    ids = [id(t) for p in parts for t in p.trajectories]
    assert len(ids) == len(set(ids)) == n
    assert set(ids) == {id(t) for t in ds.trajectories}


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_save_load_save_is_canonical(seed):
    ds = random_dataset(np.random.default_rng(seed), n=4)
    text = dumps_dataset(ds)
    assert dumps_dataset(loads_dataset(text)) == text


def test_summarize_empty_and_single():
    s = summarize(Dataset((), 1, 2, 1.0, 1))
    assert s["n"] == 0 and s["horizon_histogram"] == {} and s["return_histogram"] == {}
    one = Dataset((Trajectory([[0.0]], [0], [1.0], [1.0]),), 1, 2, 1.0, 1)
    assert summarize(one)["return_histogram"] == {1.0: 1}


def test_summarize_example1_actions_near_uniform():
    env = make_env(EnvSpec("example1", {"n_contexts": 10, "n_actions": 10}, 0))
    ds = generate_logged_data(env, "uniform", 5000, seed=3)
    counts = np.array(summarize(ds)["action_counts"])
    expected = ds.n_steps / 10
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    assert chi2 < 27.9  # 99.9% quantile of chi-square with 9 dof
