import time

import numpy as np
import pytest

from poela.data import Dataset, Trajectory


def random_dataset(rng, n=6, d=2, A=3, h_max=3, r_max=5.0, fixed_horizon=False, scale=1.0):
    """Small random dataset with valid propensities and variable horizons."""
    trajs = []
    for _ in range(n):
        H = h_max if fixed_horizon else int(rng.integers(1, h_max + 1))
        trajs.append(Trajectory(
            scale * rng.normal(size=(H, d)),
            rng.integers(0, A, size=H),
            rng.uniform(-r_max, r_max, size=H) / H,
            rng.uniform(0.1, 1.0, size=H),
        ))
    return Dataset(tuple(trajs), d, A, r_max, h_max, "random")


def bandit_dataset(contexts, actions, rewards, probs, A):
    contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
    trajs = [Trajectory(contexts[[i]], [actions[i]], [rewards[i]], [probs[i]]) for i in range(len(actions))]
    r_max = max(1.0, float(np.max(np.abs(rewards))))
    return Dataset(tuple(trajs), contexts.shape[1], A, r_max, 1, "bandit")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


EXAMPLE2_SEEDS = range(5)
TIMINGS = {}


def example2_config(out, master_seed):
    """Example-2 experiment: H=10, |A|=2, uniform logging, n=1000 per split, default grids."""
    from poela.harness import ExperimentConfig

    return ExperimentConfig.from_dict({
        "data": {"env": {"tag": "example2", "params": {"horizon": 10, "n_actions": 2}, "seed": 0},
                 "behavior": "uniform", "n_train": 1000, "n_val": 1000, "n_test": 1000},
        "learners": [
            {"learner": "POELA", "grid": {"delta": [0.05, 0.1, 0.5], "lam": [0.0, 0.1, 1.0]},
             "max_steps": 500, "checkpoint_every": 10, "lr": 1.0},
            {"learner": "PO-CRM", "grid": {"lam": [0.0, 0.1, 1.0]},
             "max_steps": 500, "checkpoint_every": 10, "lr": 1.0},
        ],
        "output_dir": str(out),
        "master_seed": master_seed,
        "ess_threshold": 200.0,
        "test_mode": "mc",
        "mc_rollouts": 2000,
        "low_reward_threshold": -1.0,
    })


@pytest.fixture(scope="session")
def example2_runs(tmp_path_factory):
    """Run directories and reports of the Example-2 experiment, one per master seed."""
    from poela.harness import run_experiment

    root = tmp_path_factory.mktemp("example2")
    start = time.perf_counter()
    runs = []
    for seed in EXAMPLE2_SEEDS:
        out = root / f"seed{seed}"
        runs.append((out, run_experiment(example2_config(out, seed))))
    TIMINGS["example2"] = time.perf_counter() - start
    return runs


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
