"""Behavior-policy estimates and the overlap / threshold masks built from them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Dataset, Trajectory
from .errors import DatasetError

LOGGED = "logged"
KNN = "knn"


@dataclass(frozen=True, eq=False)
class BehaviorEstimate:
    """``mu_hat(a|x)`` as a batch function ``X -> (len(X), |A|)`` probabilities.

    ``method`` is ``"logged"`` for a known behavior policy (for instance the
    one a synthetic environment logged with) or ``"knn"``.
    """

    method: str
    action_count: int
    fn: Callable[[np.ndarray], np.ndarray]
    k: int | None = None
    fingerprint: str = ""

    def probs(self, X) -> np.ndarray:
        return self.fn(np.atleast_2d(np.asarray(X, dtype=float)))


def known_behavior(fn: Callable[[np.ndarray], np.ndarray], action_count: int) -> BehaviorEstimate:
    return BehaviorEstimate(LOGGED, action_count, fn)


class _KNN:
    def __init__(self, contexts: np.ndarray, actions: np.ndarray, action_count: int, k: int,
                 chunk: int = 256):
        self.contexts = contexts
        self.actions = actions
        self.action_count = action_count
        self.k = k
        self.chunk = chunk

    def neighbors(self, X: np.ndarray) -> np.ndarray:
        """Indices of the ``k`` nearest pooled samples for each row of ``X``.

        Ties at the k-th distance are resolved by dataset order.
        """
        k, N = self.k, len(self.contexts)
        out = np.empty((len(X), k), dtype=np.int64)
        for lo in range(0, len(X), self.chunk):
            Xc = X[lo:lo + self.chunk]
            D2 = np.zeros((len(Xc), N))
            for j in range(X.shape[1]):
                D2 += (Xc[:, j, None] - self.contexts[None, :, j]) ** 2
            D = np.sqrt(D2)
            if k == N:
                out[lo:lo + len(Xc)] = np.arange(N)
                continue
            kth = np.partition(D, k - 1, axis=1)[:, k - 1:k]
            for r in range(len(Xc)):
                closer = np.flatnonzero(D[r] < kth[r])
                tied = np.flatnonzero(D[r] == kth[r])
                out[lo + r] = np.concatenate([closer, tied[:k - len(closer)]])
        return out

    def __call__(self, X: np.ndarray) -> np.ndarray:
        nb = self.neighbors(X)
        acts = self.actions[nb]
        counts = np.zeros((len(X), self.action_count))
        for a in range(self.action_count):
            counts[:, a] = (acts == a).sum(axis=1)
        return counts / self.k


def knn_behavior(dataset: Dataset, k: int = 100) -> BehaviorEstimate:
    """k-nearest-neighbor behavior estimate over pooled (context, action) pairs."""
    if k < 1:
        raise ValueError("k must be positive")
    if k > dataset.n_steps:
        raise ValueError(f"k={k} exceeds the {dataset.n_steps} logged samples")
    fn = _KNN(np.array(dataset.contexts), np.array(dataset.actions), dataset.action_count, k)
    return BehaviorEstimate(KNN, dataset.action_count, fn, k, dataset.fingerprint)


def threshold_mask(behavior: BehaviorEstimate, X, floor: float) -> np.ndarray:
    """Actions with ``mu_hat(a|x) > floor`` at each row of ``X``."""
    return behavior.probs(X) > floor


def overlap_mask(behavior: BehaviorEstimate, dataset: Dataset, floor: float = 0.0) -> np.ndarray:
    """Per-step mask ``mu_hat(a|x) > floor``, always including the logged action."""
    if floor < 0:
        raise ValueError("floor must be nonnegative")
    mask = threshold_mask(behavior, dataset.contexts, floor)
    mask[np.arange(dataset.n_steps), dataset.actions] = True
    return mask


class ThresholdQuery:
    """Mask source for new contexts: ``mu_hat(a|x) > floor``."""

    def __init__(self, behavior: BehaviorEstimate, floor: float):
        self.behavior = behavior
        self.floor = float(floor)

    def __call__(self, X) -> np.ndarray:
        return threshold_mask(self.behavior, X, self.floor)


def with_estimated_propensities(dataset: Dataset, behavior: BehaviorEstimate) -> Dataset:
    """Copy of ``dataset`` whose behavior_probs are ``mu_hat(a_h|x_h)``.

    By default estimators divide by the logged propensities; this switches
    the weight denominator to the estimate.  A logged action with
    ``mu_hat = 0`` is an error, since its weight would be undefined.
    """
    P = behavior.probs(dataset.contexts)[np.arange(dataset.n_steps), dataset.actions]
    if np.any(P <= 0):
        j = int(np.flatnonzero(P <= 0)[0])
        raise DatasetError("estimated propensity of a logged action is 0",
                           trajectory=int(dataset.traj_index[j]), field="behavior_probs")
    bounds = np.concatenate([[0], np.cumsum(dataset.lengths)])
    trajs = tuple(Trajectory(t.contexts, t.actions, t.rewards, P[lo:hi], t.meta)
                  for t, lo, hi in zip(dataset.trajectories, bounds[:-1], bounds[1:]))
    return Dataset(trajs, dataset.feature_dim, dataset.action_count, dataset.r_max, dataset.h_max,
                   f"{dataset.provenance} mu_hat={behavior.method}".strip())
