"""Radius queries over logged contexts and eligible-action masks.

Contexts from every step of every trajectory are pooled into one index.
An action is eligible at ``x`` when it was logged at some context within
Euclidean distance ``delta`` of ``x`` (closed ball).

Queries are exact: a kd-tree proposes candidates inside a slightly
enlarged radius and every candidate is re-checked with :func:`distances`,
the same arithmetic the linear-scan oracle uses.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .data import Dataset
from .errors import DatasetError


def distances(points: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((points - x) ** 2, axis=1))


def _slack(delta: float) -> float:
    return delta * (1 + 1e-9) + 1e-12


@dataclass(frozen=True, eq=False)
class NeighborIndex:
    contexts: np.ndarray
    actions: np.ndarray
    traj_ids: np.ndarray
    step_ids: np.ndarray
    action_count: int
    feature_dim: int
    fingerprint: str
    pool_steps: bool = True

    def __post_init__(self):
        object.__setattr__(self, "_tree", cKDTree(self.contexts) if len(self.contexts) else None)
        by_action = {}
        for a in range(self.action_count):
            pts = np.flatnonzero(self.actions == a)
            if len(pts):
                by_action[a] = (pts, cKDTree(self.contexts[pts]))
        object.__setattr__(self, "_by_action", by_action)

    def __len__(self):
        return len(self.contexts)

    def _candidates(self, x, delta):
        if self._tree is None:
            return np.zeros(0, dtype=np.int64)
        if math.isinf(delta):
            return np.arange(len(self.contexts))
        return np.asarray(self._tree.query_ball_point(x, _slack(delta)), dtype=np.int64)


def build_index(dataset: Dataset, pool_steps: bool = True) -> NeighborIndex:
    """Index every logged (context, action, trajectory, step) tuple.

    With ``pool_steps=False`` queries may restrict matches to one step index
    (see :func:`eligible_actions`); by default all steps are pooled.
    """
    if dataset.n == 0:
        raise DatasetError("cannot index an empty dataset")
    return NeighborIndex(
        np.array(dataset.contexts, dtype=float),
        np.array(dataset.actions),
        np.array(dataset.traj_index),
        np.array(dataset.step_index),
        dataset.action_count,
        dataset.feature_dim,
        dataset.fingerprint,
        pool_steps,
    )


def _step_filter(index: NeighborIndex, hits: np.ndarray, step) -> np.ndarray:
    if step is None or index.pool_steps:
        return hits
    return hits[index.step_ids[hits] == step]


def radius_query(index: NeighborIndex, x, delta: float, step: Optional[int] = None) -> np.ndarray:
    """Sorted positions of all indexed tuples within ``delta`` of ``x``."""
    x = np.asarray(x, dtype=float)
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    cand = index._candidates(x, delta)
    if len(cand) and not math.isinf(delta):
        cand = cand[distances(index.contexts[cand], x) <= delta]
    return np.sort(_step_filter(index, cand, step))


def linear_scan(index: NeighborIndex, x, delta: float, step: Optional[int] = None) -> np.ndarray:
    """Brute-force reference for :func:`radius_query`."""
    x = np.asarray(x, dtype=float)
    hits = np.flatnonzero(distances(index.contexts, x) <= delta)
    return _step_filter(index, hits, step)


def eligible_actions(index: NeighborIndex, x, delta: float, step: Optional[int] = None) -> frozenset:
    hits = radius_query(index, x, delta, step)
    return frozenset(int(a) for a in np.unique(index.actions[hits]))


def eligible_actions_linear(index: NeighborIndex, x, delta: float) -> frozenset:
    hits = linear_scan(index, x, delta)
    return frozenset(int(a) for a in np.unique(index.actions[hits]))


def eligibility_matrix(index: NeighborIndex, X: np.ndarray, delta: float) -> np.ndarray:
    """Boolean ``(len(X), |A|)`` matrix of eligible actions at each row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.zeros((len(X), index.action_count), dtype=bool)
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    for a, (pts, tree) in index._by_action.items():
        if math.isinf(delta):
            out[:, a] = True
            continue
        r = _slack(delta)
        d_near, j = tree.query(X, k=1, distance_upper_bound=r)
        found = np.isfinite(d_near)
        if not found.any():
            continue
        rows = np.flatnonzero(found)
        exact = distances_rowwise(index.contexts[pts[j[rows]]], X[rows])
        ok = exact <= delta
        out[rows[ok], a] = True
        # Near-boundary cases where the nearest candidate fails the exact test:
        # check every candidate in the enlarged ball.
        for row in rows[~ok]:
            cand = pts[tree.query_ball_point(X[row], r)]
            out[row, a] = bool(np.any(distances(index.contexts[cand], X[row]) <= delta))
    return out


def distances_rowwise(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((A - B) ** 2, axis=1))


@dataclass(frozen=True, eq=False)
class EligibleMask:
    """Per-step eligibility of every action on one dataset, in flat step order."""

    allowed: np.ndarray
    delta: float
    fingerprint: str
    lengths: np.ndarray

    def __post_init__(self):
        self.allowed.setflags(write=False)

    def step(self, i: int, h: int) -> np.ndarray:
        offset = int(np.sum(self.lengths[:i]))
        return self.allowed[offset + h]


def precompute_masks(index: NeighborIndex, dataset: Dataset, delta: float) -> EligibleMask:
    if not index.pool_steps:
        allowed = np.zeros((dataset.n_steps, dataset.action_count), dtype=bool)
        for j, (x, h) in enumerate(zip(dataset.contexts, dataset.step_index)):
            for a in eligible_actions(index, x, delta, step=int(h)):
                allowed[j, a] = True
    else:
        allowed = eligibility_matrix(index, dataset.contexts, delta)
    return EligibleMask(allowed, float(delta), dataset.fingerprint, np.array(dataset.lengths))


class EligibilityQuery:
    """Mask source for new contexts: eligible actions w.r.t. a fixed index."""

    def __init__(self, index: NeighborIndex, delta: float):
        self.index = index
        self.delta = float(delta)

    def __call__(self, X) -> np.ndarray:
        return eligibility_matrix(self.index, X, self.delta)


# --- mask sidecar files ---------------------------------------------------


def mask_sidecar_name(fingerprint: str, delta: float) -> str:
    return f"mask-{fingerprint[:16]}-delta{delta!r}.npz"


def save_masks(path, mask: EligibleMask) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, allowed=np.packbits(mask.allowed, axis=1),
                            shape=np.array(mask.allowed.shape), lengths=mask.lengths,
                            header=np.array(json.dumps({"delta": mask.delta,
                                                        "fingerprint": mask.fingerprint})))
    return path


def load_masks(path, dataset: Optional[Dataset] = None, delta: Optional[float] = None) -> EligibleMask:
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        shape = tuple(z["shape"])
        allowed = np.unpackbits(z["allowed"], axis=1, count=shape[1]).astype(bool)
        lengths = z["lengths"]
    if dataset is not None and header["fingerprint"] != dataset.fingerprint:
        raise ValueError("mask file belongs to a different dataset")
    if delta is not None and header["delta"] != float(delta):
        raise ValueError("mask file was built with a different delta")
    return EligibleMask(allowed, header["delta"], header["fingerprint"], lengths)


def cached_masks(cache_dir, index: NeighborIndex, dataset: Dataset, delta: float) -> EligibleMask:
    """Load masks from ``cache_dir`` or compute and store them."""
    cache_dir = Path(cache_dir)
    path = cache_dir / mask_sidecar_name(dataset.fingerprint, delta)
    if path.exists():
        return load_masks(path, dataset, delta)
    mask = precompute_masks(index, dataset, delta)
    cache_dir.mkdir(parents=True, exist_ok=True)
    save_masks(path, mask)
    return mask


# --- ball-weight checks ---------------------------------------------------


def ball_weight_sums(index: NeighborIndex, step_weights: np.ndarray, delta: float) -> np.ndarray:
    """For every indexed tuple, the sum of step weights of all tuples in its delta-ball."""
    step_weights = np.asarray(step_weights, dtype=float)
    return np.array([step_weights[radius_query(index, x, delta)].sum() for x in index.contexts])


def ball_truncated_shares(index: NeighborIndex, traj_weights: np.ndarray, M: float,
                          delta: float) -> np.ndarray:
    """One-step datasets: normalized truncated weight inside each context's delta-ball."""
    w = np.minimum(np.asarray(traj_weights, dtype=float), M)
    total = w.sum()
    out = []
    for x in index.contexts:
        hits = radius_query(index, x, delta)
        out.append(w[index.traj_ids[hits]].sum() / total)
    return np.array(out)


def discrete_lipschitz(contexts: np.ndarray, probs: np.ndarray, delta: float) -> float:
    """Exact Lipschitz constant of ``probs`` over all context pairs within ``delta``.

    Pairs at distance zero must agree exactly, otherwise the constant is
    infinite.
    """
    L = 0.0
    for i in range(len(contexts)):
        d = distances(contexts, contexts[i])
        near = np.flatnonzero(d <= delta)
        if len(near) == 0:
            continue
        gap = np.abs(probs[near] - probs[i]).max(axis=1)
        zero = d[near] == 0
        if np.any(gap[zero] > 0):
            return math.inf
        if np.any(~zero):
            L = max(L, float(np.max(gap[~zero] / d[near][~zero])))
    return L


def asymptotic_coverage_check(env, delta: float, n_grid, seed: int = 0, behavior="uniform") -> dict:
    """Fraction of (context, supported action) pairs that are eligible, per sample size.

    ``env`` must be a finite-context environment exposing ``context_list()``
    and ``behavior_support(behavior)``.
    """
    from .envs import generate_logged_data

    support = env.behavior_support(behavior)
    contexts = env.context_list()
    pairs = [(k, a) for k, acts in enumerate(support) for a in sorted(acts)]
    rows = []
    for n in n_grid:
        ds = generate_logged_data(env, behavior, int(n), seed)
        idx = build_index(ds)
        elig = eligibility_matrix(idx, contexts, delta)
        covered = sum(bool(elig[k, a]) for k, a in pairs)
        unsupported_eligible = sum(
            int(elig[k, a]) for k in range(len(contexts)) for a in range(env.action_count)
            if a not in support[k])
        rows.append({"n": int(n), "coverage": covered / len(pairs),
                     "unsupported_eligible": unsupported_eligible})
    return {"delta": float(delta), "pairs": len(pairs), "rows": rows}
