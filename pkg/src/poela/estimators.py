"""Importance-sampling estimators and propensity-overfitting diagnostics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .data import Dataset
from .errors import NoOverlapError, UnsupportedInputError
from .policy import trajectory_products

IS = "IS"
SNIS = "SNIS"
SNTIS = "SNTIS"


@dataclass(frozen=True, eq=False)
class WeightTable:
    """Per-step, cumulative, full-trajectory and truncated importance weights."""

    step_weights: np.ndarray
    cumulative: np.ndarray
    full: np.ndarray
    truncated: np.ndarray
    M: float
    lengths: np.ndarray

    @property
    def n(self) -> int:
        return len(self.full)


@dataclass(frozen=True)
class Estimate:
    value: float
    variance: float
    ess: float
    n: int
    M: float
    tag: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["M"] = None if math.isinf(self.M) else self.M
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Estimate":
        M = math.inf if d.get("M") is None else float(d["M"])
        return cls(float(d["value"]), float(d["variance"]), float(d["ess"]), int(d["n"]), M,
                   d["tag"])


def policy_step_probs(policy, dataset: Dataset) -> np.ndarray:
    """``(n_steps, |A|)`` action probabilities of ``policy`` at every logged step.

    ``policy`` may expose ``step_probs(dataset)``, ``probs(X)``, or be a
    plain callable on a context batch.
    """
    if hasattr(policy, "step_probs"):
        P = policy.step_probs(dataset)
    elif hasattr(policy, "probs"):
        P = policy.probs(dataset.contexts)
    else:
        P = policy(dataset.contexts)
    return np.asarray(P, dtype=float).reshape(dataset.n_steps, -1)


def weights_from_step_probs(target_probs: np.ndarray, dataset: Dataset, M: float = math.inf) -> WeightTable:
    """Weight table from the target probability of each logged action."""
    p = np.asarray(target_probs, dtype=float)
    if p.shape != (dataset.n_steps,):
        raise ValueError("need one target probability per logged step")
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise ValueError("policy probabilities must lie in [0, 1]")
    if not M > 0:
        raise ValueError("truncation level M must be positive")
    step_w = p / dataset.behavior_probs
    if not np.all(np.isfinite(step_w)):
        raise ValueError("non-finite importance weight")
    # Running products, one step index at a time (same multiplication order as cumprod).
    cumulative = step_w.copy()
    steps = dataset.step_index
    for h in range(1, int(steps.max(initial=0)) + 1):
        pos = np.flatnonzero(steps == h)
        cumulative[pos] = cumulative[pos - 1] * step_w[pos]
    full = trajectory_products(step_w, dataset.lengths)
    truncated = np.minimum(full, M)
    for arr in (step_w, cumulative, full, truncated):
        arr.setflags(write=False)
    return WeightTable(step_w, cumulative, full, truncated, float(M), dataset.lengths)


def compute_weights(policy, dataset: Dataset, M: float = math.inf) -> WeightTable:
    """Importance weights ``pi(a|x) / mu(a|x)`` of ``policy`` on ``dataset``."""
    P = policy_step_probs(policy, dataset)
    if np.any(P < -1e-15) or np.any(P > 1 + 1e-12) or not np.all(np.isfinite(P)):
        raise ValueError("policy probabilities must lie in [0, 1]")
    p = np.clip(P[np.arange(dataset.n_steps), dataset.actions], 0.0, 1.0)
    return weights_from_step_probs(p, dataset, M)


def _check(weights: WeightTable, dataset: Dataset):
    if weights.n != dataset.n:
        raise ValueError(f"weight table has {weights.n} trajectories, dataset has {dataset.n}")


def ess(weights) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2`` of the truncated weights."""
    w = weights.truncated if isinstance(weights, WeightTable) else np.asarray(weights, dtype=float)
    if len(w) == 0:
        raise ValueError("need at least one trajectory")
    s2 = float(np.sum(w * w))
    if s2 == 0.0:
        return 0.0
    return min(float(np.sum(w)) ** 2 / s2, float(len(w)))


def is_value(weights: WeightTable, dataset: Dataset) -> Estimate:
    """Plain importance sampling: mean of return times trajectory weight."""
    _check(weights, dataset)
    n = dataset.n
    x = dataset.returns * weights.full
    value = float(np.mean(x))
    variance = float(np.var(x, ddof=1) / n) if n > 1 else 0.0
    return Estimate(value, variance, ess(weights.full), n, math.inf, IS)


def sntis_variance(weights: WeightTable, dataset: Dataset, value: float) -> float:
    w = weights.truncated
    S = float(w.sum())
    if not S > 0:
        raise NoOverlapError("no overlap: all truncated weights are zero")
    return float(np.sum((dataset.returns - value) ** 2 * w ** 2) / S ** 2)


def sntis_value(weights: WeightTable, dataset: Dataset) -> Estimate:
    """Self-normalized truncated IS value with its variance estimate and ESS."""
    _check(weights, dataset)
    w = weights.truncated
    S = float(w.sum())
    if not S > 0:
        raise NoOverlapError("no overlap: all truncated weights are zero")
    value = float(w @ dataset.returns / S)
    tag = SNIS if math.isinf(weights.M) else SNTIS
    return Estimate(value, sntis_variance(weights, dataset, value), ess(weights), dataset.n,
                    weights.M, tag)


def low_reward_weight_mass(weights: WeightTable, dataset: Dataset, reward_threshold: float) -> float:
    """Share of normalized truncated weight on trajectories with return <= threshold."""
    _check(weights, dataset)
    w = weights.truncated
    S = float(w.sum())
    if not S > 0:
        raise NoOverlapError("no overlap: all truncated weights are zero")
    return float(w[dataset.returns <= reward_threshold].sum() / S)


@dataclass(frozen=True)
class Decomposition:
    """Empirical value, context-shift term and in-context IS error.

    The three totals sum to the self-normalized estimate.  ``per_context``
    maps each distinct initial context (as a tuple) to
    ``(p_hat, weight_share, oracle_value)``.
    """

    empirical_v: float
    context_shift: float
    per_context_error: float
    snis_value: float
    per_context: dict


def decompose(policy, dataset: Dataset, oracle_v: Optional[Callable] = None,
              M: float = math.inf) -> Decomposition:
    """Split the self-normalized estimate by initial context.

    ``oracle_v(x)`` must return the true value of ``policy`` from initial
    context ``x``; it exists only for synthetic environments.
    """
    if oracle_v is None:
        raise UnsupportedInputError(
            "decomposition needs per-context oracle values; only low_reward_weight_mass "
            "is available on logged data")
    weights = compute_weights(policy, dataset, M)
    w = weights.truncated
    W = float(w.sum())
    if not W > 0:
        raise NoOverlapError("no overlap: all truncated weights are zero")
    r = dataset.returns
    n = dataset.n
    groups: dict = {}
    for i, x in enumerate(dataset.initial_contexts):
        groups.setdefault(tuple(x.tolist()), []).append(i)
    empirical = shift = error = 0.0
    per_context = {}
    for key, idx in groups.items():
        idx = np.array(idx)
        p_hat = len(idx) / n
        w_x = float(w[idx].sum()) / W
        v_x = float(oracle_v(np.array(key)))
        empirical += p_hat * v_x
        shift += (w_x - p_hat) * v_x
        error += float(w[idx] @ r[idx]) / W - w_x * v_x
        per_context[key] = (p_hat, w_x, v_x)
    return Decomposition(empirical, shift, error, float(w @ r / W), per_context)
