"""Bias-corrected and accelerated (BCa) bootstrap intervals.

Trajectories are the resampling unit.  For a fixed policy the
per-trajectory weights and returns do not change under resampling, so
estimator statistics are evaluated directly on index resamples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr, ndtri

from . import estimators as est
from .data import Dataset
from .errors import BootstrapUnstableError, NoOverlapError

DEFAULT_B = 2000
DEFAULT_ALPHA = 0.05


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    lower: float
    upper: float
    B: int
    alpha: float
    z0: float
    a: float
    seed: int
    dropped: int = 0

    def to_dict(self) -> dict:
        return {"point": self.point, "lb": self.lower, "ub": self.upper, "B": self.B,
                "alpha": self.alpha, "z0": self.z0, "a": self.a, "seed": self.seed,
                "dropped_resamples": self.dropped}

    @classmethod
    def from_dict(cls, d: dict) -> "BootstrapResult":
        return cls(d["point"], d["lb"], d["ub"], d["B"], d["alpha"], d["z0"], d["a"], d["seed"],
                   d.get("dropped_resamples", 0))


def resample_indices(n: int, B: int, seed: int) -> np.ndarray:
    """``(B, n)`` matrix of trajectory indices drawn with replacement."""
    return np.random.default_rng(seed).integers(0, n, size=(B, n))


def bias_correction(stats: np.ndarray, point: float) -> float:
    """``z0 = Phi^-1(fraction of stats below point)``.

    All-equal statistics give ``z0 = 0``.  Otherwise the fraction is
    clipped to ``[0.5/B, 1 - 0.5/B]`` so ``z0`` stays finite.
    """
    B = len(stats)
    if np.all(stats == stats[0]):
        return 0.0
    frac = np.count_nonzero(stats < point) / B
    frac = min(max(frac, 0.5 / B), 1.0 - 0.5 / B)
    return float(ndtri(frac))


def acceleration(jack: np.ndarray) -> float:
    """Jackknife skewness estimate of the acceleration."""
    d = jack.mean() - jack
    denom = np.sum(d ** 2)
    if denom == 0.0:
        return 0.0
    return float(np.sum(d ** 3) / (6.0 * denom ** 1.5))


def bca_bounds(stats: np.ndarray, alpha: float, z0: float, a: float) -> tuple[float, float]:
    """Lower and upper BCa bounds read off the bootstrap distribution."""
    if z0 == 0.0 and a == 0.0:
        # Percentile interval, without a round trip through Phi(Phi^-1(.)).
        q = (alpha / 2, 1 - alpha / 2)
    else:
        q = []
        for z in (ndtri(alpha / 2), ndtri(1 - alpha / 2)):
            q.append(float(ndtr(z0 + (z0 + z) / (1.0 - a * (z0 + z)))))
    lo, hi = np.quantile(stats, q)
    return float(lo), float(hi)


def bca_core(statistic: Callable[[np.ndarray], float], n: int, B: int = DEFAULT_B,
             alpha: float = DEFAULT_ALPHA, seed: int = 0, z0: Optional[float] = None,
             a: Optional[float] = None) -> BootstrapResult:
    """BCa interval for ``statistic(indices)`` over ``n`` resampling units.

    ``statistic`` may raise :class:`NoOverlapError` on a degenerate
    resample; such resamples are dropped and counted.  ``z0`` and ``a``
    override the estimated bias correction and acceleration.
    """
    if B < 100:
        raise ValueError("B must be at least 100")
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 0.5)")
    if n < 2:
        raise ValueError("need at least two resampling units")
    point = float(statistic(np.arange(n)))
    stats, dropped = [], 0
    for idx in resample_indices(n, B, seed):
        try:
            stats.append(statistic(idx))
        except NoOverlapError:
            dropped += 1
    if dropped > B / 2:
        raise BootstrapUnstableError("bootstrap unstable, insufficient overlap "
                                     f"({dropped} of {B} resamples degenerate)")
    stats = np.asarray(stats, dtype=float)
    if z0 is None:
        z0 = bias_correction(stats, point)
    if a is None:
        jack = []
        keep = np.ones(n, dtype=bool)
        for i in range(n):
            keep[i] = False
            try:
                jack.append(statistic(np.flatnonzero(keep)))
            except NoOverlapError:
                pass
            keep[i] = True
        a = acceleration(np.asarray(jack)) if len(jack) > 1 else 0.0
    lower, upper = bca_bounds(stats, alpha, z0, a)
    return BootstrapResult(point, lower, upper, B, alpha, float(z0), float(a), seed, dropped)


def estimator_statistic(dataset: Dataset, policy, estimator: str = "sntis",
                        M: float = math.inf) -> Callable[[np.ndarray], float]:
    """Index-resample statistic for the ``sntis`` or ``is`` estimator."""
    weights = est.compute_weights(policy, dataset, M)
    r = np.asarray(dataset.returns, dtype=float)
    if estimator == "sntis":
        w = weights.truncated

        def stat(idx):
            total = w[idx].sum()
            if total <= 0:
                raise NoOverlapError("zero total weight in resample")
            return float(np.dot(w[idx], r[idx]) / total)
    elif estimator == "is":
        rw = r * weights.full

        def stat(idx):
            return float(rw[idx].mean())
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    return stat


def bca_interval(dataset: Dataset, policy, estimator: str = "sntis", M: float = math.inf,
                 B: int = DEFAULT_B, alpha: float = DEFAULT_ALPHA, seed: int = 0,
                 z0: Optional[float] = None, a: Optional[float] = None) -> BootstrapResult:
    """BCa interval for an estimator of ``policy``'s value on ``dataset``.

    Raises :class:`NoOverlapError` if the estimator fails on the full
    dataset and :class:`BootstrapUnstableError` if more than half of the
    resamples are degenerate.
    """
    stat = estimator_statistic(dataset, policy, estimator, M)
    return bca_core(stat, dataset.n, B, alpha, seed, z0, a)
