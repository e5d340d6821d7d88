"""Full-batch policy learners (POELA, PO-CRM, PO-mu) and checkpoint selection."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import behavior as bh
from . import estimators as est
from .data import Dataset
from .errors import NoOverlapError, TrainingError
from .neighborhood import EligibilityQuery, build_index, cached_masks, precompute_masks
from .policy import PolicyParams, SoftmaxPolicy, init_params, objective_gradient

log = logging.getLogger(__name__)

POELA = "POELA"
PO_CRM = "PO-CRM"
PO_MU = "PO-mu"
LEARNERS = (POELA, PO_CRM, PO_MU)

# Hyperparameter grids used when a config does not give its own.
DEFAULT_GRID = {
    POELA: {"delta": [0.05, 0.1, 0.5], "lam": [0.0, 0.1, 1.0, 10.0]},
    PO_CRM: {"lam": [0.0, 0.1, 1.0, 10.0]},
    PO_MU: {"b": [0.01, 0.05, 0.1, 0.2], "lam": [0.0, 0.1, 1.0, 10.0]},
}
DEFAULT_M = 1000.0
MAX_INIT_TRIES = 5


def _seed_for(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    learner: str
    lr: float
    max_steps: int = 500
    checkpoint_every: int = 10
    lam: float = 0.0
    M: float = DEFAULT_M
    delta: Optional[float] = None
    b: Optional[float] = None
    hidden: tuple = ()
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ValueError(f"unknown learner {self.learner!r}")
        if self.learner == POELA and (self.delta is None or self.delta < 0):
            raise ValueError("POELA needs delta >= 0")
        if self.learner != POELA and self.delta is not None:
            raise ValueError("delta is only used by POELA")
        if self.learner == PO_MU and (self.b is None or self.b < 0):
            raise ValueError("PO-mu needs a behavior threshold b >= 0")
        if self.learner != PO_MU and self.b is not None:
            raise ValueError("b is only used by PO-mu")
        if self.lam < 0 or not self.M > 0 or not self.lr > 0:
            raise ValueError("need lam >= 0, M > 0 and lr > 0")
        if self.max_steps < 0 or self.checkpoint_every < 1 or self.restarts < 1:
            raise ValueError("need max_steps >= 0, checkpoint_every >= 1, restarts >= 1")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        for k in ("M", "delta"):
            if d[k] is not None and math.isinf(d[k]):
                d[k] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("M", "delta"):
            if d.get(k) == "inf":
                d[k] = math.inf
        d["hidden"] = tuple(d.get("hidden", ()))
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: PolicyParams
    step: int
    train_objective: float
    val: Optional[est.Estimate]

    @property
    def val_value(self) -> float:
        return -math.inf if self.val is None else self.val.value

    @property
    def val_ess(self) -> float:
        return 0.0 if self.val is None else self.val.ess


@dataclass(eq=False)
class MaskContext:
    """How a learner restricts actions: on its training steps and on new contexts."""

    train_masks: Optional[np.ndarray] = None
    source: Optional[object] = None
    train_fingerprint: str = ""
    cache: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.train_masks is not None:
            self.cache[self.train_fingerprint] = self.train_masks

    def policy(self, params: PolicyParams) -> SoftmaxPolicy:
        # The cache is shared, so masks for evaluation datasets are computed once.
        return SoftmaxPolicy(params, self.cache, self.source)


def mask_context(config: TrainConfig, train: Dataset, behavior: Optional[bh.BehaviorEstimate] = None,
                 cache_dir=None) -> MaskContext:
    if config.learner == POELA:
        index = build_index(train)
        if cache_dir is not None:
            mask = cached_masks(cache_dir, index, train, config.delta)
        else:
            mask = precompute_masks(index, train, config.delta)
        return MaskContext(np.array(mask.allowed), EligibilityQuery(index, config.delta),
                           train.fingerprint)
    if config.learner == PO_MU:
        if behavior is None:
            raise ValueError("PO-mu needs a behavior estimate")
        return MaskContext(bh.overlap_mask(behavior, train, config.b),
                           bh.ThresholdQuery(behavior, config.b), train.fingerprint)
    if behavior is not None:
        # PO-CRM: overlap constraint only.
        return MaskContext(bh.overlap_mask(behavior, train, 0.0), bh.ThresholdQuery(behavior, 0.0),
                           train.fingerprint)
    return MaskContext(None, None, train.fingerprint)


def evaluate_sntis(policy, dataset: Dataset, M: float) -> Optional[est.Estimate]:
    """SNTIS estimate, or ``None`` when the policy has no overlap with the data."""
    try:
        return est.sntis_value(est.compute_weights(policy, dataset, M), dataset)
    except NoOverlapError:
        return None


def _initial_params(config: TrainConfig, train: Dataset, masks) -> PolicyParams:
    for attempt in range(MAX_INIT_TRIES):
        seed = config.seed if attempt == 0 else _seed_for(config.seed, attempt)
        params = init_params(train.feature_dim, train.action_count, config.hidden, seed)
        try:
            objective_gradient(params, train, masks, config.M, config.lam)
            return params
        except NoOverlapError:
            log.warning("zero total weight at initialization (attempt %d)", attempt + 1)
    raise TrainingError(f"no overlap at initialization after {MAX_INIT_TRIES} tries")


def train(config: TrainConfig, train: Dataset, val: Optional[Dataset], masks: MaskContext) -> list:
    """Gradient ascent on the masked CRM objective with constant step size.

    Checkpoints are taken every ``checkpoint_every`` steps and at
    ``max_steps``; each carries the training objective at its parameters
    and the validation SNTIS estimate of the deployed (masked) policy.
    """
    params = _initial_params(config, train, masks.train_masks)
    theta = np.array(params.theta)
    checkpoints = []
    for t in range(config.max_steps + 1):
        current = params.with_theta(theta)
        try:
            obj, grad = objective_gradient(current, train, masks.train_masks, config.M, config.lam)
        except (NoOverlapError, TrainingError, FloatingPointError) as exc:
            raise TrainingError(f"step {t}: {exc}") from exc
        if t > 0 and (t % config.checkpoint_every == 0 or t == config.max_steps):
            val_est = evaluate_sntis(masks.policy(current), val, config.M) if val is not None else None
            checkpoints.append(Checkpoint(current, t, obj, val_est))
        if t == config.max_steps:
            break
        theta = theta + config.lr * grad
    if config.max_steps == 0:
        current = params.with_theta(theta)
        obj, _ = objective_gradient(current, train, masks.train_masks, config.M, config.lam)
        val_est = evaluate_sntis(masks.policy(current), val, config.M) if val is not None else None
        checkpoints.append(Checkpoint(current, 0, obj, val_est))
    return checkpoints


def train_poela(config: TrainConfig, train_ds: Dataset, val: Optional[Dataset] = None,
                cache_dir=None) -> list:
    if config.learner != POELA:
        raise ValueError("config is not tagged POELA")
    return train(config, train_ds, val, mask_context(config, train_ds, cache_dir=cache_dir))


def train_pocrm(config: TrainConfig, train_ds: Dataset, val: Optional[Dataset] = None,
                behavior: Optional[bh.BehaviorEstimate] = None) -> list:
    if config.learner != PO_CRM:
        raise ValueError("config is not tagged PO-CRM")
    return train(config, train_ds, val, mask_context(config, train_ds, behavior))


def train_pomu(config: TrainConfig, train_ds: Dataset, val: Optional[Dataset],
               behavior: bh.BehaviorEstimate) -> list:
    if config.learner != PO_MU:
        raise ValueError("config is not tagged PO-mu")
    return train(config, train_ds, val, mask_context(config, train_ds, behavior))


def select_checkpoint(checkpoints: Sequence, ess_threshold: float):
    """Highest validation SNTIS among checkpoints with validation ESS >= threshold.

    Ties go to the earliest checkpoint in ``checkpoints`` order; returns
    ``None`` when no checkpoint passes the ESS filter.
    """
    best = None
    for ck in checkpoints:
        if ck.val is None or ck.val.ess < ess_threshold:
            continue
        if best is None or ck.val.value > best.val.value:
            best = ck
    return best


def select_from_policy_class(policies: Sequence, dataset: Dataset, M: float, lam: float = 0.0,
                             masks: Optional[np.ndarray] = None) -> int:
    """Index of the policy maximizing the CRM objective on ``dataset``.

    Policies whose probabilities violate ``masks`` (mass on a disallowed
    action at a logged step) are excluded.  Ties go to the lowest index.
    """
    best, best_obj = None, -math.inf
    for k, pol in enumerate(policies):
        P = est.policy_step_probs(pol, dataset)
        if masks is not None and np.any(P[~masks] > 0):
            continue
        try:
            e = est.sntis_value(est.compute_weights(pol, dataset, M), dataset)
        except NoOverlapError:
            continue
        obj = e.value - lam * math.sqrt(e.variance)
        if obj > best_obj:
            best, best_obj = k, obj
    if best is None:
        raise NoOverlapError("no policy in the class has overlap with the data")
    return best


def expand_grid(learner: str, grid: Optional[dict], base: dict) -> list:
    """All TrainConfigs for a learner's hyperparameter grid (restarts excluded)."""
    grid = dict(DEFAULT_GRID[learner] if grid is None else grid)
    keys = sorted(grid)
    configs = [dict(base, learner=learner)]
    for k in keys:
        configs = [dict(c, **{k: v}) for c in configs for v in grid[k]]
    return [TrainConfig.from_dict(c) for c in configs]
