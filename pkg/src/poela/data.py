"""Logged trajectories, datasets, splits and the JSON-lines file format.

A dataset file holds one JSON object per line.  The first line may be a
header (``{"format": "poela-dataset", ...}``) carrying the dataset-level
fields; every other line is one trajectory with the keys ``contexts``,
``actions``, ``rewards``, ``behavior_probs`` and an optional ``meta``.
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import DatasetError

FORMAT_TAG = "poela-dataset"
FORMAT_VERSION = 1


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One logged episode.

    ``contexts`` has shape ``(H, d)``; the other arrays have length ``H``.
    ``behavior_probs[h]`` is the logging policy's probability of
    ``actions[h]`` at ``contexts[h]``.
    """

    contexts: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior_probs: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        contexts = np.array(self.contexts, dtype=float, copy=True)
        if contexts.ndim == 1 and contexts.size == 0:
            contexts = contexts.reshape(0, 0)
        actions = np.array(self.actions, copy=True)
        fractional = actions.dtype.kind not in "iu" and actions.size
        if fractional and not np.all(np.equal(np.mod(actions, 1), 0)):
            raise DatasetError("actions must be integers", field="actions")
        object.__setattr__(self, "contexts", _frozen(contexts))
        object.__setattr__(self, "actions", _frozen(actions.astype(np.int64)))
        object.__setattr__(self, "rewards", _frozen(np.array(self.rewards, dtype=float, copy=True)))
        object.__setattr__(
            self, "behavior_probs", _frozen(np.array(self.behavior_probs, dtype=float, copy=True))
        )
        object.__setattr__(self, "meta", dict(self.meta or {}))

    @property
    def horizon(self) -> int:
        return len(self.actions)

    @property
    def ret(self) -> float:
        """Undiscounted return."""
        return float(np.sum(self.rewards))

    def validate(self, feature_dim: int, action_count: int, r_max: float, h_max: int, index=None):
        self._validate_shape(feature_dim, h_max, index)
        self._validate_values(action_count, r_max, index)

    def _validate_shape(self, feature_dim: int, h_max: int, index=None):
        H = len(self.actions)
        if self.contexts.ndim != 2:
            raise DatasetError("contexts must be a 2-d array", trajectory=index, field="contexts")
        lengths = {
            "contexts": self.contexts.shape[0],
            "actions": H,
            "rewards": len(self.rewards),
            "behavior_probs": len(self.behavior_probs),
        }
        if len(set(lengths.values())) != 1:
            detail = ", ".join(f"{k}={v}" for k, v in lengths.items())
            raise DatasetError(f"length mismatch ({detail})", trajectory=index)
        if H < 1:
            raise DatasetError("horizon must be positive", trajectory=index)
        if H > h_max:
            raise DatasetError(f"horizon {H} exceeds H_max={h_max}", trajectory=index)
        if self.contexts.shape[1] != feature_dim:
            raise DatasetError(
                f"context dimension {self.contexts.shape[1]} != {feature_dim}",
                trajectory=index,
                field="contexts",
            )

    def _validate_values(self, action_count: int, r_max: float, index=None):
        if not np.all(np.isfinite(self.contexts)):
            raise DatasetError("contexts must be finite", trajectory=index, field="contexts")
        if np.any(self.actions < 0) or np.any(self.actions >= action_count):
            raise DatasetError(
                f"actions must lie in [0, {action_count})", trajectory=index, field="actions"
            )
        if not np.all(np.isfinite(self.rewards)) or np.any(np.abs(self.rewards) > r_max):
            raise DatasetError(f"|rewards| must be <= R_max={r_max}", trajectory=index, field="rewards")
        bp = self.behavior_probs
        if not np.all(bp > 0):
            raise DatasetError("behavior_probs must be > 0", trajectory=index, field="behavior_probs")
        if not np.all(bp <= 1):
            raise DatasetError("behavior_probs must be <= 1", trajectory=index, field="behavior_probs")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable collection of trajectories sharing one feature space."""

    trajectories: tuple
    feature_dim: int
    action_count: int
    r_max: float
    h_max: int
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if self.feature_dim < 0 or self.action_count < 1 or self.h_max < 1 or not self.r_max >= 0:
            raise DatasetError("feature_dim, action_count, h_max and r_max must be positive")
        for i, traj in enumerate(self.trajectories):
            if not isinstance(traj, Trajectory):
                raise DatasetError("not a Trajectory", trajectory=i)
            traj._validate_shape(self.feature_dim, self.h_max, index=i)
        if self.trajectories and not self._values_ok():
            # Rerun per trajectory so the error names the offender.
            for i, traj in enumerate(self.trajectories):
                traj._validate_values(self.action_count, self.r_max, index=i)

    def _values_ok(self) -> bool:
        """Bulk version of the per-trajectory value checks."""
        t = self.trajectories
        X = np.concatenate([tr.contexts for tr in t])
        a = np.concatenate([tr.actions for tr in t])
        r = np.concatenate([tr.rewards for tr in t])
        p = np.concatenate([tr.behavior_probs for tr in t])
        return bool(np.isfinite(X).all() and (a >= 0).all() and (a < self.action_count).all()
                    and np.isfinite(r).all() and (np.abs(r) <= self.r_max).all()
                    and (p > 0).all() and (p <= 1).all())

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], *, action_count=None,
                          r_max=None, h_max=None, feature_dim=None, provenance=""):
        """Build a dataset, inferring any dataset-level field left as ``None``."""
        trajectories = list(trajectories)
        if feature_dim is None:
            feature_dim = trajectories[0].contexts.shape[1] if trajectories else 0
        if action_count is None:
            action_count = 1 + max((int(t.actions.max()) for t in trajectories if t.horizon), default=0)
        if r_max is None:
            r_max = max((float(np.abs(t.rewards).max()) for t in trajectories if t.horizon), default=1.0)
        if h_max is None:
            h_max = max((t.horizon for t in trajectories), default=1)
        return cls(tuple(trajectories), int(feature_dim), int(action_count), float(r_max),
                   int(h_max), provenance)

    def __len__(self):
        return len(self.trajectories)

    @property
    def n(self) -> int:
        return len(self.trajectories)

    def subset(self, indices: Iterable[int], provenance: str | None = None) -> "Dataset":
        return Dataset(
            tuple(self.trajectories[i] for i in indices),
            self.feature_dim,
            self.action_count,
            self.r_max,
            self.h_max,
            self.provenance if provenance is None else provenance,
        )

    # Flat per-step views, in trajectory-major order.

    @cached_property
    def lengths(self) -> np.ndarray:
        return _frozen(np.array([t.horizon for t in self.trajectories], dtype=np.int64))

    @cached_property
    def traj_index(self) -> np.ndarray:
        return _frozen(np.repeat(np.arange(self.n), self.lengths))

    @cached_property
    def step_index(self) -> np.ndarray:
        return _frozen(np.concatenate([np.arange(h) for h in self.lengths]) if self.n else
                       np.zeros(0, dtype=np.int64))

    @cached_property
    def contexts(self) -> np.ndarray:
        if not self.n:
            return _frozen(np.zeros((0, self.feature_dim)))
        return _frozen(np.concatenate([t.contexts for t in self.trajectories]))

    @cached_property
    def actions(self) -> np.ndarray:
        if not self.n:
            return _frozen(np.zeros(0, dtype=np.int64))
        return _frozen(np.concatenate([t.actions for t in self.trajectories]))

    @cached_property
    def rewards(self) -> np.ndarray:
        if not self.n:
            return _frozen(np.zeros(0))
        return _frozen(np.concatenate([t.rewards for t in self.trajectories]))

    @cached_property
    def behavior_probs(self) -> np.ndarray:
        if not self.n:
            return _frozen(np.zeros(0))
        return _frozen(np.concatenate([t.behavior_probs for t in self.trajectories]))

    @cached_property
    def returns(self) -> np.ndarray:
        return _frozen(np.array([t.ret for t in self.trajectories], dtype=float))

    @cached_property
    def initial_contexts(self) -> np.ndarray:
        if not self.n:
            return _frozen(np.zeros((0, self.feature_dim)))
        return _frozen(np.stack([t.contexts[0] for t in self.trajectories]))

    @property
    def n_steps(self) -> int:
        return int(self.lengths.sum())

    @cached_property
    def fingerprint(self) -> str:
        """SHA-256 of the canonical serialization."""
        return hashlib.sha256(dumps_dataset(self).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(f < 0 for f in fr):
            raise ValueError("split fractions must be nonnegative")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fr)!r}")


# --- serialization -------------------------------------------------------


def _header(ds: Dataset) -> dict:
    return {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "feature_dim": ds.feature_dim,
        "action_count": ds.action_count,
        "r_max": ds.r_max,
        "h_max": ds.h_max,
        "provenance": ds.provenance,
    }


def _record(t: Trajectory) -> dict:
    rec = {
        "contexts": t.contexts.tolist(),
        "actions": t.actions.tolist(),
        "rewards": t.rewards.tolist(),
        "behavior_probs": t.behavior_probs.tolist(),
    }
    if t.meta:
        rec["meta"] = t.meta
    return rec


def _dump_line(obj: dict) -> str:
    # json writes floats with repr(), which round-trips exactly.
    return json.dumps(obj, separators=(",", ":"), sort_keys=True, allow_nan=False)


def dumps_dataset(ds: Dataset) -> str:
    lines = [_dump_line(_header(ds))]
    lines.extend(_dump_line(_record(t)) for t in ds.trajectories)
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.write_text(dumps_dataset(ds), encoding="utf-8")
    return path


_RECORD_KEYS = {"contexts", "actions", "rewards", "behavior_probs", "meta"}


def loads_dataset(text: str, provenance: str = "") -> Dataset:
    header = None
    trajectories = []
    record_lines = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"parse error: {exc.msg}", line=lineno) from None
        if not isinstance(obj, dict):
            raise DatasetError("record must be a JSON object", line=lineno)
        if obj.get("format") == FORMAT_TAG:
            if header is not None or trajectories:
                raise DatasetError("header must be the first record", line=lineno)
            header = obj
            continue
        missing = {"contexts", "actions", "rewards", "behavior_probs"} - obj.keys()
        if missing:
            raise DatasetError(f"missing fields {sorted(missing)}", line=lineno,
                               trajectory=len(trajectories))
        unknown = obj.keys() - _RECORD_KEYS
        if unknown:
            raise DatasetError(f"unknown fields {sorted(unknown)}", line=lineno,
                               trajectory=len(trajectories))
        try:
            trajectories.append(
                Trajectory(obj["contexts"], obj["actions"], obj["rewards"], obj["behavior_probs"],
                           obj.get("meta") or {})
            )
            record_lines.append(lineno)
        except DatasetError as exc:
            raise DatasetError(str(exc), line=lineno, trajectory=len(trajectories)) from None
        except (TypeError, ValueError) as exc:
            raise DatasetError(f"malformed record: {exc}", line=lineno,
                               trajectory=len(trajectories)) from None
    try:
        if header is None:
            return Dataset.from_trajectories(trajectories, provenance=provenance)
        return Dataset(
            tuple(trajectories),
            int(header["feature_dim"]),
            int(header["action_count"]),
            float(header["r_max"]),
            int(header["h_max"]),
            header.get("provenance", provenance),
        )
    except DatasetError as exc:
        # Attach the file line of the offending record.
        if exc.trajectory is None or exc.line is not None:
            raise
        raise DatasetError(exc.reason, line=record_lines[exc.trajectory],
                           trajectory=exc.trajectory, field=exc.field) from None


def load_dataset(path) -> Dataset:
    """Read a dataset file; trajectory order is preserved."""
    path = Path(path)
    return loads_dataset(path.read_text(encoding="utf-8"), provenance=str(path))


# --- operations ----------------------------------------------------------


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_val = math.floor(n * spec.val_fraction)
    n_test = math.floor(n * spec.test_fraction)
    return n - n_val - n_test, n_val, n_test


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Partition trajectories into (train, val, test).

    Validation and test receive ``floor(n * fraction)`` trajectories; the
    remainder goes to train.  Each part keeps the original file order.
    """
    n = dataset.n
    if n == 0:
        raise DatasetError("cannot split an empty dataset")
    n_train, n_val, n_test = split_sizes(n, spec)
    perm = np.random.default_rng(spec.seed).permutation(n)
    val = np.sort(perm[:n_val])
    test = np.sort(perm[n_val:n_val + n_test])
    train = np.sort(perm[n_val + n_test:])
    tag = f"split(seed={spec.seed})"
    return (
        dataset.subset(train, f"{dataset.provenance} {tag} train".strip()),
        dataset.subset(val, f"{dataset.provenance} {tag} val".strip()),
        dataset.subset(test, f"{dataset.provenance} {tag} test".strip()),
    )


def summarize(dataset: Dataset) -> dict[str, Any]:
    """Counts, histograms and propensity range of a dataset."""
    horizons = Counter(int(h) for h in dataset.lengths)
    returns = Counter(float(r) for r in dataset.returns)
    action_counts = np.bincount(dataset.actions, minlength=dataset.action_count)
    bp = dataset.behavior_probs
    return {
        "n": dataset.n,
        "n_steps": dataset.n_steps,
        "feature_dim": dataset.feature_dim,
        "action_count": dataset.action_count,
        "horizon_histogram": dict(sorted(horizons.items())),
        "return_histogram": dict(sorted(returns.items())),
        "action_counts": action_counts.tolist(),
        "min_behavior_prob": float(bp.min()) if bp.size else None,
        "max_behavior_prob": float(bp.max()) if bp.size else None,
    }
