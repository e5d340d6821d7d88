"""Softmax policies, eligibility masking and the CRM objective gradient.

A policy is a feed-forward network mapping a context to action logits
followed by a softmax.  With no hidden layers it is linear-softmax
(``logits = W x + b``); hidden layers use ``tanh``.  All parameters live
in one flat vector, layer by layer, each layer stored as its weight
matrix (row-major, ``out x in``) followed by its bias.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import NoOverlapError, PoelaError, TrainingError

LINEAR = "linear-softmax"
MLP = "mlp-softmax"
ARCHITECTURES = (LINEAR, MLP)
CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class PolicyParams:
    arch: str
    feature_dim: int
    action_count: int
    theta: np.ndarray
    hidden: tuple = ()
    init_seed: Optional[int] = None

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        hidden = tuple(int(h) for h in self.hidden)
        if self.arch == LINEAR and hidden:
            raise ValueError("linear-softmax has no hidden layers")
        if self.arch == MLP and not hidden:
            raise ValueError("mlp-softmax needs at least one hidden layer")
        object.__setattr__(self, "hidden", hidden)
        theta = np.array(self.theta, dtype=float, copy=True).ravel()
        expected = n_params(self.feature_dim, self.action_count, hidden)
        if theta.size != expected:
            raise ValueError(f"expected {expected} parameters, got {theta.size}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.feature_dim, *self.hidden, self.action_count]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weight, bias) views for each layer."""
        out, pos = [], 0
        sizes = self.layer_sizes
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            W = self.theta[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in)
            pos += fan_in * fan_out
            b = self.theta[pos:pos + fan_out]
            pos += fan_out
            out.append((W, b))
        return out

    def with_theta(self, theta) -> "PolicyParams":
        return PolicyParams(self.arch, self.feature_dim, self.action_count, theta, self.hidden,
                            self.init_seed)


def n_params(feature_dim: int, action_count: int, hidden=()) -> int:
    sizes = [feature_dim, *hidden, action_count]
    return sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))


def init_params(feature_dim: int, action_count: int, hidden=(), seed: int = 0,
                scale: float = 0.01) -> PolicyParams:
    """Small uniform random initialization.

    Output-layer weights and biases are drawn from ``U(-scale, scale)`` so
    the initial policy is close to uniform.  Hidden layers use the usual
    ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.
    """
    rng = np.random.default_rng(seed)
    hidden = tuple(hidden)
    sizes = [feature_dim, *hidden, action_count]
    chunks = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = k == len(sizes) - 2
        s = scale if last else 1.0 / math.sqrt(max(fan_in, 1))
        chunks.append(rng.uniform(-s, s, size=fan_in * fan_out + fan_out))
    arch = MLP if hidden else LINEAR
    return PolicyParams(arch, feature_dim, action_count, np.concatenate(chunks), hidden, seed)


# --- forward / backward --------------------------------------------------


def _forward(params: PolicyParams, X: np.ndarray):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != params.feature_dim:
        raise ValueError(f"context dimension {X.shape[1]} != {params.feature_dim}")
    if not np.all(np.isfinite(X)):
        raise FloatingPointError("non-finite contexts")
    acts = [X]
    h = X
    layers = params.layers()
    # Overflow surfaces as the FloatingPointError below.
    with np.errstate(over="ignore", invalid="ignore"):
        for W, b in layers[:-1]:
            h = np.tanh(h @ W.T + b)
            acts.append(h)
        W, b = layers[-1]
        z = h @ W.T + b
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits")
    return z, acts


def _backward(params: PolicyParams, acts, dZ: np.ndarray) -> np.ndarray:
    layers = params.layers()
    grads = []
    delta = dZ
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        h_in = acts[k]
        grads.append((delta.T @ h_in).ravel())
        grads.append(delta.sum(axis=0))
        if k > 0:
            delta = (delta @ W) * (1.0 - h_in ** 2)
    # grads were appended as [dW_L, db_L, dW_{L-1}, ...]; restore layer order.
    pairs = [(grads[i], grads[i + 1]) for i in range(0, len(grads), 2)][::-1]
    return np.concatenate([np.concatenate(p) for p in pairs])


def logits(params: PolicyParams, X) -> np.ndarray:
    return _forward(params, X)[0]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _masked_softmax(z: np.ndarray, masks: Optional[np.ndarray]) -> np.ndarray:
    """Softmax restricted to each row's mask.

    Identical to renormalizing the full softmax over the mask, but computed
    in logit space so the allowed mass never underflows.  Rows with an
    empty mask fall back to the unmasked softmax.
    """
    if masks is None:
        return _softmax(z)
    masks = np.asarray(masks, dtype=bool)
    empty = ~masks.any(axis=1)
    if empty.any():
        masks = masks.copy()
        masks[empty] = True
    zm = np.where(masks, z, -np.inf)
    return _softmax(zm)


def action_probs(params: PolicyParams, x) -> np.ndarray:
    """Action distribution at one context (1-d input) or a batch (2-d input)."""
    x = np.asarray(x, dtype=float)
    p = _softmax(logits(params, x))
    return p[0] if x.ndim == 1 else p


_degenerate_renormalizations = 0


def degenerate_renormalization_count() -> int:
    return _degenerate_renormalizations


def mask_renormalize(probs, mask) -> np.ndarray:
    """Zero out disallowed actions and rescale the rest to sum to one.

    If the allowed actions carry exactly zero mass the result is uniform
    over the mask (counted, and reported with a warning).
    """
    global _degenerate_renormalizations
    probs = np.asarray(probs, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if probs.shape != mask.shape:
        raise ValueError("probs and mask must have the same shape")
    if not mask.any():
        raise ValueError("mask must allow at least one action")
    if mask.all():
        return probs.copy()
    kept = np.where(mask, probs, 0.0)
    total = kept.sum()
    if total == 0.0:
        _degenerate_renormalizations += 1
        warnings.warn("allowed actions have zero probability; using uniform over the mask")
        return mask / mask.sum()
    return kept / total


# --- policy objects -------------------------------------------------------


MaskSource = Callable[[np.ndarray], np.ndarray]


@dataclass(eq=False)
class SoftmaxPolicy:
    """Evaluable wrapper around :class:`PolicyParams`.

    ``step_masks`` maps a dataset fingerprint to a precomputed
    ``(n_steps, |A|)`` mask for that dataset; ``mask_source`` produces
    masks for arbitrary contexts.  A context whose mask is empty is
    served by the unmasked softmax.
    """

    params: PolicyParams
    step_masks: dict = field(default_factory=dict)
    mask_source: Optional[MaskSource] = None

    @property
    def action_count(self) -> int:
        return self.params.action_count

    def probs(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        z = logits(self.params, X)
        masks = self.mask_source(X) if self.mask_source is not None else None
        return _masked_softmax(z, masks)

    def masks_for(self, dataset) -> Optional[np.ndarray]:
        if dataset.fingerprint in self.step_masks:
            return self.step_masks[dataset.fingerprint]
        if self.mask_source is not None:
            # Masks depend only on contexts, so they are cached per dataset.
            masks = self.mask_source(dataset.contexts)
            self.step_masks[dataset.fingerprint] = masks
            return masks
        return None

    def step_probs(self, dataset) -> np.ndarray:
        z = logits(self.params, dataset.contexts)
        return _masked_softmax(z, self.masks_for(dataset))


# --- objective ------------------------------------------------------------


def trajectory_products(step_values: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Product of per-step values within each trajectory."""
    if len(lengths) == 0:
        return np.zeros(0)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    return np.multiply.reduceat(step_values, offsets)


def crm_weight_gradient(w: np.ndarray, r: np.ndarray, lam: float):
    """CRM objective and its gradient with respect to the truncated weights.

    Returns ``(objective, value, variance, dJ/dw)`` where the objective is
    ``value - lam * sqrt(variance)``.  At zero variance the square root's
    subgradient is taken as 0.
    """
    S = w.sum()
    if not S > 0:
        raise NoOverlapError("all truncated weights are zero")
    v = float(w @ r / S)
    res = r - v
    A = float(np.sum(res ** 2 * w ** 2))
    var = A / S ** 2
    dv = res / S
    dA = 2.0 * res ** 2 * w + (-2.0 * np.sum(res * w ** 2)) * dv
    dV = dA / S ** 2 - 2.0 * A / S ** 3
    if lam and var > 0:
        sd = math.sqrt(var)
        dJ = dv - lam * dV / (2.0 * sd)
        obj = v - lam * sd
    else:
        dJ = dv
        obj = v - lam * math.sqrt(var)
    return obj, v, var, dJ


def objective_gradient(params: PolicyParams, dataset, masks=None, M: float = math.inf,
                       lam: float = 0.0):
    """SNTIS minus ``lam`` times its estimated standard deviation, and its gradient.

    ``masks`` is an optional ``(n_steps, |A|)`` boolean array restricting
    each logged step's action distribution (renormalized over the allowed
    actions).  Truncated weights contribute no gradient once they reach
    ``M``.
    """
    z, acts = _forward(params, dataset.contexts)
    P = _masked_softmax(z, masks)
    idx = np.arange(len(dataset.actions))
    a = dataset.actions
    step_w = P[idx, a] / dataset.behavior_probs
    W = trajectory_products(step_w, dataset.lengths)
    w = np.minimum(W, M)
    r = dataset.returns
    obj, _, _, dJ = crm_weight_gradient(w, r, lam)
    s = dJ * np.where(W < M, W, 0.0)
    # d log p(a|x) / d z = e_a - p over the allowed actions.
    dZ = -P * s[dataset.traj_index][:, None]
    dZ[idx, a] += s[dataset.traj_index]
    grad = _backward(params, acts, dZ)
    if not (math.isfinite(obj) and np.all(np.isfinite(grad))):
        raise TrainingError("non-finite objective or gradient")
    return obj, grad


# --- Lipschitz bound ------------------------------------------------------


def _max_row_gap(W: np.ndarray) -> float:
    diffs = W[:, None, :] - W[None, :, :]
    return float(np.sqrt((diffs ** 2).sum(axis=2)).max()) if len(W) else 0.0


def lipschitz_bound(params: PolicyParams) -> Optional[float]:
    """Certified bound on ``max_a |pi(a|x) - pi(a|x')| / ||x - x'||``.

    For softmax outputs, ``grad_x pi(a|x) = pi_a * sum_b pi_b (w_a - w_b)``
    in the last layer's input space, whose norm is at most
    ``max_{a,b} ||w_a - w_b|| / 4``; we return half the maximal row gap,
    multiplied by the spectral norms of the hidden layers (``tanh`` is
    1-Lipschitz).  Returns ``None`` for unsupported architectures.
    """
    if params.arch not in ARCHITECTURES:
        return None
    layers = params.layers()
    bound = 0.5 * _max_row_gap(layers[-1][0])
    for W, _ in layers[:-1]:
        bound *= float(np.linalg.norm(W, 2))
    return bound


# --- checkpoints ----------------------------------------------------------


def policy_to_dict(params: PolicyParams, metadata: Optional[dict] = None) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "arch": params.arch,
        "feature_dim": params.feature_dim,
        "action_count": params.action_count,
        "hidden": list(params.hidden),
        "init_seed": params.init_seed,
        "theta": params.theta.tolist(),
        "metadata": metadata or {},
    }


def policy_from_dict(obj: dict) -> tuple[PolicyParams, dict]:
    if obj.get("version") != CHECKPOINT_VERSION:
        raise PoelaError(f"unsupported checkpoint version {obj.get('version')!r}")
    params = PolicyParams(obj["arch"], int(obj["feature_dim"]), int(obj["action_count"]),
                          np.array(obj["theta"], dtype=float), tuple(obj.get("hidden", ())),
                          obj.get("init_seed"))
    return params, obj.get("metadata", {})


def save_policy(path, params: PolicyParams, metadata: Optional[dict] = None) -> Path:
    path = Path(path)
    path.write_text(json.dumps(policy_to_dict(params, metadata), sort_keys=True, indent=1) + "\n",
                    encoding="utf-8")
    return path


def load_policy(path) -> tuple[PolicyParams, dict]:
    return policy_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
