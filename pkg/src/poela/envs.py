"""Synthetic decision processes, logged-data generation and on-policy evaluation.

Context encodings (fixed):

* ``example1`` / ``bandit``: one-hot of the context id, ``d = |X|``.
* ``example2``: one-hot of the step index (``H`` slots) followed by one
  ``|A|``-wide one-hot block per chain action already taken (``H - 2``
  blocks), so every tree node has a distinct vector.
* ``example3``: the ``example2`` encoding plus a trailing flag marking the
  node shared by the first and third root actions.
* ``synthetic``: continuous position in ``R^d`` followed by ``h / H``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import Dataset, Trajectory
from .errors import UnsupportedInputError

EXAMPLE1 = "example1"
EXAMPLE2 = "example2"
EXAMPLE3 = "example3"
BANDIT = "bandit"
SYNTHETIC = "synthetic"
TAGS = (EXAMPLE1, EXAMPLE2, EXAMPLE3, BANDIT, SYNTHETIC)

UNIFORM = "uniform"
MIXTURE = "mixture"
MIXTURE_SCHEDULE_PROB = 0.7


@dataclass(frozen=True)
class EnvSpec:
    tag: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"tag": self.tag, "params": dict(self.params), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        return cls(d["tag"], dict(d.get("params", {})), int(d.get("seed", 0)))


def sample_categorical(P: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(len(P))
    a = (np.cumsum(P, axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(a, P.shape[1] - 1)


class Env:
    """Batch-simulated finite-horizon environment.

    Subclasses implement ``reset``, ``observe`` and ``transition`` on arrays
    of live episode ids; all live episodes share the current step index.
    """

    tag: str
    action_count: int
    feature_dim: int
    horizon: int
    r_max: float

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.schedule = self.rng.integers(0, self.action_count, size=self.horizon)

    # simulation hooks
    def reset(self, n: int, rng):
        raise NotImplementedError

    def observe(self, state, ids: np.ndarray, h: int) -> np.ndarray:
        raise NotImplementedError

    def transition(self, state, ids, actions, h: int, rng):
        raise NotImplementedError

    def step_of(self, X: np.ndarray) -> np.ndarray:
        """Step index encoded in each context."""
        return np.zeros(len(X), dtype=np.int64)

    # behavior policies
    def behavior_fn(self, behavior) -> Callable[[np.ndarray], np.ndarray]:
        """Batch function ``X -> (len(X), |A|)`` for a behavior tag or object."""
        A = self.action_count
        if callable(behavior) and not isinstance(behavior, str):
            return behavior
        if hasattr(behavior, "probs"):
            return behavior.probs
        if behavior == UNIFORM:
            return lambda X: np.full((len(X), A), 1.0 / A)
        if behavior == MIXTURE:
            def mix(X):
                P = np.full((len(X), A), (1 - MIXTURE_SCHEDULE_PROB) / A)
                h = np.minimum(self.step_of(X), self.horizon - 1)
                P[np.arange(len(X)), self.schedule[h]] += MIXTURE_SCHEDULE_PROB
                return P
            return mix
        raise ValueError(f"unknown behavior {behavior!r}")

    def policy_fn(self, policy) -> Callable[[np.ndarray], np.ndarray]:
        if hasattr(policy, "probs"):
            return policy.probs
        return policy

    def context_list(self) -> np.ndarray:
        raise UnsupportedInputError(f"{self.tag} has no finite context list")

    def initial_context_list(self) -> np.ndarray:
        raise UnsupportedInputError(f"{self.tag} has no finite set of initial contexts")

    def oracle_value(self, policy, x) -> float:
        raise UnsupportedInputError(f"{self.tag} is not enumerable")


def _simulate(env: Env, n: int, probs_fn, rng, record: bool):
    state = env.reset(n, rng)
    alive = np.arange(n)
    returns = np.zeros(n)
    steps = []
    h = 0
    while alive.size:
        X = env.observe(state, alive, h)
        P = np.asarray(probs_fn(X), dtype=float)
        a = sample_categorical(P, rng)
        r, done = env.transition(state, alive, a, h, rng)
        returns[alive] += r
        if record:
            steps.append((alive, X, a, r, P[np.arange(len(a)), a]))
        alive = alive[~done]
        h += 1
        if h > env.horizon:
            raise RuntimeError("episode exceeded the horizon")
    return returns, steps


def generate_logged_data(env: Env, behavior="uniform", n: int = 1000, seed: int = 0) -> Dataset:
    """Roll out ``behavior`` for ``n`` episodes, recording exact propensities."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    _, steps = _simulate(env, n, env.behavior_fn(behavior), rng, record=True)
    ep = np.concatenate([s[0] for s in steps])
    order = np.argsort(ep, kind="stable")
    X = np.concatenate([s[1] for s in steps])[order]
    A = np.concatenate([s[2] for s in steps])[order]
    R = np.concatenate([s[3] for s in steps])[order]
    B = np.concatenate([s[4] for s in steps])[order]
    lengths = np.bincount(ep, minlength=n)
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    trajs = [Trajectory(X[lo:hi], A[lo:hi], R[lo:hi], B[lo:hi])
             for lo, hi in zip(bounds[:-1], bounds[1:])]
    name = behavior if isinstance(behavior, str) else "custom"
    prov = f"{env.tag} {env.spec.params} env_seed={env.spec.seed} behavior={name} n={n} seed={seed}"
    return Dataset(tuple(trajs), env.feature_dim, env.action_count, env.r_max, env.horizon, prov)


def mc_value(env: Env, policy, n_rollouts: int = 1000, seed: int = 0) -> tuple[float, float]:
    """On-policy Monte Carlo mean return and its standard error."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    rng = np.random.default_rng(seed)
    returns, _ = _simulate(env, n_rollouts, env.policy_fn(policy), rng, record=False)
    se = float(returns.std(ddof=1) / math.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return float(returns.mean()), se


def oracle_context_value(env: Env, policy) -> dict:
    """Exact value of ``policy`` from every initial context, keyed by context tuple."""
    return {tuple(x.tolist()): env.oracle_value(policy, x) for x in env.initial_context_list()}


# --- tabular bandits ------------------------------------------------------


class _TabularBandit(Env):
    horizon = 1

    def __init__(self, spec: EnvSpec, n_contexts: int, n_actions: int):
        self.n_contexts = n_contexts
        self.action_count = n_actions
        self.feature_dim = n_contexts
        super().__init__(spec)

    def reset(self, n, rng):
        return {"ctx": rng.integers(0, self.n_contexts, size=n)}

    def observe(self, state, ids, h):
        return np.eye(self.n_contexts)[state["ctx"][ids]]

    def context_list(self) -> np.ndarray:
        return np.eye(self.n_contexts)

    def initial_context_list(self) -> np.ndarray:
        return np.eye(self.n_contexts)

    def context_id(self, X) -> np.ndarray:
        return np.argmax(np.atleast_2d(X), axis=1)

    def mean_rewards(self) -> np.ndarray:
        raise NotImplementedError

    def oracle_value(self, policy, x) -> float:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p = self.policy_fn(policy)(x)[0]
        return float(p @ self.mean_rewards()[self.context_id(x)[0]])

    def true_value(self, policy) -> float:
        """Expected return under the uniform context distribution."""
        P = self.policy_fn(policy)(self.context_list())
        return float(np.mean(np.sum(P * self.mean_rewards(), axis=1)))

    def behavior_support(self, behavior) -> list:
        P = self.behavior_fn(behavior)(self.context_list())
        return [frozenset(np.flatnonzero(row > 0).tolist()) for row in P]


class Example1(_TabularBandit):
    """Half the contexts pay 1 for one action; the rest pay -1 or -5."""

    tag = EXAMPLE1

    def __init__(self, spec: EnvSpec):
        nx = int(spec.params.get("n_contexts", 10))
        na = int(spec.params.get("n_actions", 10))
        if nx < 2 or nx % 2 or na < 2 or na % 2:
            raise ValueError("example1 needs an even number (>= 2) of contexts and of actions")
        super().__init__(spec, nx, na)
        self.r_max = 5.0
        R = np.zeros((nx, na))
        self.positive_contexts = np.arange(nx // 2)
        self.rewarded_action = self.rng.integers(0, na, size=nx // 2)
        R[self.positive_contexts, self.rewarded_action] = 1.0
        for x in range(nx // 2, nx):
            perm = self.rng.permutation(na)
            R[x, perm[: na // 2]] = -1.0
            R[x, perm[na // 2:]] = -5.0
        self.R = R

    def mean_rewards(self):
        return self.R

    def transition(self, state, ids, actions, h, rng):
        return self.R[state["ctx"][ids], actions], np.ones(len(ids), dtype=bool)

    def optimal_value(self) -> float:
        return float(np.mean(self.R.max(axis=1)))


class Bandit(_TabularBandit):
    """Tabular contextual bandit with bounded uniform reward noise.

    ``params``: ``n_contexts``, ``n_actions``, optional ``means``
    (``|X| x |A|``, default seeded ``U(-1, 1)``), ``noise`` half-width and
    ``behavior`` table used when logging with ``behavior="env"``.
    """

    tag = BANDIT

    def __init__(self, spec: EnvSpec):
        p = spec.params
        super().__init__(spec, int(p.get("n_contexts", 4)), int(p.get("n_actions", 3)))
        shape = (self.n_contexts, self.action_count)
        means = p.get("means")
        self.means = (np.array(means, dtype=float).reshape(shape) if means is not None
                      else self.rng.uniform(-1, 1, size=shape))
        self.noise = float(p.get("noise", 0.0))
        table = p.get("behavior")
        self.behavior_table = None if table is None else np.array(table, dtype=float).reshape(shape)
        self.r_max = float(np.abs(self.means).max() + self.noise) or 1.0

    def mean_rewards(self):
        return self.means

    def behavior_fn(self, behavior):
        if behavior == "env":
            if self.behavior_table is None:
                raise ValueError("bandit has no behavior table")
            return lambda X: self.behavior_table[self.context_id(X)]
        return super().behavior_fn(behavior)

    def transition(self, state, ids, actions, h, rng):
        r = self.means[state["ctx"][ids], actions]
        if self.noise:
            r = r + rng.uniform(-self.noise, self.noise, size=len(ids))
        return r, np.ones(len(ids), dtype=bool)


# --- tree examples --------------------------------------------------------

ROOT, CHAIN, POST, OVER = 0, 1, 2, 3


class Example2(Env):
    """Root choice between a safe coin flip and a risky treatment chain.

    Root action 0 ends immediately with reward +1 or -1 (even odds).  Any
    other root action pays +1 immediately; with probability 1/2 the
    episode then ends, otherwise it enters a chain of ``H - 1`` further
    ``|A|``-ary choices with reward 0 that ends with reward -5.
    """

    tag = EXAMPLE2
    r_max = 5.0

    def __init__(self, spec: EnvSpec):
        H = int(spec.params.get("horizon", 10))
        A = int(spec.params.get("n_actions", 2))
        if H < 2 or A < 2:
            raise ValueError("example2 needs horizon >= 2 and n_actions >= 2")
        self.horizon = H
        self.action_count = A
        self.n_blocks = H - 2
        self.feature_dim = H + self.n_blocks * A + self._extra_features()
        super().__init__(spec)

    def _extra_features(self) -> int:
        return 0

    def encode(self, h: int, branch: np.ndarray, hist: np.ndarray) -> np.ndarray:
        n = len(branch)
        X = np.zeros((n, self.feature_dim))
        X[:, h] = 1.0
        A = self.action_count
        chain = branch == CHAIN
        for j in range(max(h - 1, 0)):
            cols = self.horizon + j * A + hist[chain, j]
            X[np.flatnonzero(chain), cols] = 1.0
        return X

    def reset(self, n, rng):
        return {"branch": np.full(n, ROOT), "root": np.full(n, -1),
                "hist": np.full((n, max(self.horizon - 1, 1)), -1, dtype=np.int64)}

    def observe(self, state, ids, h):
        return self.encode(h, state["branch"][ids], state["hist"][ids])

    def step_of(self, X):
        return np.argmax(X[:, : self.horizon], axis=1)

    def _root(self, state, ids, actions, rng):
        n = len(ids)
        r = np.empty(n)
        done = np.empty(n, dtype=bool)
        safe = actions == 0
        r[safe] = np.where(rng.random(safe.sum()) < 0.5, 1.0, -1.0)
        done[safe] = True
        risky = ~safe
        r[risky] = 1.0
        cont = rng.random(risky.sum()) < 0.5
        done[risky] = ~cont
        state["branch"][ids[risky][cont]] = CHAIN
        state["root"][ids] = actions
        return r, done

    def transition(self, state, ids, actions, h, rng):
        if h == 0:
            return self._root(state, ids, actions, rng)
        state["hist"][ids, h - 1] = actions
        last = h == self.horizon - 1
        r = np.full(len(ids), -5.0 if last else 0.0)
        return r, np.full(len(ids), last)

    def initial_context_list(self) -> np.ndarray:
        return self.encode(0, np.array([ROOT]), np.zeros((1, 1), dtype=np.int64))

    # exact evaluation by enumerating the tree
    def _node_x(self, h, branch, hist) -> np.ndarray:
        hist_arr = np.zeros((1, max(self.horizon - 1, 1)), dtype=np.int64)
        hist_arr[0, : len(hist)] = hist
        return self.encode(h, np.array([branch]), hist_arr)

    def _chain_value(self, P, h, hist) -> float:
        if h == self.horizon - 1:
            return -5.0
        p = P(self._node_x(h, CHAIN, hist))[0]
        return float(sum(p[a] * self._chain_value(P, h + 1, hist + (a,))
                         for a in range(self.action_count) if p[a] > 0))

    def _root_q(self, P, a) -> float:
        if a == 0:
            return 0.0
        return 1.0 + 0.5 * self._chain_value(P, 1, ())

    def oracle_value(self, policy, x=None) -> float:
        P = self.policy_fn(policy)
        p = P(self.initial_context_list())[0]
        return float(sum(p[a] * self._root_q(P, a) for a in range(self.action_count) if p[a] > 0))


class Example3(Example2):
    """Example 2 with a third kind of root action aliased with the safe one.

    Root action 0 and root actions >= 2 lead (reward 0) to the same next
    context.  There, any action ends the episode: with +1 or -1 (even odds)
    if the root action was 0, with -5 otherwise.  Root action 1 behaves as
    the risky action of Example 2.
    """

    tag = EXAMPLE3

    def __init__(self, spec: EnvSpec):
        if int(spec.params.get("n_actions", 3)) < 3:
            raise ValueError("example3 needs n_actions >= 3")
        spec = EnvSpec(spec.tag, {"n_actions": 3, **spec.params}, spec.seed)
        super().__init__(spec)

    def _extra_features(self):
        return 1

    def encode(self, h, branch, hist):
        X = super().encode(h, branch, hist)
        X[branch == POST, -1] = 1.0
        return X

    def _root(self, state, ids, actions, rng):
        n = len(ids)
        r = np.zeros(n)
        done = np.zeros(n, dtype=bool)
        risky = actions == 1
        r[risky] = 1.0
        cont = rng.random(risky.sum()) < 0.5
        done[risky] = ~cont
        state["branch"][ids[risky][cont]] = CHAIN
        state["branch"][ids[~risky]] = POST
        state["root"][ids] = actions
        return r, done

    def transition(self, state, ids, actions, h, rng):
        if h == 0:
            return self._root(state, ids, actions, rng)
        post = state["branch"][ids] == POST
        r = np.empty(len(ids))
        done = np.empty(len(ids), dtype=bool)
        if post.any():
            pid = ids[post]
            safe = state["root"][pid] == 0
            coin = np.where(rng.random(len(pid)) < 0.5, 1.0, -1.0)
            r[post] = np.where(safe, coin, -5.0)
            done[post] = True
        if (~post).any():
            cid = ids[~post]
            state["hist"][cid, h - 1] = actions[~post]
            last = h == self.horizon - 1
            r[~post] = -5.0 if last else 0.0
            done[~post] = last
        return r, done

    def _root_q(self, P, a):
        if a == 1:
            return super()._root_q(P, 1)
        return 0.0 if a == 0 else -5.0

    def post_context(self) -> np.ndarray:
        return self._node_x(1, POST, ())[0]


# --- continuous synthetic CDP ---------------------------------------------


class Synthetic(Env):
    """Seeded continuous-context CDP with a history-dependent final reward.

    Initial positions are drawn around ``n_clusters`` seeded centers; every
    cluster has a hidden preferred action.  Actions move the position by a
    seeded drift plus noise.  The final reward is ``2 m / H - 1`` plus
    small noise, where ``m`` counts the steps on which the cluster's
    preferred action was taken, so it depends on the whole history rather
    than on the current context.
    """

    tag = SYNTHETIC

    def __init__(self, spec: EnvSpec):
        p = spec.params
        self.dim = int(p.get("feature_dim", 2))
        self.action_count = int(p.get("n_actions", 3))
        self.horizon = int(p.get("horizon", 5))
        self.n_clusters = int(p.get("n_clusters", 4))
        self.spread = float(p.get("cluster_spread", 0.15))
        self.step_noise = float(p.get("step_noise", 0.05))
        self.reward_noise = float(p.get("reward_noise", 0.1))
        self.feature_dim = self.dim + 1
        self.r_max = 1.0 + self.reward_noise
        super().__init__(spec)
        self.centers = self.rng.uniform(-2, 2, size=(self.n_clusters, self.dim))
        self.good = self.rng.integers(0, self.action_count, size=self.n_clusters)
        self.drift = self.rng.normal(0, 0.1, size=(self.action_count, self.dim))

    def reset(self, n, rng):
        k = rng.integers(0, self.n_clusters, size=n)
        pos = self.centers[k] + self.spread * rng.normal(size=(n, self.dim))
        return {"k": k, "pos": pos, "matches": np.zeros(n)}

    def observe(self, state, ids, h):
        t = np.full((len(ids), 1), h / self.horizon)
        return np.hstack([state["pos"][ids], t])

    def step_of(self, X):
        return np.rint(X[:, -1] * self.horizon).astype(np.int64)

    def transition(self, state, ids, actions, h, rng):
        state["matches"][ids] += actions == self.good[state["k"][ids]]
        state["pos"][ids] += self.drift[actions] + self.step_noise * rng.normal(size=(len(ids), self.dim))
        last = h == self.horizon - 1
        if not last:
            return np.zeros(len(ids)), np.zeros(len(ids), dtype=bool)
        noise = rng.uniform(-self.reward_noise, self.reward_noise, size=len(ids))
        r = 2.0 * state["matches"][ids] / self.horizon - 1.0 + noise
        return r, np.ones(len(ids), dtype=bool)


_REGISTRY = {EXAMPLE1: Example1, EXAMPLE2: Example2, EXAMPLE3: Example3, BANDIT: Bandit,
             SYNTHETIC: Synthetic}


def make_env(spec: EnvSpec) -> Env:
    if isinstance(spec, dict):
        spec = EnvSpec.from_dict(spec)
    if spec.tag not in _REGISTRY:
        raise ValueError(f"unknown environment tag {spec.tag!r}")
    return _REGISTRY[spec.tag](spec)


# --- helpers for the bandit counterexample --------------------------------


def example1_constructed_dataset(env: Example1, n: int, seed: int = 0) -> Dataset:
    """Uniformly logged Example-1 data with exactly one positive reward.

    The first sample is a rewarded (context, action) pair; every other
    sample is redrawn until its reward is not positive.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    A = env.action_count
    k = int(rng.integers(len(env.positive_contexts)))
    samples = [(int(env.positive_contexts[k]), int(env.rewarded_action[k]))]
    while len(samples) < n:
        x, a = int(rng.integers(env.n_contexts)), int(rng.integers(A))
        if env.R[x, a] <= 0:
            samples.append((x, a))
    eye = np.eye(env.n_contexts)
    trajs = [Trajectory(eye[[x]], [a], [env.R[x, a]], [1.0 / A]) for x, a in samples]
    return Dataset(tuple(trajs), env.feature_dim, A, env.r_max, 1,
                   f"example1 constructed n={n} seed={seed}")


class TablePolicy:
    """Policy over a finite set of contexts, looked up by exact vector match.

    Contexts absent from the table get ``default`` (uniform if ``None``).
    """

    def __init__(self, contexts: np.ndarray, table: np.ndarray, default: Optional[np.ndarray] = None):
        self.table = np.asarray(table, dtype=float)
        self.action_count = self.table.shape[1]
        self.lookup = {tuple(np.asarray(x, dtype=float).tolist()): i for i, x in enumerate(contexts)}
        self.default = (np.full(self.action_count, 1.0 / self.action_count) if default is None
                        else np.asarray(default, dtype=float))

    def probs(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty((len(X), self.action_count))
        for r, x in enumerate(X):
            i = self.lookup.get(tuple(x.tolist()))
            out[r] = self.default if i is None else self.table[i]
        return out


def context_avoiding_policy(env: Example1, dataset: Dataset) -> TablePolicy:
    """Deterministic policy that keeps observed positive rewards and avoids everything else.

    Where a positive reward was observed the policy repeats that action;
    elsewhere it picks the lowest-index action never logged at the context.
    """
    nx, A = env.n_contexts, env.action_count
    ctx = np.argmax(dataset.contexts, axis=1)
    table = np.zeros((nx, A))
    for x in range(nx):
        here = dataset.actions[ctx == x]
        rewards = dataset.rewards[ctx == x]
        if np.any(rewards > 0):
            table[x, here[np.argmax(rewards)]] = 1.0
            continue
        unseen = sorted(set(range(A)) - set(here.tolist()))
        table[x, unseen[0] if unseen else 0] = 1.0
    return TablePolicy(env.context_list(), table)
