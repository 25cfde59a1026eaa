"""Synthetic multi-agent environments and rollout collection.

Two environment families are provided:

* :class:`TensorGame` -- a stateless cooperative game whose joint reward is an
  entry of a nonnegative low-rank tensor with maximum entry 1.
* :class:`TabularMMDP` -- a finite multi-agent MDP whose per-state reward
  tensors and per-state-pair transition tensors have bounded CP-rank.

Joint actions are tuples (or integer arrays) with one action index per agent.
Policies passed to :func:`rollout` are anything exposing a ``probs`` array of
shape ``(S, n, u)`` (per-state, per-agent action distributions), or such an
array directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import CPModel, cp_reconstruct

INDEPENDENCE_TOL = 1e-8
MAX_RESAMPLES = 100


@dataclass(frozen=True)
class TensorGame:
    n: int
    u: int
    r: int
    reward: np.ndarray
    seed: int
    factors: tuple = field(default=(), repr=False)

    @property
    def n_states(self) -> int:
        return 1

    @property
    def gamma(self) -> float:
        return 0.0

    def as_mmdp(self) -> "TabularMMDP":
        """Single-state MMDP view (gamma 0, self-loop transitions)."""
        shape = (self.u,) * self.n
        return TabularMMDP(
            S=1, n=self.n, u=self.u, gamma=0.0,
            rewards=self.reward[None].copy(),
            transitions=np.ones((1, 1) + shape),
            k1=self.r, k2=1, mix=0.0,
        )


@dataclass(frozen=True)
class TabularMMDP:
    """Finite MMDP.

    ``rewards`` has shape ``(S,) + (u,)*n`` and ``transitions`` has shape
    ``(S, S) + (u,)*n`` with ``transitions[s, s2][a] = P(s2 | s, a)``.
    """

    S: int
    n: int
    u: int
    gamma: float
    rewards: np.ndarray
    transitions: np.ndarray
    k1: int = 1
    k2: int = 1
    mix: float = 0.0

    def __post_init__(self):
        shape = (self.u,) * self.n
        if self.rewards.shape != (self.S,) + shape:
            raise ValueError(f"rewards shape {self.rewards.shape} != {(self.S,) + shape}")
        if self.transitions.shape != (self.S, self.S) + shape:
            raise ValueError("transitions shape does not match (S, S) + u^n")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.S

    @property
    def action_shape(self) -> tuple[int, ...]:
        return (self.u,) * self.n

    def check_stochastic(self, tol: float = 1e-9) -> bool:
        return bool(np.all(np.abs(self.transitions.sum(axis=1) - 1.0) <= tol)
                    and np.all(self.transitions >= 0))


@dataclass
class EpisodeBatch:
    """Transitions ``(s, a, r, s')`` in collection order.

    ``dones[t]`` marks the last step of an episode; within an episode the next
    state of step t is the state of step t+1.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    seed: int = 0
    policy_id: str = ""

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64).reshape(-1)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.actions.ndim == 1:
            self.actions = self.actions.reshape(len(self.states), -1)
        self.rewards = np.asarray(self.rewards, dtype=float).reshape(-1)
        self.next_states = np.asarray(self.next_states, dtype=np.int64).reshape(-1)
        self.dones = np.asarray(self.dones, dtype=bool).reshape(-1)
        t = len(self.states)
        if not (len(self.actions) == len(self.rewards) == len(self.next_states) == len(self.dones) == t):
            raise ValueError("batch fields must have equal length")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")
        cont = ~self.dones[:-1]
        if np.any(self.next_states[:-1][cont] != self.states[1:][cont]):
            raise ValueError("transitions are not chained within an episode")

    def __len__(self):
        return len(self.states)

    @classmethod
    def concat(cls, batches) -> "EpisodeBatch":
        batches = list(batches)
        if not batches:
            raise ValueError("nothing to concatenate")
        # a batch boundary always ends an episode
        dones = [b.dones.copy() for b in batches]
        for d in dones:
            if len(d):
                d[-1] = True
        return cls(
            np.concatenate([b.states for b in batches]),
            np.concatenate([b.actions for b in batches]),
            np.concatenate([b.rewards for b in batches]),
            np.concatenate([b.next_states for b in batches]),
            np.concatenate(dones),
            seed=batches[0].seed,
            policy_id=batches[0].policy_id,
        )


# ---------------------------------------------------------------------------
# generators


def _independent_columns(rng, u: int, r: int, check: bool) -> np.ndarray:
    for _ in range(MAX_RESAMPLES):
        f = np.abs(rng.standard_normal((u, r)))
        if not check:
            return f
        diag = np.abs(np.diag(np.linalg.qr(f, mode="r")))
        if diag.min() > INDEPENDENCE_TOL * max(diag.max(), 1.0):
            return f
    raise RuntimeError("could not sample linearly independent factors")


def gen_tensor_game(n: int, u: int, r: int, seed: int, allow_dependent: bool = False) -> TensorGame:
    """Random cooperative tensor game of CP-rank at most ``r``.

    Each agent gets ``r`` factor vectors with entries ``|N(0, 1)|``; the
    reward is the sum of their outer products scaled so the maximum entry is
    exactly 1. Per-mode factors are checked for linear independence (QR
    numerical rank) and resampled if deficient. That check is impossible when
    ``r > u``; such games need ``allow_dependent=True``.
    """
    if n < 1 or u < 2 or r < 1:
        raise ValueError("need n >= 1, u >= 2, r >= 1")
    if r > u and not allow_dependent:
        raise ValueError(f"rank {r} > {u} actions: factors cannot be linearly independent")
    rng = np.random.default_rng(seed)
    factors = [_independent_columns(rng, u, r, r <= u) for _ in range(n)]
    t = cp_reconstruct(CPModel(np.ones(r), factors))
    scale = t.max()
    t = t / scale
    t[np.unravel_index(np.argmax(t), t.shape)] = 1.0
    factors[0] = factors[0] / scale
    return TensorGame(n=n, u=u, r=r, reward=t, seed=seed, factors=tuple(factors))


def game_reward(g: TensorGame, joint_action) -> float:
    a = tuple(int(x) for x in joint_action)
    if len(a) != g.n or any(x < 0 or x >= g.u for x in a):
        raise IndexError(f"joint action {a} out of range for n={g.n}, u={g.u}")
    return float(g.reward[a])


def _simplex_mix(rng, S: int, mix: float) -> np.ndarray:
    return (1.0 - mix) * rng.dirichlet(np.ones(S)) + mix / S


def gen_lowrank_mmdp(S: int, n: int, u: int, k1: int, k2: int, gamma: float, mix: float = 0.05,
                     seed: int = 0) -> TabularMMDP:
    """Random MMDP with reward CP-rank <= k1 and transition CP-rank <= k2.

    Rewards: per state, a sum of ``k1`` nonnegative rank-1 terms divided by
    the global maximum, so entries lie in [0, 1].

    Transitions: per state ``s``, draw ``k2`` next-state distributions
    ``q_0..q_{k2-1}`` (each blended with ``mix``-uniform) and ``k2 - 1``
    rank-1 gates ``lam_j(a) = prod_i p_{j,i}(a_i)`` with entries in [0, 1].
    Then

        P(. | s, a) = q_0 + sum_j c_j lam_j(a) (q_j - q_0),   sum_j c_j <= 1,

    is a convex combination of the ``q_j``, hence a distribution with every
    entry >= mix / S, and for each ``(s, s')`` it is a sum of ``k2`` rank-1
    tensors (the constant plus one per gate).
    """
    if not 0.0 < mix < 1.0:
        raise ValueError("mix must lie in (0, 1)")
    if S < 1 or n < 1 or u < 1 or k1 < 1 or k2 < 1:
        raise ValueError("S, n, u, k1, k2 must be positive")
    rng = np.random.default_rng(seed)
    shape = (u,) * n
    rewards = np.stack([
        cp_reconstruct(CPModel(np.ones(k1), [np.abs(rng.standard_normal((u, k1))) for _ in range(n)]))
        for _ in range(S)
    ])
    rewards /= rewards.max()

    transitions = np.zeros((S, S) + shape)
    for s in range(S):
        q = np.stack([_simplex_mix(rng, S, mix) for _ in range(k2)])
        gates = [rng.uniform(0.0, 1.0, (u, k2 - 1)) for _ in range(n)]
        coef = rng.dirichlet(np.ones(k2))[: k2 - 1]
        for s2 in range(S):
            p = np.full(shape, q[0, s2])
            if k2 > 1:
                p = p + cp_reconstruct(CPModel(coef * (q[1:, s2] - q[0, s2]), gates))
            transitions[s, s2] = p
    return TabularMMDP(S=S, n=n, u=u, gamma=gamma, rewards=rewards, transitions=transitions,
                       k1=k1, k2=k2, mix=mix)


# ---------------------------------------------------------------------------
# rollouts


def _policy_probs(policy, S: int, n: int, u: int) -> np.ndarray:
    probs = np.asarray(getattr(policy, "probs", policy), dtype=float)
    if probs.shape != (S, n, u):
        raise ValueError(f"policy probabilities have shape {probs.shape}, expected {(S, n, u)}")
    return probs


def _sample_actions(rng, probs: np.ndarray) -> np.ndarray:
    """One action per agent from rows of ``probs`` (shape (n, u))."""
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    return (rng.random((probs.shape[0], 1)) >= cdf).sum(axis=1)


def rollout(env, policy, steps: int, seed: int, policy_id: str = "",
            start_state: int | None = None) -> EpisodeBatch:
    """Collect exactly ``steps`` transitions.

    Tensor games yield length-1 episodes in the single state 0. MMDPs run one
    continuing chain from ``start_state`` (uniformly drawn when None).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(env, TensorGame):
        probs = _policy_probs(policy, 1, env.n, env.u)[0]
        cdf = np.cumsum(probs, axis=1)
        cdf[:, -1] = 1.0
        draws = rng.random((steps, env.n, 1))
        actions = (draws >= cdf[None]).sum(axis=2)
        rewards = env.reward[tuple(actions.T)]
        zeros = np.zeros(steps, dtype=np.int64)
        return EpisodeBatch(zeros, actions, rewards, zeros, np.ones(steps, bool), seed, policy_id)

    probs = _policy_probs(policy, env.S, env.n, env.u)
    s = int(rng.integers(env.S)) if start_state is None else int(start_state)
    states = np.empty(steps, np.int64)
    actions = np.empty((steps, env.n), np.int64)
    rewards = np.empty(steps)
    nexts = np.empty(steps, np.int64)
    for t in range(steps):
        a = _sample_actions(rng, probs[s])
        idx = tuple(a)
        p_next = env.transitions[(s, slice(None)) + idx]
        s2 = int(min(np.searchsorted(np.cumsum(p_next), rng.random(), side="right"), env.S - 1))
        states[t], actions[t], rewards[t], nexts[t] = s, a, env.rewards[(s,) + idx], s2
        s = s2
    return EpisodeBatch(states, actions, rewards, nexts, np.zeros(steps, bool), seed, policy_id)
