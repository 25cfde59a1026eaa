"""Tensorised Bellman expectation operator and policy evaluation/improvement.

Q-functions are arrays of shape ``(S,) + (u,)*n``: one order-n tensor per
state. Policies are factorised across agents, so the joint policy at a state
is the rank-1 tensor ``pi^1(.|s) o ... o pi^n(.|s)`` and the state value is its
full contraction with ``Q(s)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp_env import TabularMMDP
from .tensor_core import ALSOptions, CPModel, cp_als, cp_reconstruct

ARGMAX_CAP = 10 ** 7


@dataclass
class TabularPolicy:
    """Per-state, per-agent action distributions, ``probs[s, i, a]``."""

    probs: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.ndim != 3:
            raise ValueError("probs must have shape (S, n, u)")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=2) - 1.0) > 1e-9):
            raise ValueError("every per-agent vector must be a distribution")

    @classmethod
    def uniform(cls, S: int, n: int, u: int) -> "TabularPolicy":
        return cls(np.full((S, n, u), 1.0 / u))

    @classmethod
    def deterministic(cls, joint_actions, n: int, u: int) -> "TabularPolicy":
        """One joint action per state."""
        joint_actions = np.asarray(joint_actions, dtype=np.int64).reshape(-1, n)
        probs = np.zeros((len(joint_actions), n, u))
        for s, a in enumerate(joint_actions):
            probs[s, np.arange(n), a] = 1.0
        return cls(probs)

    def joint(self, s: int) -> np.ndarray:
        """Dense joint-action probabilities at state ``s``."""
        out = self.probs[s, 0]
        for p in self.probs[s, 1:]:
            out = np.multiply.outer(out, p)
        return out

    def min_joint_prob(self) -> float:
        return float(np.prod(self.probs.min(axis=2), axis=1).min())


def policy_tensor(p: TabularPolicy, s: int) -> CPModel:
    """Rank-1 CP form of the joint policy at state ``s``."""
    return CPModel.from_factors([v[:, None] for v in p.probs[s]])


def state_values(q: np.ndarray, p: TabularPolicy) -> np.ndarray:
    """V(s) = <pi(.|s), Q(s)> by successive mode contractions."""
    out = np.empty(q.shape[0])
    for s in range(q.shape[0]):
        v = q[s]
        for probs in p.probs[s]:
            v = np.tensordot(probs, v, axes=(0, 0))
        out[s] = v
    return out


def _check(q: np.ndarray, m: TabularMMDP, p: TabularPolicy):
    if q.shape != (m.S,) + m.action_shape:
        raise ValueError(f"Q shape {q.shape} does not match MMDP {(m.S,) + m.action_shape}")
    if p.probs.shape != (m.S, m.n, m.u):
        raise ValueError(f"policy shape {p.probs.shape} does not match MMDP {(m.S, m.n, m.u)}")


def bellman_apply(q: np.ndarray, m: TabularMMDP, p: TabularPolicy) -> np.ndarray:
    """(T^pi Q)(s)[a] = R(s)[a] + gamma * sum_s' P(s, s')[a] V(s')."""
    q = np.asarray(q, dtype=float)
    _check(q, m, p)
    v = state_values(q, p)
    return m.rewards + m.gamma * np.tensordot(v, m.transitions, axes=(0, 1))


def exact_policy_eval(m: TabularMMDP, p: TabularPolicy) -> np.ndarray:
    """Q^pi by the state-value reduction ``V = (I - gamma P_pi)^{-1} R_pi``."""
    _check(np.zeros((m.S,) + m.action_shape), m, p)
    r_pi = np.array([np.sum(p.joint(s) * m.rewards[s]) for s in range(m.S)])
    p_pi = np.array([[np.sum(p.joint(s) * m.transitions[s, s2]) for s2 in range(m.S)]
                     for s in range(m.S)])
    v = np.linalg.solve(np.eye(m.S) - m.gamma * p_pi, r_pi)
    q = m.rewards + m.gamma * np.tensordot(v, m.transitions, axes=(0, 1))
    if not np.all(np.isfinite(q)):
        raise np.linalg.LinAlgError("policy evaluation produced non-finite values")
    return q


def projected_policy_eval(m: TabularMMDP, p: TabularPolicy, k: int, iters: int = 200,
                          tol: float = 1e-10, opts: ALSOptions | None = None) -> np.ndarray:
    """Iterate ``Q <- Pi_k T^pi Q`` from Q = 0.

    ``Pi_k`` fits a rank-k CP model to each state's tensor with ALS,
    warm-started from that state's previous fit.
    """
    if k < 1:
        raise ValueError("rank must be >= 1")
    opts = opts or ALSOptions(max_sweeps=500, rel_tol=1e-12, init_scheme="hosvd-like", n_init=3)
    q = np.zeros((m.S,) + m.action_shape)
    models = [None] * m.S
    for _ in range(iters):
        target = bellman_apply(q, m, p)
        new_q = np.empty_like(q)
        for s in range(m.S):
            models[s], new_q[s] = _project(target[s], k, opts, models[s])
        change = float(np.max(np.abs(new_q - q)))
        q = new_q
        if change < tol:
            break
    return q


def _project(t: np.ndarray, k: int, opts: ALSOptions, warm: CPModel | None):
    """Rank-k fit of ``t``: warm start first, fresh starts if that stalls."""
    t_norm = max(float(np.linalg.norm(t)), 1e-300)
    best, best_err = None, np.inf
    if warm is not None and np.any(warm.weights):
        best = cp_als(t, k, opts, init=warm)
        best_err = np.linalg.norm(cp_reconstruct(best) - t) / t_norm
    if best_err > 1e-10:
        fresh = cp_als(t, k, opts)
        if np.linalg.norm(cp_reconstruct(fresh) - t) / t_norm < best_err:
            best = fresh
    return best, cp_reconstruct(best)


def greedy_joint_action(q_s: np.ndarray, cap: int = ARGMAX_CAP) -> tuple[int, ...]:
    """Index of the maximal entry; ties go to the lexicographically smallest."""
    q_s = np.asarray(q_s)
    if q_s.size == 0:
        raise ValueError("empty tensor")
    if q_s.size > cap:
        raise ValueError(f"tensor with {q_s.size} entries exceeds argmax cap {cap}")
    return tuple(int(i) for i in np.unravel_index(np.argmax(q_s), q_s.shape))


def _softmax_marginals(q_s: np.ndarray, tau: float) -> np.ndarray:
    z = (q_s - q_s.max()) / tau
    joint = np.exp(z)
    joint /= joint.sum()
    n = q_s.ndim
    return np.stack([joint.sum(axis=tuple(j for j in range(n) if j != i)) for i in range(n)])


def policy_improve(q: np.ndarray, mode: str = "epsilon_greedy", param: float = 0.0) -> TabularPolicy:
    """Factorised improvement step.

    ``epsilon_greedy``: agent i plays its coordinate of the greedy joint
    action with probability ``1 - eps'`` and a uniform action otherwise, where
    ``(1 - eps')^n = 1 - eps``.

    ``softmax``: per-agent marginals of the joint softmax ``exp(Q / tau)``.
    """
    q = np.asarray(q, dtype=float)
    S, n, u = q.shape[0], q.ndim - 1, q.shape[1]
    probs = np.empty((S, n, u))
    if mode == "epsilon_greedy":
        if not 0.0 <= param <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        eps_agent = 1.0 - (1.0 - param) ** (1.0 / n)
        for s in range(S):
            a = greedy_joint_action(q[s])
            probs[s] = eps_agent / u
            probs[s, np.arange(n), a] += 1.0 - eps_agent
    elif mode == "softmax":
        if not param > 0:
            raise ValueError("temperature must be > 0")
        for s in range(S):
            probs[s] = _softmax_marginals(q[s], param)
    else:
        raise ValueError(f"unknown improvement mode {mode!r}")
    return TabularPolicy(probs, {"mode": mode, "param": param})
