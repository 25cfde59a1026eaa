"""Model-based learning: estimate low-rank dynamics from rollouts, plan on them.

Rewards and transition probabilities are estimated per state (resp. state
pair) by feeding the empirical means/frequencies of the observed joint
actions into masked CP completion; unobserved joint actions are imputed by
the fitted CP model. Policy evaluation then runs on the estimated model, and
the bound helpers relate estimation error to evaluation error.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bellman import (
    TabularPolicy,
    bellman_apply,
    exact_policy_eval,
    greedy_joint_action,
    policy_improve,
)
from .mdp_env import EpisodeBatch, TabularMMDP, TensorGame, rollout
from .tensor_core import (
    ALSOptions,
    ObservedEntrySet,
    boost_count,
    cluster_boost,
    cp_complete,
    cp_reconstruct,
)


@dataclass
class DynamicsEstimate:
    """Per-state reward models and per-state-pair transition models.

    ``rewards[s]`` / ``transitions[s][s2]`` are None for states never visited.
    """

    n_states: int
    n: int
    u: int
    rank: int
    rewards: list
    transitions: list
    counts: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return np.array([r is not None for r in self.rewards])

    @property
    def action_shape(self) -> tuple[int, ...]:
        return (self.u,) * self.n

    def reward_tensor(self, s: int) -> np.ndarray:
        if self.rewards[s] is None:
            raise ValueError(f"state {s} was never visited")
        return np.clip(cp_reconstruct(self.rewards[s]), 0.0, 1.0)

    def raw_transitions(self, s: int) -> np.ndarray:
        """Clamped, not yet normalized estimates, shape ``(S,) + u^n``."""
        if self.transitions[s] is None:
            raise ValueError(f"state {s} was never visited")
        return np.stack([np.clip(cp_reconstruct(m), 0.0, None) for m in self.transitions[s]])

    def normalized_transitions(self, s: int) -> tuple[np.ndarray, np.ndarray]:
        """Distributions over s' and the normalization factor f per joint action.

        ``P'(.|s, a) = f(s, a) * Pbar(.|s, a)`` with ``f = 1 / sum_s' Pbar``.
        Joint actions whose estimated mass is zero fall back to uniform
        (reported with ``f = inf``).
        """
        raw = self.raw_transitions(s)
        mass = raw.sum(axis=0)
        dead = mass <= 0
        f = np.where(dead, np.inf, 1.0 / np.where(dead, 1.0, mass))
        probs = np.where(dead, 1.0 / self.n_states, raw * np.where(dead, 0.0, f))
        return probs, f

    def to_mmdp(self, gamma: float, allow_absent: bool = False) -> TabularMMDP:
        """Estimated model as an MMDP.

        Absent states are an error unless ``allow_absent``; then they get a
        zero reward and uniform transitions as placeholders, and the caller
        must keep them out of evaluation and improvement.
        """
        shape = self.action_shape
        rewards = np.zeros((self.n_states,) + shape)
        trans = np.zeros((self.n_states, self.n_states) + shape)
        for s in range(self.n_states):
            if self.rewards[s] is None:
                if not allow_absent:
                    raise ValueError(f"state {s} has no estimate")
                trans[s] = 1.0 / self.n_states
                continue
            rewards[s] = self.reward_tensor(s)
            trans[s] = self.normalized_transitions(s)[0]
        return TabularMMDP(S=self.n_states, n=self.n, u=self.u, gamma=gamma,
                           rewards=rewards, transitions=trans, k1=self.rank, k2=self.rank)


@dataclass
class BoundReport:
    eps_R: float
    eps_P: float
    f_lo: float
    f_hi: float
    tv_measured: float
    tv_bound: float
    q_err_measured: float
    q_err_bound: float
    tv_ok: bool = True


# ---------------------------------------------------------------------------
# estimation


def estimate_dynamics(batch: EpisodeBatch, m_shape: tuple[int, int, int], k: int,
                      opts: ALSOptions | None = None) -> DynamicsEstimate:
    """Complete reward and transition tensors from one batch of transitions.

    ``m_shape`` is ``(S, n, u)``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    S, n, u = m_shape
    shape = (u,) * n
    flat = np.ravel_multi_index(batch.actions.T, shape)
    counts = np.zeros((S, u ** n), dtype=np.int64)
    np.add.at(counts, (batch.states, flat), 1)
    reward_sum = np.zeros((S, u ** n))
    np.add.at(reward_sum, (batch.states, flat), batch.rewards)
    next_counts = np.zeros((S, S, u ** n))
    np.add.at(next_counts, (batch.states, batch.next_states, flat), 1.0)

    rewards, transitions = [None] * S, [None] * S
    for s in range(S):
        seen = np.nonzero(counts[s])[0]
        if seen.size == 0:
            continue
        idx = np.stack(np.unravel_index(seen, shape), axis=1)
        c = counts[s, seen]
        rewards[s] = cp_complete(ObservedEntrySet(shape, idx, reward_sum[s, seen] / c, c), k, opts)
        transitions[s] = [
            cp_complete(ObservedEntrySet(shape, idx, next_counts[s, s2, seen] / c, c), k, opts)
            for s2 in range(S)
        ]
    return DynamicsEstimate(S, n, u, k, rewards, transitions, counts.reshape((S,) + shape))


def boosted_estimate(batches, shape: tuple[int, int, int], k: int, eps: float, delta: float,
                     S: int | None = None, eta: float = 0.2, opts: ALSOptions | None = None) -> np.ndarray:
    """Confidence-boosted reward tensors, shape ``(S,) + u^n``.

    Each independent batch gives one estimate per state; per state the
    returned tensor is a member of the largest cluster of estimates that are
    pairwise within ``2 * eps / 3``.
    """
    S = shape[0] if S is None else S
    need = boost_count(eta, S, delta)
    batches = list(batches)
    if len(batches) < need:
        raise ValueError(f"boosting needs at least {need} independent batches, got {len(batches)}")
    estimates = [estimate_dynamics(b, shape, k, opts) for b in batches]
    out = []
    for s in range(S):
        per_state = [e.reward_tensor(s) for e in estimates if e.rewards[s] is not None]
        if not per_state:
            raise ValueError(f"state {s} was never visited in any batch")
        out.append(cluster_boost(per_state, eps))
    return np.stack(out)


def model_policy_eval(d: DynamicsEstimate, p: TabularPolicy, gamma: float) -> np.ndarray:
    if not np.all(d.present):
        raise ValueError(f"states {np.nonzero(~d.present)[0].tolist()} have no estimate")
    return exact_policy_eval(d.to_mmdp(gamma), p)


# ---------------------------------------------------------------------------
# bounds


def f_bracket(eps: float, n_states: int) -> tuple[float, float]:
    """Range of the normalization factor when every entry is off by at most eps."""
    lo = 1.0 / (1.0 + eps * n_states)
    hi = 1.0 / (1.0 - eps * n_states) if eps * n_states < 1 else np.inf
    return lo, hi


def tv_bound(f: float, eps: float, n_states: int) -> float:
    """TV(f * Pbar, P) <= (|1 - f| + f |S| eps) / 2."""
    return 0.5 * (abs(1.0 - f) + f * n_states * eps)


def q_error_bound(eps_R: float, eps_P: float, f: float, n_states: int, gamma: float) -> float:
    """Sup-norm gap between true and model Q for rewards in [0, 1]:
    ``(|1 - f| + f |S| eps_P) * gamma / (2 (1 - gamma)^2) + eps_R / (1 - gamma)``.
    """
    return (2.0 * tv_bound(f, eps_P, n_states) * gamma / (2.0 * (1.0 - gamma) ** 2)
            + eps_R / (1.0 - gamma))


def tv_and_bounds(d: DynamicsEstimate, m: TabularMMDP, p: TabularPolicy, gamma: float) -> BoundReport:
    """Measure estimation errors and compare TV / Q gaps with their bounds.

    ``eps_R`` and ``eps_P`` are the largest Frobenius errors over states and
    state pairs (the transition error uses the clamped pre-normalization
    estimate). The TV bound is checked per (s, a) with that pair's own f;
    the Q bound uses the worst (s, a).
    """
    S = m.S
    eps_R = max(float(np.linalg.norm(d.reward_tensor(s) - m.rewards[s])) for s in range(S))
    eps_P = max(float(np.linalg.norm(d.raw_transitions(s)[s2] - m.transitions[s, s2]))
                for s in range(S) for s2 in range(S))
    tv_meas, tv_bnd, fs, ok = 0.0, 0.0, [], True
    for s in range(S):
        probs, f = d.normalized_transitions(s)
        tv = 0.5 * np.abs(probs - m.transitions[s]).sum(axis=0)
        bnd = 0.5 * (np.abs(1.0 - f) + f * S * eps_P)
        ok = ok and bool(np.all(tv <= bnd + 1e-12))
        tv_meas, tv_bnd = max(tv_meas, float(tv.max())), max(tv_bnd, float(bnd.max()))
        fs.append(f.ravel())
    fs = np.concatenate(fs)
    q_true = exact_policy_eval(TabularMMDP(S, m.n, m.u, gamma, m.rewards, m.transitions), p)
    q_model = model_policy_eval(d, p, gamma)
    q_bound = 2.0 * tv_bnd * gamma / (2.0 * (1.0 - gamma) ** 2) + eps_R / (1.0 - gamma)
    return BoundReport(
        eps_R=eps_R, eps_P=eps_P, f_lo=float(fs.min()), f_hi=float(fs.max()),
        tv_measured=tv_meas, tv_bound=tv_bnd,
        q_err_measured=float(np.abs(q_true - q_model).max()), q_err_bound=q_bound, tv_ok=ok,
    )


# ---------------------------------------------------------------------------
# full loop


@dataclass
class ModelBasedConfig:
    """Settings for :func:`run_model_based`.

    ``delta`` is the floor on every joint-action probability of the
    behaviour policy; it must not exceed ``u**-n`` (the uniform policy).
    ``rollout_steps`` defaults to ``2 * S * u**n`` transitions per iteration.
    """

    env: object
    rank: int
    iters: int = 20
    rollout_steps: int | None = None
    delta: float | None = None
    inner_iters: int = 50
    seed: int = 0
    exact_dynamics: bool = False
    opts: ALSOptions | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.rank < 1 or self.iters < 0 or self.inner_iters < 1:
            raise ValueError("rank and inner_iters must be >= 1, iters >= 0")
        if self.rollout_steps is not None and self.rollout_steps < 1:
            raise ValueError("rollout_steps must be >= 1")
        u, n = self.env.u, self.env.n
        if self.delta is not None and not 0 < self.delta <= u ** -n:
            raise ValueError(f"delta must lie in (0, {u ** -n}]")


def _as_mmdp(env) -> TabularMMDP:
    return env.as_mmdp() if isinstance(env, TensorGame) else env


def greedy_return(env, q: np.ndarray) -> float:
    """Normalized value ``(1 - gamma) * mean_s V(s)`` of the greedy policy of ``q``.

    For a tensor game this is the reward of the greedy joint action.
    """
    m = _as_mmdp(env)
    greedy = TabularPolicy.deterministic([greedy_joint_action(q[s]) for s in range(m.S)], m.n, m.u)
    return policy_return(m, greedy)


def policy_return(env, p: TabularPolicy) -> float:
    m = _as_mmdp(env)
    q = exact_policy_eval(m, p)
    v = np.array([np.sum(p.joint(s) * q[s]) for s in range(m.S)])
    return float((1.0 - m.gamma) * v.mean())


def run_model_based(cfg: ModelBasedConfig) -> list[dict]:
    """Alternate rollout, estimation, evaluation on the model and improvement.

    Row 0 is the value of the initial uniform policy; row t >= 1 is the
    greedy return of the estimated Q after iteration t, with the estimation
    errors and bounds measured against the true environment.
    """
    env = cfg.env
    m = _as_mmdp(env)
    S, n, u = m.S, m.n, m.u
    delta = cfg.delta if cfg.delta is not None else 0.25 * u ** -n
    # per-agent exploration so that (eps_agent / u)^n = delta
    eps_agent = min(1.0, u * delta ** (1.0 / n))
    eps_joint = 1.0 - (1.0 - eps_agent) ** n
    steps = cfg.rollout_steps or 2 * S * u ** n
    rng = np.random.default_rng(cfg.seed)

    policy = TabularPolicy.uniform(S, n, u)
    q = np.zeros((S,) + m.action_shape)
    rows = [dict(iteration=0, seed=cfg.seed, greedy_return=policy_return(m, policy),
                 eps_R=np.nan, eps_P=np.nan, tv_bound=np.nan, q_err_bound=np.nan)]
    batches = []
    for it in range(1, cfg.iters + 1):
        if policy.min_joint_prob() < delta * (1 - 1e-9):
            raise AssertionError("behaviour policy violates the probability floor")
        batches.append(rollout(env, policy, steps, seed=int(rng.integers(2 ** 63))))
        if cfg.exact_dynamics:
            model, report, present = m, None, np.ones(S, bool)
        else:
            d = estimate_dynamics(EpisodeBatch.concat(batches), (S, n, u), cfg.rank, cfg.opts)
            present = d.present
            model = d.to_mmdp(m.gamma, allow_absent=True)
            report = tv_and_bounds(d, m, policy, m.gamma) if np.all(present) else None
        for _ in range(cfg.inner_iters):
            new_q = bellman_apply(q, model, policy)
            # unvisited states keep their previous estimate
            q = np.where(present.reshape((S,) + (1,) * n), new_q, q)
        improved = policy_improve(q, "epsilon_greedy", eps_joint)
        probs = np.where(present[:, None, None], improved.probs, policy.probs)
        policy = TabularPolicy(probs)
        rows.append(dict(
            iteration=it, seed=cfg.seed, greedy_return=greedy_return(m, q),
            eps_R=report.eps_R if report else np.nan, eps_P=report.eps_P if report else np.nan,
            tv_bound=report.tv_bound if report else np.nan,
            q_err_bound=report.q_err_bound if report else np.nan,
        ))
    return rows
