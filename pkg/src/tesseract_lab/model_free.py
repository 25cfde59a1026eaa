"""Model-free learning with a low-rank factored critic, plus baselines.

The critic represents the joint action-value tensor at a state as

    Q(s, a) = sum_r w_r prod_i <f(a_i), g_r(o_i)>

where ``g`` is a factor network producing ``k`` vectors of size ``m``
(one per agent by default, or one shared network that reads the agent
identity from ``o_i``), and ``f`` is an action embedding (one-hot when
``m == u``). Evaluating one joint action costs O(n k m) and never builds
the ``u^n`` tensor.

Observations: agent ``i`` in state ``s`` sees ``onehot(i, n) ++ onehot(s, S)``;
the value baseline sees ``onehot(s, S)``. Tensor games have a single state,
so the factor and policy networks effectively learn per-agent parameters.

Algorithms (``TrainConfig.algo``):

* ``tac`` -- factored critic trained on multi-step targets, factorised actor
  following the expected objective ``sum_u pi(u|s) Q(s, u)`` through the
  critic (``actor_estimator``).
* ``iac`` -- independent actors trained by REINFORCE with a learnt state
  baseline; no joint modelling.
* ``vdn`` -- additive per-agent utilities trained by one-step Q-learning with
  annealed per-agent epsilon-greedy exploration.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .approx import MLP, AdamState, adam_step, clip_grad_norm, mlp_backward, mlp_forward
from .bellman import TabularPolicy
from .mdp_env import EpisodeBatch, TabularMMDP, TensorGame
from .model_based import policy_return
from .tensor_core import ALSOptions, CPModel, cp_als, cp_reconstruct

SQUASHES = ("sigmoid", "unit", "none")
ALGOS = ("tac", "iac", "vdn")
ESTIMATORS = ("gae", "expected", "mix")
BATCH_SOURCES = ("replay", "recent")
FACTOR_INIT_STD = 0.01


# ---------------------------------------------------------------------------
# observations


def agent_obs(states, n: int, n_states: int) -> np.ndarray:
    """Per-agent observations, shape ``states.shape + (n, n + S)``."""
    states = np.asarray(states, dtype=np.int64)
    ids = np.broadcast_to(np.eye(n), states.shape + (n, n))
    st_part = np.broadcast_to(np.eye(n_states)[states][..., None, :], states.shape + (n, n_states))
    return np.concatenate([ids, st_part], axis=-1)


def state_obs(states, n_states: int) -> np.ndarray:
    return np.eye(n_states)[np.asarray(states, dtype=np.int64)]


def _unique_rows(states: np.ndarray, n: int, n_states: int):
    """Distinct (state, agent) observations and the map back to ``(B, n)``."""
    keys = np.asarray(states, dtype=np.int64)[:, None] * n + np.arange(n)
    uniq, inv = np.unique(keys, return_inverse=True)
    s_u, i_u = np.divmod(uniq, n)
    obs = np.zeros((len(uniq), n + n_states))
    obs[np.arange(len(uniq)), i_u] = 1.0
    obs[np.arange(len(uniq)), n + s_u] = 1.0
    return obs, inv.reshape(keys.shape)


class AgentNets:
    """Per-agent function ``obs -> R^out``: one shared MLP or one MLP per agent.

    The agent is read off the leading one-hot block of each observation row,
    so both variants take the same inputs.
    """

    def __init__(self, nets: list, n: int):
        self.nets, self.n = list(nets), n
        if len(self.nets) not in (1, n):
            raise ValueError("need one shared network or one per agent")

    @classmethod
    def init(cls, n: int, sizes, seed: int, shared: bool = True) -> "AgentNets":
        rng = np.random.default_rng(seed)
        return cls([MLP.init(sizes, int(rng.integers(2 ** 63))) for _ in range(1 if shared else n)], n)

    @property
    def shared(self) -> bool:
        return len(self.nets) == 1

    @property
    def sizes(self) -> tuple:
        return self.nets[0].sizes

    @property
    def params(self) -> list:
        return [p for net in self.nets for p in net.params]

    def bump(self) -> None:
        for net in self.nets:
            net.version += 1

    def forward(self, obs):
        obs = np.atleast_2d(obs)
        if self.shared:
            out, cache = mlp_forward(self.nets[0], obs)
            return out, [(slice(None), cache)]
        agents = np.argmax(obs[:, : self.n], axis=1)
        out = np.empty((len(obs), self.sizes[-1]))
        caches = []
        for i, net in enumerate(self.nets):
            rows = np.nonzero(agents == i)[0]
            if rows.size:
                out[rows], cache = mlp_forward(net, obs[rows])
                caches.append((rows, cache))
            else:
                caches.append((rows, None))
        return out, caches

    def backward(self, caches, grad) -> list:
        grads = []
        for net, (rows, cache) in zip(self.nets, caches):
            if cache is None:
                grads += [np.zeros_like(p) for p in net.params]
            else:
                grads += mlp_backward(net, cache, grad[rows])
        return grads

    def __call__(self, obs) -> np.ndarray:
        return self.forward(obs)[0]


# ---------------------------------------------------------------------------
# critic


def _scale_last_layer(net: MLP, std: float, rng) -> None:
    """Re-draw the output layer so outputs on one-hot inputs have about ``std`` spread."""
    h = np.eye(net.sizes[0])
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        h = np.maximum(h @ w.T + b, 0.0)
    rms = float(np.sqrt(np.mean(np.sum(h * h, axis=1))))
    net.weights[-1] = rng.standard_normal(net.weights[-1].shape) * std / max(rms, 1e-12)
    net.biases[-1] = np.zeros_like(net.biases[-1])
    net.version += 1


@dataclass
class FactoredCritic:
    """Rank-k factored Q. ``net`` maps an observation to ``k * m`` pre-squash reals."""

    net: AgentNets
    w: np.ndarray
    emb: np.ndarray
    k: int
    m: int
    u: int
    squash: str = "sigmoid"
    embed: bool = False
    opt: AdamState | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.k < 1 or self.m < self.u:
            raise ValueError("need k >= 1 and m >= u")
        if self.squash not in SQUASHES:
            raise ValueError(f"squash must be one of {SQUASHES}")
        if self.net.sizes[-1] != self.k * self.m or self.w.shape != (self.k,) or self.emb.shape != (self.m, self.u):
            raise ValueError("critic parameter shapes are inconsistent")

    @classmethod
    def init(cls, obs_dim: int, u: int, k: int, seed: int, m: int | None = None, hidden=(64,),
             squash: str = "sigmoid", embed: bool = False, n: int | None = None,
             shared: bool = True) -> "FactoredCritic":
        """Pre-squash factor outputs start with spread ~0.01, ``w_r = 1``.

        Without an embedding ``m = u`` and ``f`` is the one-hot table.
        ``n`` (number of agents, the length of the leading one-hot block of
        an observation) defaults to ``obs_dim - 1``, i.e. a single state.
        """
        m = u if m is None else m
        if not embed and m != u:
            raise ValueError("m != u requires a learnable embedding")
        rng = np.random.default_rng(seed)
        n = obs_dim - 1 if n is None else n
        net = AgentNets.init(n, (obs_dim, *hidden, k * m), int(rng.integers(2 ** 63)), shared)
        for sub in net.nets:
            _scale_last_layer(sub, FACTOR_INIT_STD, rng)
        emb = np.eye(m, u) if not embed else np.eye(m, u) + 0.1 * rng.standard_normal((m, u))
        return cls(net, np.ones(k), emb, k, m, u, squash, embed)

    @property
    def params(self) -> list:
        return self.net.params + [self.w] + ([self.emb] if self.embed else [])


def _squash(c: FactoredCritic, x: np.ndarray) -> np.ndarray:
    """x: (R, k, m) pre-squash -> factors."""
    if c.squash == "sigmoid":
        return 2.0 / (1.0 + np.exp(-x))
    if c.squash == "unit":
        return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)
    return x


def _squash_grad(c: FactoredCritic, x: np.ndarray, g_out: np.ndarray, dg: np.ndarray) -> np.ndarray:
    if c.squash == "sigmoid":
        return dg * g_out * (1.0 - g_out / 2.0)
    if c.squash == "unit":
        norm = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)
        return (dg - g_out * np.sum(dg * g_out, axis=-1, keepdims=True)) / norm
    return dg


def critic_factors(c: FactoredCritic, obs: np.ndarray):
    """Squashed factors ``(R, k, m)`` for observation rows ``(R, d)`` and a cache."""
    raw, cache = c.net.forward(obs)
    x = raw.reshape(-1, c.k, c.m)
    return _squash(c, x), (cache, x)


def _check_actions(c: FactoredCritic, actions: np.ndarray):
    if actions.size and (actions.min() < 0 or actions.max() >= c.u):
        raise IndexError(f"action index out of range [0, {c.u})")


def _prod_except(z: np.ndarray, axis: int) -> np.ndarray:
    """Product over ``axis`` leaving each position out, without division."""
    z = np.moveaxis(z, axis, 0)
    pre = np.cumprod(np.concatenate([np.ones_like(z[:1]), z[:-1]]), axis=0)
    suf = np.cumprod(np.concatenate([np.ones_like(z[:1]), z[::-1][:-1]]), axis=0)[::-1]
    return np.moveaxis(pre * suf, 0, axis)


def critic_q(c: FactoredCritic, obs, joint_action) -> float:
    """Q for one joint action; ``obs`` has one row per agent."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    a = np.asarray(joint_action, dtype=np.int64).reshape(-1)
    if len(a) != len(obs):
        raise ValueError("need one observation per agent")
    _check_actions(c, a)
    g, _ = critic_factors(c, obs)  # (n, k, m)
    z = np.einsum("ikm,mi->ik", g, c.emb[:, a])
    return float(np.sum(c.w * np.prod(z, axis=0)))


def critic_tensor(c: FactoredCritic, obs) -> np.ndarray:
    """Materialized ``u^n`` Q tensor (reference path for tests and small n)."""
    g, _ = critic_factors(c, np.atleast_2d(obs))
    factors = [(gi @ c.emb).T for gi in g]  # (u, k)
    return cp_reconstruct(CPModel.from_factors(factors, c.w))


def critic_marginals(c: FactoredCritic, obs, probs) -> np.ndarray:
    """``q_i(a) = E_{a_-i ~ pi_-i} Q(a_i = a, a_-i)`` for every agent, shape ``(n, u)``."""
    g, _ = critic_factors(c, np.atleast_2d(obs))
    z = g @ c.emb  # (n, k, u)
    mean = np.einsum("iku,iu->ik", z, probs)
    others = _prod_except(mean, 0) * c.w  # (n, k)
    return np.einsum("iku,ik->iu", z, others)


def _critic_batch(c: FactoredCritic, states, actions, n_states: int):
    n = actions.shape[1]
    obs, inv = _unique_rows(states, n, n_states)
    g, (cache, x) = critic_factors(c, obs)
    gb = g[inv]  # (B, n, k, m)
    e = c.emb[:, actions]  # (m, B, n)
    z = np.einsum("bikm,mbi->bik", gb, e)
    q = np.prod(z, axis=1) @ c.w
    return q, (obs, inv, g, cache, x, z, e)


def _critic_grads(c: FactoredCritic, ctx, actions, dq: np.ndarray) -> list:
    obs, inv, g, cache, x, z, e = ctx
    prod = np.prod(z, axis=1)  # (B, k)
    g_w = dq @ prod
    dz = dq[:, None, None] * _prod_except(z, 1) * c.w  # (B, n, k)
    dg_b = dz[..., None] * np.transpose(e, (1, 2, 0))[:, :, None, :]  # (B, n, k, m)
    dg = np.zeros_like(g)
    np.add.at(dg, inv, dg_b)
    dx = _squash_grad(c, x, g, dg)
    grads = c.net.backward(cache, dx.reshape(len(obs), -1)) + [g_w]
    if c.embed:
        gb = g[inv]
        g_emb = np.zeros_like(c.emb)
        contrib = np.einsum("bik,bikm->bim", dz, gb)  # (B, n, m)
        np.add.at(g_emb.T, actions.ravel(), contrib.reshape(-1, c.m))
        grads.append(g_emb)
    return grads


def critic_loss_and_grads(c: FactoredCritic, batch: EpisodeBatch, targets, n_states: int):
    """Mean squared TD error and its gradient w.r.t. ``c.params`` (targets held fixed)."""
    actions = batch.actions
    _check_actions(c, actions)
    q, ctx = _critic_batch(c, batch.states, actions, n_states)
    err = q - np.asarray(targets, dtype=float)
    loss = float(np.mean(err ** 2))
    return loss, _critic_grads(c, ctx, actions, 2.0 * err / len(err))


# ---------------------------------------------------------------------------
# targets and advantages


def clip_q(value, r_max: float = 40.0):
    """Upper clip only: ``min(value, r_max)``."""
    return np.minimum(value, r_max)


def _bootstrap(values, v_last, t, dones):
    """V(s_{t+1}) from the batch, ``v_last`` past its end, 0 after a terminal step."""
    if dones[t]:
        return 0.0
    return values[t + 1] if t + 1 < len(values) else v_last


def multi_step_targets(batch: EpisodeBatch, values, gamma: float, lam: float,
                       horizon: int | None = None, v_last: float = 0.0) -> np.ndarray:
    """lambda-weighted multi-step targets normalized by the summed weights.

    ``target_t = sum_k lam^k g_{t,k} / sum_k lam^k`` for ``k = 1..K`` with
    ``K = min(horizon, steps to the end of the batch or episode)`` and
    ``g_{t,k} = R_t + ... + gamma^(k-1) R_{t+k-1} + gamma^k V(s_{t+k})``.
    ``values[t] = V(s_t)``; ``v_last`` is V of the final next state. With
    ``lam = 0`` the target is the one-step ``g_{t,1}``.
    """
    T = len(batch)
    if T == 0:
        raise ValueError("empty batch")
    values = np.asarray(values, dtype=float)
    if len(values) != T:
        raise ValueError("need one value per step")
    horizon = T if horizon is None else horizon
    r, dones = batch.rewards, batch.dones
    out = np.empty(T)
    for t in range(T):
        ret, disc, num, den = 0.0, 1.0, 0.0, 0.0
        for k in range(1, horizon + 1):
            j = t + k - 1
            ret += disc * r[j]
            disc *= gamma
            boot = _bootstrap(values, v_last, j, dones)
            weight = 1.0 if lam == 0 else lam ** k
            num += weight * (ret + disc * boot)
            den += weight
            if lam == 0 or dones[j] or j + 1 >= T:
                break
        out[t] = num / den
    return out


def gae_advantages(batch: EpisodeBatch, q_values, values, gamma: float, lam: float,
                   v_last: float = 0.0) -> np.ndarray:
    """``A_t = sum_k (gamma lam)^k delta_{t+k}``.

    ``delta_t = R_t + gamma Q(s_{t+1}, u_{t+1}) - V(s_t)``, with
    ``q_values[t] = Q(s_t, u_t)`` at the realized actions of this on-policy
    batch. The last step of the batch bootstraps with ``v_last`` and a
    terminal step with 0; sums stop at episode ends.
    """
    T = len(batch)
    if T == 0:
        raise ValueError("empty batch")
    q_values, values = np.asarray(q_values, dtype=float), np.asarray(values, dtype=float)
    if len(q_values) != T or len(values) != T or np.any(np.isnan(q_values)):
        raise ValueError("need the critic value of every realized action in the batch")
    nxt = np.where(batch.dones, 0.0, np.append(q_values[1:], v_last))
    delta = batch.rewards + gamma * nxt - values
    adv = np.empty(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        acc = delta[t] + (0.0 if batch.dones[t] else gamma * lam * acc)
        adv[t] = acc
    return adv


# ---------------------------------------------------------------------------
# actors


@dataclass
class ActorSet:
    """Shared per-agent policy network and a state-value baseline."""

    policy: AgentNets
    value: MLP
    opt_policy: AdamState | None = field(default=None, repr=False)
    opt_value: AdamState | None = field(default=None, repr=False)

    @classmethod
    def init(cls, obs_dim: int, state_dim: int, u: int, seed: int, hidden=(64,),
             shared: bool = True) -> "ActorSet":
        """The policy output layer starts at zero, so the initial policy is uniform.

        ``obs_dim - state_dim`` is the number of agents.
        """
        rng = np.random.default_rng(seed)
        policy = AgentNets.init(obs_dim - state_dim, (obs_dim, *hidden, u), int(rng.integers(2 ** 63)), shared)
        for sub in policy.nets:
            sub.weights[-1][:] = 0.0
        value = MLP.init((state_dim, *hidden, 1), int(rng.integers(2 ** 63)))
        return cls(policy, value)

    def probs(self, obs) -> np.ndarray:
        return softmax(self.policy(np.atleast_2d(obs)))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def entropy_coef(cfg: "TrainConfig", t: int, total: int) -> float:
    """``beta_0 * 2^-floor(10 t / total)``."""
    if total <= 0:
        return cfg.entropy_coef
    return cfg.entropy_coef * 2.0 ** (-math.floor(cfg.entropy_halvings * t / total))


def epsilon_schedule(cfg: "TrainConfig", t: int, total: int) -> float:
    """Linear from ``eps_start`` to ``eps_end`` over the first half, constant after."""
    half = total / 2.0
    if half <= 0 or t >= half:
        return cfg.eps_end
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * t / half


def policy_loss_and_grads(a: ActorSet, batch: EpisodeBatch, advantages, beta: float, n_states: int,
                          expected_q=None):
    """Loss and gradients w.r.t. ``a.policy.params``.

    Loss per sample: ``-sum_i log pi_i(u_i) A - beta sum_i H(pi_i)``, averaged
    over the batch. If ``expected_q`` (shape ``(B, n, u)``) is given, the
    term ``-sum_i sum_a pi_i(a) q_i(a)`` is added: its gradient is the exact
    expectation of the score-function gradient under the current policy.
    """
    actions = batch.actions
    B, n = actions.shape
    obs, inv = _unique_rows(batch.states, n, n_states)
    logits, cache = a.policy.forward(obs)
    p = softmax(logits)
    pb = p[inv]  # (B, n, u)
    logp = np.log(np.maximum(pb, 1e-300))
    ent = -np.sum(pb * logp, axis=-1)  # (B, n)
    loss = -beta * float(np.mean(ent.sum(axis=1)))
    d_logits = beta * pb * (logp + ent[..., None]) / B
    if advantages is not None:
        adv = np.asarray(advantages, dtype=float)
        if adv.shape != (B,):
            raise ValueError("advantages must align with the batch")
        chosen = np.take_along_axis(logp, actions[..., None], axis=-1)[..., 0]
        loss -= float(np.mean(chosen.sum(axis=1) * adv))
        onehot = np.zeros_like(pb)
        np.put_along_axis(onehot, actions[..., None], 1.0, axis=-1)
        d_logits -= adv[:, None, None] * (onehot - pb) / B
    if expected_q is not None:
        eq = np.asarray(expected_q, dtype=float)
        if eq.shape != pb.shape:
            raise ValueError("expected_q must have shape (B, n, u)")
        loss -= float(np.mean(np.sum(pb * eq, axis=(1, 2))))
        d_logits -= pb * (eq - np.sum(pb * eq, axis=-1, keepdims=True)) / B
    d_u = np.zeros_like(p)
    np.add.at(d_u, inv, d_logits)
    return loss, a.policy.backward(cache, d_u)


def _adam(opt: AdamState | None, params, cfg: "TrainConfig") -> AdamState:
    return opt if opt is not None else AdamState.for_params(params, lr=cfg.lr, weight_decay=cfg.l2)


def policy_update(a: ActorSet, batch: EpisodeBatch, advantages, cfg: "TrainConfig", n_states: int,
                  beta: float | None = None, expected_q=None) -> tuple[ActorSet, float]:
    """One clipped Adam step on the policy loss."""
    beta = cfg.entropy_coef if beta is None else beta
    loss, grads = policy_loss_and_grads(a, batch, advantages, beta, n_states, expected_q)
    grads, _ = clip_grad_norm(grads, cfg.grad_clip)
    a.opt_policy = _adam(a.opt_policy, a.policy.params, cfg)
    adam_step(a.opt_policy, a.policy.params, grads)
    a.policy.bump()
    return a, loss


def value_update(a: ActorSet, batch: EpisodeBatch, targets, cfg: "TrainConfig", n_states: int) -> float:
    """One clipped Adam step on the mean squared baseline error."""
    out, cache = mlp_forward(a.value, state_obs(batch.states, n_states))
    err = out[:, 0] - np.asarray(targets, dtype=float)
    grads, _ = clip_grad_norm(mlp_backward(a.value, cache, (2.0 * err / len(err))[:, None]), cfg.grad_clip)
    a.opt_value = _adam(a.opt_value, a.value.params, cfg)
    adam_step(a.opt_value, a.value.params, grads)
    a.value.version += 1
    return float(np.mean(err ** 2))


def td_update(c: FactoredCritic, batch: EpisodeBatch, targets, cfg: "TrainConfig",
              n_states: int) -> tuple[FactoredCritic, float]:
    """One Adam step on the squared TD loss; critic gradients clipped on their own."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    loss, grads = critic_loss_and_grads(c, batch, targets, n_states)
    grads, _ = clip_grad_norm(grads, cfg.grad_clip)
    c.opt = _adam(c.opt, c.params, cfg)
    adam_step(c.opt, c.params, grads)
    c.net.bump()
    return c, loss


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    """Hyperparameters. ``total_steps=None`` means ``u^n // 10`` environment steps.

    Every environment step is followed by one update. Actors and the state
    baseline learn from the most recent ``batch_size`` transitions. With
    ``batch_source="replay"`` the tac critic and the vdn utilities instead
    regress on ``batch_size`` transitions drawn uniformly from everything
    seen so far (iac always uses the recent window).
    ``actor_estimator`` selects the tac policy
    gradient: ``gae`` (sampled, advantages from the critic's TD residuals),
    ``expected`` (exact expectation over each agent's actions through the
    factored critic) or ``mix`` (both terms).
    """

    algo: str = "tac"
    rank: int = 2
    lr: float = 0.01
    l2: float = 0.001
    batch_size: int = 32
    total_steps: int | None = None
    entropy_coef: float = 0.1
    entropy_halvings: int = 10
    gamma: float | None = None
    lam: float = 0.8
    horizon: int | None = None
    grad_clip: float = 0.5
    r_max: float = 40.0
    seed: int = 0
    hidden: tuple = (64,)
    eps_start: float = 0.9
    eps_end: float = 0.05
    eval_every: int = 100
    m: int | None = None
    embed: bool = False
    squash: str = "sigmoid"
    actor_estimator: str = "expected"
    share_params: bool = False
    batch_source: str = "recent"

    def __post_init__(self):
        if self.batch_source not in BATCH_SOURCES:
            raise ValueError(f"batch_source must be one of {BATCH_SOURCES}")
        if self.algo not in ALGOS:
            raise ValueError(f"algo must be one of {ALGOS}")
        if self.actor_estimator not in ESTIMATORS:
            raise ValueError(f"actor_estimator must be one of {ESTIMATORS}")
        if self.rank < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("rank, batch_size and eval_every must be >= 1")
        if self.total_steps is not None and self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.gamma is not None and not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if self.lr <= 0 or self.l2 < 0 or self.grad_clip <= 0:
            raise ValueError("lr and grad_clip must be > 0, l2 >= 0")
        self.hidden = tuple(self.hidden)


class _Env:
    """Uniform stepping interface over tensor games and tabular MMDPs."""

    def __init__(self, env, rng):
        self.env, self.rng = env, rng
        self.game = isinstance(env, TensorGame)
        self.mmdp = env.as_mmdp() if self.game else env
        self.S, self.n, self.u = self.mmdp.S, self.mmdp.n, self.mmdp.u
        self.state = 0 if self.game else int(rng.integers(self.S))

    def step(self, a):
        idx = tuple(int(x) for x in a)
        s = self.state
        r = float(self.mmdp.rewards[(s,) + idx])
        if self.game:
            return s, r, 0, True
        p = self.mmdp.transitions[(s, slice(None)) + idx]
        s2 = int(min(np.searchsorted(np.cumsum(p), self.rng.random(), side="right"), self.S - 1))
        self.state = s2
        return s, r, s2, False


def greedy_value(env, joint_actions) -> float:
    """Normalized return of playing ``joint_actions[s]`` deterministically."""
    if isinstance(env, TensorGame):
        return float(env.reward[tuple(int(x) for x in joint_actions[0])])
    return policy_return(env, TabularPolicy.deterministic(joint_actions, env.n, env.u))


@dataclass
class Learner:
    """Networks of one training run (fields unused by an algorithm stay None)."""

    critic: FactoredCritic | None = None
    actors: ActorSet | None = None
    utilities: AgentNets | None = None
    opt_util: AdamState | None = field(default=None, repr=False)


def make_learner(cfg: TrainConfig, S: int, n: int, u: int) -> Learner:
    rng = np.random.default_rng(cfg.seed)
    seeds = rng.integers(2 ** 63, size=3)
    d = n + S
    if cfg.algo == "vdn":
        return Learner(utilities=AgentNets.init(n, (d, *cfg.hidden, u), int(seeds[0]), cfg.share_params))
    actors = ActorSet.init(d, S, u, int(seeds[1]), cfg.hidden, cfg.share_params)
    critic = None
    if cfg.algo == "tac":
        critic = FactoredCritic.init(d, u, cfg.rank, int(seeds[2]), cfg.m, cfg.hidden, cfg.squash, cfg.embed,
                                     n, cfg.share_params)
    return Learner(critic=critic, actors=actors)


def greedy_actions(learner: Learner, S: int, n: int) -> np.ndarray:
    obs = agent_obs(np.arange(S), n, S).reshape(S * n, -1)
    net = learner.utilities if learner.utilities is not None else learner.actors.policy
    return np.argmax(net(obs), axis=1).reshape(S, n)


def _vdn_update(learner: Learner, batch: EpisodeBatch, gamma: float, cfg: TrainConfig, S: int,
                dones: np.ndarray | None = None) -> float:
    """One Q-learning step on the summed utilities; ``dones`` overrides ``batch.dones``."""
    n = batch.actions.shape[1]
    dones = batch.dones if dones is None else dones
    obs, inv = _unique_rows(batch.states, n, S)
    out, cache = learner.utilities.forward(obs)
    ub = out[inv]  # (B, n, u)
    q = np.take_along_axis(ub, batch.actions[..., None], axis=-1)[..., 0].sum(axis=1)
    nobs, ninv = _unique_rows(batch.next_states, n, S)
    nxt = learner.utilities(nobs).max(axis=1)[ninv].sum(axis=1)
    y = batch.rewards + gamma * np.where(dones, 0.0, nxt)
    err = q - y
    d_ub = np.zeros_like(ub)
    np.put_along_axis(d_ub, batch.actions[..., None], (2.0 * err / len(err))[:, None, None], axis=-1)
    d_out = np.zeros_like(out)
    np.add.at(d_out, inv, d_ub)
    grads, _ = clip_grad_norm(learner.utilities.backward(cache, d_out), cfg.grad_clip)
    learner.opt_util = _adam(learner.opt_util, learner.utilities.params, cfg)
    adam_step(learner.opt_util, learner.utilities.params, grads)
    learner.utilities.bump()
    return float(np.mean(err ** 2))


def _actor_critic_update(learner: Learner, batch: EpisodeBatch, gamma: float, cfg: TrainConfig,
                         S: int, beta: float, v_last: float, replay=None) -> float:
    """Baseline, critic and actor updates for tac / iac.

    ``batch`` is the most recent on-policy window. ``replay``, when given,
    is ``(batch, one_step_targets_fn)`` of transitions drawn from all past
    data for the critic regression.
    """
    a, c = learner.actors, learner.critic
    values = a.value(state_obs(batch.states, S))[:, 0]
    targets = multi_step_targets(batch, values, gamma, cfg.lam, cfg.horizon, v_last)
    td_loss = value_update(a, batch, targets, cfg, S)
    if cfg.algo == "iac":
        policy_update(a, batch, targets - values, cfg, S, beta)
        return td_loss
    if replay is None:
        c, td_loss = td_update(c, batch, targets, cfg, S)
    else:
        rb, rb_targets, _ = replay
        c, td_loss = td_update(c, rb, rb_targets(a), cfg, S)
    advantages, expected = None, None
    if cfg.actor_estimator in ("gae", "mix"):
        q, _ = _critic_batch(c, batch.states, batch.actions, S)
        advantages = gae_advantages(batch, clip_q(q, cfg.r_max), values, gamma, cfg.lam, v_last)
    if cfg.actor_estimator in ("expected", "mix"):
        n = batch.actions.shape[1]
        uniq, inv = np.unique(batch.states, return_inverse=True)
        obs = agent_obs(uniq, n, S)
        probs = a.probs(obs.reshape(-1, obs.shape[-1])).reshape(len(uniq), n, -1)
        marg = np.stack([critic_marginals(c, o, p) for o, p in zip(obs, probs)])
        expected = clip_q(marg, cfg.r_max)[inv]
    policy_update(a, batch, advantages, cfg, S, beta, expected)
    return td_loss


def _replay_batch(rng, t: int, cfg: TrainConfig, S: int, gamma: float, arrays):
    """Uniform sample of past transitions with one-step targets ``r + gamma V(s')``.

    Samples are not contiguous, so the batch is marked as length-1 episodes;
    the real terminal flags only enter through the targets.
    """
    states, actions, rewards, nexts, dones = arrays
    idx = rng.integers(0, t + 1, size=cfg.batch_size)
    b = EpisodeBatch(states[idx], actions[idx], rewards[idx], nexts[idx], np.ones(len(idx), bool))

    def targets(actors: ActorSet) -> np.ndarray:
        if gamma == 0:
            return rewards[idx]
        v_next = actors.value(state_obs(nexts[idx], S))[:, 0]
        return rewards[idx] + gamma * np.where(dones[idx], 0.0, v_next)

    return b, targets, dones[idx]


def train(cfg: TrainConfig, env, learner: Learner | None = None, stop_at: float | None = None) -> list[dict]:
    """Run one training job; rows every ``eval_every`` steps plus step 0 and the end.

    With ``stop_at`` the run ends at the first evaluation whose return
    reaches it (schedules still use the full ``total_steps``).

    ``mean_return`` is the normalized return of the greedy joint policy
    (per-agent argmax) on the true environment, computed exactly.
    """
    rng = np.random.default_rng(cfg.seed)
    e = _Env(env, np.random.default_rng(rng.integers(2 ** 63)))
    S, n, u = e.S, e.n, e.u
    total = u ** n // 10 if cfg.total_steps is None else cfg.total_steps
    gamma = e.mmdp.gamma if cfg.gamma is None else cfg.gamma
    learner = learner or make_learner(cfg, S, n, u)
    act_rng = np.random.default_rng(rng.integers(2 ** 63))
    start = time.perf_counter()
    states = np.zeros(total, np.int64)
    actions = np.zeros((total, n), np.int64)
    rewards = np.zeros(total)
    nexts = np.zeros(total, np.int64)
    dones = np.zeros(total, bool)

    def row(step, td_loss):
        return dict(step=step, seed=cfg.seed, algo=cfg.algo,
                    mean_return=greedy_value(env, greedy_actions(learner, S, n)),
                    td_loss=td_loss, entropy_coef=entropy_coef(cfg, min(step, max(total - 1, 0)), total),
                    wallclock_ms=1000.0 * (time.perf_counter() - start))

    replay_on = cfg.batch_source == "replay" and cfg.algo != "iac"
    rows = [row(0, float("nan"))]
    td_loss = float("nan")
    for t in range(total):
        obs = agent_obs(e.state, n, S)
        if cfg.algo == "vdn":
            greedy = np.argmax(learner.utilities(obs), axis=1)
            explore = act_rng.random(n) < epsilon_schedule(cfg, t, total)
            a = np.where(explore, act_rng.integers(u, size=n), greedy)
        else:
            cdf = np.cumsum(learner.actors.probs(obs), axis=1)
            cdf[:, -1] = 1.0
            a = (act_rng.random((n, 1)) >= cdf).sum(axis=1)
        states[t], rewards[t], nexts[t], dones[t] = e.step(a)
        actions[t] = a
        lo = max(0, t + 1 - cfg.batch_size)
        batch = EpisodeBatch(states[lo:t + 1], actions[lo:t + 1], rewards[lo:t + 1], nexts[lo:t + 1],
                             dones[lo:t + 1])
        replay = None
        if replay_on:
            replay = _replay_batch(act_rng, t, cfg, S, gamma, (states, actions, rewards, nexts, dones))
        if cfg.algo == "vdn":
            td_loss = (_vdn_update(learner, batch, gamma, cfg, S) if replay is None
                       else _vdn_update(learner, replay[0], gamma, cfg, S, replay[2]))
        else:
            v_last = 0.0 if dones[t] else float(learner.actors.value(state_obs([nexts[t]], S))[0, 0])
            td_loss = _actor_critic_update(learner, batch, gamma, cfg, S, entropy_coef(cfg, t, total), v_last,
                                           replay)
        if (t + 1) % cfg.eval_every == 0 or t + 1 == total:
            rows.append(row(t + 1, td_loss))
            if stop_at is not None and rows[-1]["mean_return"] >= stop_at:
                break
    return rows


# ---------------------------------------------------------------------------
# representation relations


def fql_to_cp(q_contribs, f_vectors) -> CPModel:
    """CP model of ``sum_i q_i(u_i) + sum_{i<j} <f_i(u_i), f_j(u_j)>``.

    One rank-1 term per agent utility (ones on the other modes) and one per
    pair and interaction coordinate, so the rank is ``d * C(n, 2) + n``.
    """
    q = [np.asarray(x, dtype=float) for x in q_contribs]
    f = [np.atleast_2d(np.asarray(x, dtype=float)) for x in f_vectors]
    n = len(q)
    if n < 2:
        raise ValueError("need at least two agents")
    if len(f) != n:
        raise ValueError("one utility vector and one interaction matrix per agent")
    u, d = len(q[0]), f[0].shape[1]
    if any(len(x) != u for x in q) or any(x.shape != (u, d) for x in f):
        raise ValueError("inconsistent action counts or interaction dimension")
    cols = [[] for _ in range(n)]
    for i in range(n):
        for j in range(n):
            cols[j].append(q[i] if j == i else np.ones(u))
    for i in range(n):
        for j in range(i + 1, n):
            for l in range(d):
                for mode in range(n):
                    cols[mode].append(f[i][:, l] if mode == i else f[j][:, l] if mode == j else np.ones(u))
    return CPModel.from_factors([np.stack(c, axis=1) for c in cols])


def fql_dense(q_contribs, f_vectors) -> np.ndarray:
    """Brute-force FQL joint values, for checking :func:`fql_to_cp`."""
    q = [np.asarray(x, dtype=float) for x in q_contribs]
    f = [np.atleast_2d(np.asarray(x, dtype=float)) for x in f_vectors]
    n, u = len(q), len(q[0])
    out = np.zeros((u,) * n)
    for a in np.ndindex(*out.shape):
        out[a] = sum(q[i][a[i]] for i in range(n)) + sum(
            f[i][a[i]] @ f[j][a[j]] for i in range(n) for j in range(i + 1, n))
    return out


VDN_CLAMP = 20.0


def vdn_exp_rank1_check(utilities) -> float:
    """Relative residual of a rank-1 CP fit to ``exp(sum_i U_i(u_i))``.

    Utilities are clamped to ``|U| <= 20`` so the exponent cannot overflow.
    """
    us = [np.clip(np.asarray(x, dtype=float), -VDN_CLAMP, VDN_CLAMP) for x in utilities]
    if not us:
        raise ValueError("need at least one agent")
    q = us[0]
    for x in us[1:]:
        q = np.add.outer(q, x)
    t = np.exp(np.atleast_1d(q))
    if t.ndim == 1:
        return 0.0
    fit = cp_als(t, 1, ALSOptions(init_scheme="hosvd-like", max_sweeps=50))
    return float(np.linalg.norm(cp_reconstruct(fit) - t) / np.linalg.norm(t))
