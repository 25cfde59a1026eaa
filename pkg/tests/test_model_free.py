import itertools
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tesseract_lab.approx import MLP, grad_check
from tesseract_lab.mdp_env import EpisodeBatch, gen_lowrank_mmdp, gen_tensor_game
from tesseract_lab.model_free import (
    ActorSet,
    AgentNets,
    FactoredCritic,
    TrainConfig,
    agent_obs,
    clip_q,
    critic_factors,
    critic_loss_and_grads,
    critic_marginals,
    critic_q,
    critic_tensor,
    entropy_coef,
    epsilon_schedule,
    fql_dense,
    fql_to_cp,
    gae_advantages,
    multi_step_targets,
    policy_loss_and_grads,
    policy_update,
    _replay_batch,
    td_update,
    train,
    vdn_exp_rank1_check,
)
from tesseract_lab.tensor_core import cp_reconstruct, inner_product_full, outer_product

SETTINGS = settings(max_examples=20, deadline=None, derandomize=True)


def batch_of(rewards, states=None, actions=None, dones=None):
    T = len(rewards)
    states = np.zeros(T, np.int64) if states is None else np.asarray(states)
    nexts = np.append(states[1:], 0)
    actions = np.zeros((T, 1), np.int64) if actions is None else actions
    dones = np.zeros(T, bool) if dones is None else dones
    return EpisodeBatch(states, actions, rewards, nexts, dones)


def random_critic(seed, n, u, k, squash="sigmoid", embed=False, shared=True, S=1):
    rng = np.random.default_rng(seed)
    m = u + (2 if embed else 0)
    c = FactoredCritic.init(n + S, u, k, seed, m=m, hidden=(5,), squash=squash, embed=embed, n=n,
                            shared=shared)
    # move away from the near-constant initialization so factors differ
    for net in c.net.nets:
        net.set_params([p + rng.standard_normal(p.shape) for p in net.params])
    c.w = rng.standard_normal(k)
    return c


# ---------------------------------------------------------------------------
# critic evaluation


def test_critic_q_hand_example():
    # linear factor map: agent 0 -> [1, 0], agent 1 -> [0, 1]
    net = AgentNets([MLP((3, 2), [np.array([[1.0, 0, 0], [0, 1.0, 0]])], [np.zeros(2)])], 2)
    c = FactoredCritic(net, np.array([2.0]), np.eye(2), k=1, m=2, u=2, squash="none")
    obs = agent_obs(0, 2, 1)
    assert critic_q(c, obs, (0, 1)) == 2.0
    assert critic_q(c, obs, (1, 1)) == 0.0
    c.w = np.zeros(1)
    assert all(critic_q(c, obs, a) == 0.0 for a in itertools.product(range(2), repeat=2))
    with pytest.raises(IndexError):
        critic_q(c, obs, (0, 2))


@SETTINGS
@given(st.integers(0, 2 ** 32), st.integers(1, 4), st.integers(2, 4), st.integers(1, 3),
       st.sampled_from(["sigmoid", "unit", "none"]), st.booleans(), st.booleans())
def test_critic_matches_materialized(seed, n, u, k, squash, embed, shared):
    c = random_critic(seed, n, u, k, squash, embed, shared)
    obs = agent_obs(0, n, 1)
    t = critic_tensor(c, obs)
    rng = np.random.default_rng(seed)
    for _ in range(5):
        a = tuple(rng.integers(u, size=n))
        onehot = outer_product([np.eye(u)[x] for x in a])
        assert abs(critic_q(c, obs, a) - inner_product_full(t, onehot)) <= 1e-9


def test_critic_marginals_match_materialized():
    rng = np.random.default_rng(0)
    c = random_critic(1, 3, 4, 2)
    obs = agent_obs(0, 3, 1)
    probs = rng.dirichlet(np.ones(4), 3)
    t = critic_tensor(c, obs)
    marg = critic_marginals(c, obs, probs)
    np.testing.assert_allclose(marg[0], np.einsum("abc,b,c->a", t, probs[1], probs[2]), atol=1e-12)
    np.testing.assert_allclose(marg[2], np.einsum("abc,a,b->c", t, probs[0], probs[1]), atol=1e-12)


def test_factor_squash_and_init():
    c = FactoredCritic.init(6, 10, 2, seed=0, n=5)
    g, (_, raw) = critic_factors(c, agent_obs(0, 5, 1))
    assert np.all((g > 0) & (g < 2))
    assert 0.005 <= raw.std() <= 0.02
    np.testing.assert_array_equal(c.w, 1.0)
    trained = random_critic(3, 4, 3, 2)
    g, _ = critic_factors(trained, agent_obs(0, 4, 1))
    assert np.all((g > 0) & (g < 2))


def test_factored_path_faster_than_materialization():
    n, m, k = 8, 8, 4
    c = FactoredCritic.init(n + 1, m, k, seed=0, n=n)
    obs = agent_obs(0, n, 1)
    a = tuple(range(n))
    fast, slow = [], []
    for _ in range(3):
        t0 = time.perf_counter()
        q1 = critic_q(c, obs, a)
        fast.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        q2 = critic_tensor(c, obs)[a]
        slow.append(time.perf_counter() - t0)
    assert abs(q1 - q2) <= 1e-9 * max(1.0, abs(q2))
    assert np.median(slow) >= 100 * np.median(fast)


# ---------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("squash,embed,shared", [("sigmoid", False, True), ("unit", True, True),
                                                 ("none", True, False), ("sigmoid", False, False)])
def test_critic_gradient(squash, embed, shared):
    rng = np.random.default_rng(5)
    n, u, S = 3, 3, 2
    c = random_critic(7, n, u, 2, squash, embed, shared, S=S)
    states = rng.integers(S, size=8)
    b = EpisodeBatch(states, rng.integers(u, size=(8, n)), rng.random(8), states, np.ones(8, bool))
    targets = rng.random(8)

    def f(params):
        trial = FactoredCritic(AgentNets([net.copy() for net in c.net.nets], n), c.w.copy(), c.emb.copy(),
                               c.k, c.m, c.u, c.squash, c.embed)
        ps = trial.params
        for dst, src in zip(ps, params):
            dst[...] = src
        return critic_loss_and_grads(trial, b, targets, S)

    assert grad_check(f, c.params, n_probe=40, seed=1) <= 1e-4


def test_policy_gradient():
    rng = np.random.default_rng(6)
    n, u, S = 3, 4, 2
    a = ActorSet.init(n + S, S, u, seed=2, hidden=(6,))
    for net in a.policy.nets:
        net.set_params([p + 0.5 * rng.standard_normal(p.shape) for p in net.params])
    states = rng.integers(S, size=10)
    b = EpisodeBatch(states, rng.integers(u, size=(10, n)), rng.random(10), states, np.ones(10, bool))
    adv, eq = rng.standard_normal(10), rng.random((10, n, u))

    def f(params):
        trial = ActorSet(AgentNets([net.copy() for net in a.policy.nets], n), a.value)
        for dst, src in zip(trial.policy.params, params):
            dst[...] = src
        return policy_loss_and_grads(trial, b, adv, 0.1, S, expected_q=eq)

    assert grad_check(f, a.policy.params, n_probe=40, seed=3) <= 1e-4


# ---------------------------------------------------------------------------
# targets and advantages


def test_multi_step_examples():
    b = batch_of([1.0, 1.0])
    t = multi_step_targets(b, [0.3, 0.5], gamma=0.5, lam=0.5, horizon=2, v_last=0.5)
    assert t[0] == pytest.approx(1.375, abs=1e-12)
    # last step has a single term whatever lambda is
    assert t[1] == pytest.approx(1.0 + 0.5 * 0.5, abs=1e-12)
    t0 = multi_step_targets(b, [0.3, 0.5], gamma=0.5, lam=0.0, v_last=0.5)
    np.testing.assert_allclose(t0, [1.25, 1.25])
    with pytest.raises(ValueError):
        multi_step_targets(batch_of([]), [], 0.5, 0.5)


def test_multi_step_stops_at_terminal():
    b = batch_of([1.0, 2.0, 4.0], dones=np.array([True, False, False]))
    t = multi_step_targets(b, [9.0, 9.0, 9.0], gamma=0.9, lam=0.7, v_last=0.0)
    assert t[0] == 1.0


def brute_targets(r, v, v_last, gamma, lam):
    T = len(r)
    vals = list(v) + [v_last]
    out = []
    for t in range(T):
        ks = range(1, T - t + 1)
        g = [sum(gamma ** j * r[t + j] for j in range(k)) + gamma ** k * vals[t + k] for k in ks]
        w = [lam ** k for k in ks]
        out.append(np.dot(w, g) / sum(w))
    return np.array(out)


@SETTINGS
@given(st.integers(0, 2 ** 32), st.integers(1, 6), st.floats(0, 0.99), st.floats(0.05, 1.0))
def test_multi_step_matches_brute_force(seed, T, gamma, lam):
    rng = np.random.default_rng(seed)
    r, v, vl = rng.random(T), rng.random(T), float(rng.random())
    np.testing.assert_allclose(multi_step_targets(batch_of(r), v, gamma, lam, v_last=vl),
                               brute_targets(r, v, vl, gamma, lam), atol=1e-12)


def test_gae_examples():
    # delta_0 = 0.2, delta_1 = -0.1 with gamma = 0.9, lambda = 0.5
    b = batch_of([0.2 + 0.0, -0.1])
    adv = gae_advantages(b, q_values=[0.0, 0.0], values=[0.0, 0.0], gamma=0.9, lam=0.5, v_last=0.0)
    assert adv[0] == pytest.approx(0.155, abs=1e-12)
    assert adv[1] == pytest.approx(-0.1, abs=1e-12)
    rng = np.random.default_rng(0)
    r, q, v = rng.random(5), rng.random(5), rng.random(5)
    b = batch_of(r)
    delta = r + 0.9 * np.append(q[1:], 0.3) - v
    np.testing.assert_allclose(gae_advantages(b, q, v, 0.9, 0.0, v_last=0.3), delta, atol=1e-12)
    np.testing.assert_allclose(gae_advantages(batch_of(np.zeros(4)), np.zeros(4), np.zeros(4), 0.9, 0.7),
                               0.0)
    with pytest.raises(ValueError):
        gae_advantages(b, q[:3], v, 0.9, 0.5)


def test_clip_q():
    assert clip_q(5, 40) == 5
    assert clip_q(100, 40) == 40
    assert clip_q(-1, 40) == -1


def test_schedules():
    cfg = TrainConfig(entropy_coef=0.1)
    for t in range(0, 1000, 7):
        assert entropy_coef(cfg, t, 1000) == 0.1 * 2.0 ** (-math.floor(10 * t / 1000))
    assert epsilon_schedule(cfg, 0, 1000) == 0.9
    assert epsilon_schedule(cfg, 250, 1000) == pytest.approx(0.475)
    assert epsilon_schedule(cfg, 500, 1000) == 0.05
    assert epsilon_schedule(cfg, 999, 1000) == 0.05


# ---------------------------------------------------------------------------
# updates


def test_td_update_at_fixed_point_only_decays():
    c = FactoredCritic.init(4, 3, 2, seed=1, n=3)
    b = EpisodeBatch([0], [[0, 1, 2]], [0.0], [0], [True])
    before = [p.copy() for p in c.params]
    target = [critic_q(c, agent_obs(0, 3, 1), (0, 1, 2))]
    c, loss = td_update(c, b, target, TrainConfig(l2=0.0), 1)
    assert loss == pytest.approx(0.0, abs=1e-20)
    for p, q in zip(before, c.params):
        np.testing.assert_array_equal(p, q)


def test_td_update_regresses_single_transition():
    c = FactoredCritic.init(4, 3, 2, seed=2, n=3)
    b = EpisodeBatch([0], [[2, 0, 1]], [0.7], [0], [True])
    cfg = TrainConfig()
    losses = [td_update(c, b, [0.7], cfg, 1)[1] for _ in range(100)]
    assert losses[-1] < 1e-2 * losses[0]


def test_policy_update_examples():
    cfg = TrainConfig(entropy_coef=0.0, l2=0.0)
    a = ActorSet.init(2, 1, 2, seed=0, hidden=(4,))
    b = EpisodeBatch([0, 0], [[0], [1]], [1.0, 0.0], [0, 0], [True, True])
    before = [p.copy() for p in a.policy.params]
    policy_update(a, b, np.zeros(2), cfg, 1, beta=0.0)
    for p, q in zip(before, a.policy.params):
        np.testing.assert_array_equal(p, q)
    probs = []
    for _ in range(50):
        policy_update(a, b, np.array([1.0, -1.0]), cfg, 1, beta=0.0)
        probs.append(a.probs(agent_obs(0, 1, 1))[0, 0])
    assert all(q > p for p, q in zip(probs, probs[1:]))
    with pytest.raises(ValueError):
        policy_update(a, b, np.zeros(3), cfg, 1)


def test_critic_fits_frozen_policy_data():
    # a frozen uniform policy visits every joint action equally, so the
    # expected regression loss is the full-batch loss over all 27 actions
    g = gen_tensor_game(3, 3, 2, 0)
    c = FactoredCritic.init(4, 3, 2, seed=0, n=3)
    a = np.stack(np.unravel_index(np.arange(27), (3, 3, 3)), axis=1)
    z = np.zeros(27, np.int64)
    b = EpisodeBatch(z, a, g.reward[tuple(a.T)], z, np.ones(27, bool))
    cfg = TrainConfig(l2=0.0, grad_clip=5.0)
    for _ in range(2000):
        td_update(c, b, b.rewards, cfg, 1)
    err = np.abs(critic_tensor(c, agent_obs(0, 3, 1)) - g.reward).max()
    assert err <= 0.01


def test_critic_complete_at_full_rank():
    # linear factor map on a fixed one-hot observation = free parameters
    n, u = 2, 3
    c = FactoredCritic.init(n + 1, u, u ** (n - 1), seed=0, hidden=(), squash="unit", n=n)
    target = np.random.default_rng(1).standard_normal((u, u))
    acts = np.array(list(itertools.product(range(u), repeat=n)))
    z = np.zeros(len(acts), np.int64)
    b = EpisodeBatch(z, acts, target[tuple(acts.T)], z, np.ones(len(acts), bool))
    cfg = TrainConfig(l2=0.0, grad_clip=1e6, lr=0.01)
    for _ in range(4000):
        td_update(c, b, b.rewards, cfg, 1)
    fit = critic_tensor(c, agent_obs(0, n, 1))
    assert np.linalg.norm(fit - target) / np.linalg.norm(target) <= 1e-3


# ---------------------------------------------------------------------------
# training


def test_tac_solves_rank1_game():
    g = gen_tensor_game(2, 3, 1, 0)
    rows = train(TrainConfig(algo="tac", rank=1, total_steps=500, seed=0), g)
    assert rows[-1]["mean_return"] == pytest.approx(1.0, abs=0.05)
    assert [r["step"] for r in rows] == list(range(0, 501, 100))


def test_zero_steps_gives_initial_point():
    g = gen_tensor_game(2, 3, 1, 0)
    rows = train(TrainConfig(total_steps=0), g)
    assert len(rows) == 1 and rows[0]["step"] == 0


@pytest.mark.parametrize("algo", ["tac", "iac", "vdn"])
def test_training_is_deterministic(algo):
    g = gen_tensor_game(3, 4, 2, 1)
    cfg = TrainConfig(algo=algo, total_steps=200, seed=3, share_params=False)
    a, b = train(cfg, g), train(cfg, g)
    for x, y in zip(a, b):
        assert {k: v for k, v in x.items() if k != "wallclock_ms"} == \
               pytest.approx({k: v for k, v in y.items() if k != "wallclock_ms"}, nan_ok=True)


@pytest.mark.parametrize("algo", ["tac", "iac", "vdn"])
def test_training_on_mmdp(algo):
    m = gen_lowrank_mmdp(3, 2, 3, 1, 2, 0.9, 0.1, 0)
    rows = train(TrainConfig(algo=algo, total_steps=300, seed=0), m)
    assert all(0.0 <= r["mean_return"] <= 1.0 for r in rows)
    assert np.isfinite(rows[-1]["td_loss"])


@pytest.mark.parametrize("algo,estimator", [("tac", "gae"), ("tac", "mix"), ("vdn", "expected")])
def test_training_with_replay_and_other_estimators(algo, estimator):
    m = gen_lowrank_mmdp(2, 2, 3, 1, 1, 0.8, 0.1, 1)
    rows = train(TrainConfig(algo=algo, total_steps=150, seed=1, batch_source="replay",
                             actor_estimator=estimator), m)
    assert len(rows) == 3 and np.isfinite(rows[-1]["td_loss"])


def test_replay_targets_use_true_terminal_flags():
    a = ActorSet.init(3, 2, 2, seed=0, hidden=(4,))
    arrays = (np.array([0, 1, 0]), np.zeros((3, 1), np.int64), np.array([1.0, 2.0, 3.0]),
              np.array([1, 0, 1]), np.array([False, True, False]))
    cfg = TrainConfig(batch_size=50)
    b, targets, dones = _replay_batch(np.random.default_rng(0), 2, cfg, 2, 0.5, arrays)
    v = a.value(np.eye(2))[:, 0]
    expected = np.array([1.0 + 0.5 * v[1], 2.0, 3.0 + 0.5 * v[1]])
    rows = (b.rewards - 1).astype(int)
    np.testing.assert_allclose(targets(a), expected[rows], atol=1e-12)
    np.testing.assert_array_equal(dones, arrays[4][rows])
    assert np.all(b.dones)


def test_stop_at_ends_early():
    g = gen_tensor_game(2, 3, 1, 0)
    rows = train(TrainConfig(algo="tac", rank=1, total_steps=500, seed=0, eval_every=20), g, stop_at=0.0)
    assert [r["step"] for r in rows] == [0, 20]


def test_config_validation():
    for bad in (dict(algo="qmix"), dict(rank=0), dict(gamma=1.0), dict(lam=1.5), dict(actor_estimator="x"),
                dict(batch_source="disk"), dict(total_steps=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ---------------------------------------------------------------------------
# representation relations


def test_fql_examples():
    rng = np.random.default_rng(0)
    q = [rng.standard_normal(3) for _ in range(3)]
    zero_f = [np.zeros((3, 2)) for _ in range(3)]
    additive = q[0][:, None, None] + q[1][None, :, None] + q[2][None, None, :]
    np.testing.assert_allclose(cp_reconstruct(fql_to_cp(q, zero_f)), additive, atol=1e-12)
    f1, f2 = rng.standard_normal((4, 1)), rng.standard_normal((4, 1))
    model = fql_to_cp([np.zeros(4), np.zeros(4)], [f1, f2])
    np.testing.assert_allclose(cp_reconstruct(model), f1 @ f2.T, atol=1e-12)
    with pytest.raises(ValueError):
        fql_to_cp([np.zeros(3)], [np.zeros((3, 1))])


@SETTINGS
@given(st.integers(0, 2 ** 32), st.integers(2, 4), st.integers(1, 3), st.integers(2, 3))
def test_fql_construction_exact(seed, n, d, u):
    rng = np.random.default_rng(seed)
    q = [rng.standard_normal(u) for _ in range(n)]
    f = [rng.standard_normal((u, d)) for _ in range(n)]
    model = fql_to_cp(q, f)
    assert model.rank == d * math.comb(n, 2) + n
    np.testing.assert_allclose(cp_reconstruct(model), fql_dense(q, f), atol=1e-10)


def test_vdn_examples():
    assert vdn_exp_rank1_check([[0, np.log(2)], [0, np.log(3)]]) <= 1e-8
    assert vdn_exp_rank1_check([np.zeros(3), np.zeros(3)]) <= 1e-15
    assert vdn_exp_rank1_check([np.full(2, 1e6), np.zeros(2)]) <= 1e-8


@SETTINGS
@given(st.integers(0, 2 ** 32), st.integers(1, 4), st.integers(2, 4))
def test_vdn_exp_is_rank1(seed, n, u):
    rng = np.random.default_rng(seed)
    assert vdn_exp_rank1_check([rng.uniform(-1, 1, u) for _ in range(n)]) <= 1e-6
