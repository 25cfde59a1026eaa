"""Experiment orchestration: seed sweeps, CSV curves, ablations, check suites.

Every (algo, seed) cell is independent. The environment is built from the
base seed, so all algorithms in an experiment face the same game per seed;
the learner seed is ``hash64(experiment id, algo, base seed)``.
"""
from __future__ import annotations

import csv
import hashlib
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .approx import MLP, grad_check, mlp_backward, mlp_forward
from .bellman import TabularPolicy, exact_policy_eval, projected_policy_eval
from .io import make_env
from .mdp_env import EpisodeBatch, gen_lowrank_mmdp, gen_tensor_game
from .model_based import DynamicsEstimate, q_error_bound, tv_and_bounds
from .model_free import (
    ActorSet,
    AgentNets,
    FactoredCritic,
    TrainConfig,
    agent_obs,
    critic_loss_and_grads,
    critic_q,
    critic_tensor,
    fql_dense,
    fql_to_cp,
    policy_loss_and_grads,
    train,
    vdn_exp_rank1_check,
)
from .tensor_core import (
    ALSOptions,
    CPModel,
    ObservedEntrySet,
    cp_als,
    cp_complete,
    cp_reconstruct,
    factored_inner_product,
    frobenius_norm,
    inner_product_full,
    outer_product,
)

RAW_COLUMNS = ("step", "seed", "algo", "mean_return", "td_loss", "entropy_coef")
AGG_COLUMNS = ("step", "algo", "n_seeds", "mean_return_mean", "mean_return_std")
SUITES = ("tensor", "bellman", "bounds", "gradients", "relations")
NOT_REACHED = -1
THRESHOLD = 0.9


def hash64(*parts) -> int:
    """Stable 64-bit hash of the parts' string forms."""
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass
class ExperimentConfig:
    """One sweep over algorithms and seeds.

    ``env`` is an environment spec mapping (see ``io.make_env``); its seed is
    replaced by each base seed. ``train`` holds TrainConfig fields shared by
    all algorithms and ``overrides`` per-algorithm ones. Learner seeds hash
    ``seed_namespace`` (default: the id), so ablation arms that share a
    namespace are seed-matched.
    """

    id: str
    env: dict
    algos: list = field(default_factory=lambda: ["tac", "iac", "vdn"])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    train: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)
    out_dir: str = "runs"
    workers: int = 1
    seed_namespace: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("experiment id must be non-empty")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be unique")
        if any(not 0 <= int(s) < 2 ** 64 for s in self.seeds):
            raise ValueError("seeds must be 64-bit unsigned integers")
        if not self.algos or len(set(self.algos)) != len(self.algos):
            raise ValueError("algos must be a non-empty list without repeats")
        known = {f.name for f in fields(TrainConfig)}
        for opts in [self.train, *self.overrides.values()]:
            bad = set(opts) - known
            if bad:
                raise ValueError(f"unknown training options {sorted(bad)}")
        # validate every cell's config up front
        for algo in self.algos:
            self.train_config(algo, self.seeds[0])

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown experiment keys {sorted(bad)}")
        return cls(**d)

    def train_config(self, algo: str, seed: int) -> TrainConfig:
        opts = {**self.train, **self.overrides.get(algo, {})}
        if "hidden" in opts:
            opts["hidden"] = tuple(opts["hidden"])
        return TrainConfig(algo=algo, seed=hash64(self.seed_namespace or self.id, algo, seed), **opts)

    def env_spec(self, seed: int) -> dict:
        return {**self.env, "seed": int(seed)}


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return x


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _run_cell(args):
    cfg, algo, seed, stop_at = args
    env = make_env(cfg.env_spec(seed))
    t0 = time.perf_counter()
    rows = train(cfg.train_config(algo, seed), env, stop_at=stop_at)
    elapsed = time.perf_counter() - t0
    for r in rows:
        r["seed"] = seed
    return algo, seed, rows, elapsed


def _map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, jobs))


def aggregate(curves: dict) -> list[dict]:
    """Per (algo, step) mean and population std across seeds."""
    out = []
    for algo in dict.fromkeys(a for a, _ in curves):
        by_step = {}
        for (a, _), rows in curves.items():
            if a != algo:
                continue
            for r in rows:
                by_step.setdefault(r["step"], []).append(r["mean_return"])
        for step in sorted(by_step):
            v = np.array(by_step[step])
            out.append(dict(step=step, algo=algo, n_seeds=len(v), mean_return_mean=float(v.mean()),
                            mean_return_std=float(v.std())))
    return out


def run_experiment(cfg: ExperimentConfig, stop_at: float | None = None) -> dict:
    """Run every (algo, seed) cell and write the CSVs.

    Files: ``<id>/<algo>_seed<seed>.csv`` per cell (no wallclock column, so
    reruns are bitwise identical), ``<id>/aggregate.csv`` and
    ``<id>/timing.csv``. Returns the curves and file paths.
    """
    out = Path(cfg.out_dir) / cfg.id
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, algo, seed, stop_at) for algo in cfg.algos for seed in cfg.seeds]
    results = _map(_run_cell, jobs, cfg.workers)
    curves, raw_paths, timing = {}, [], []
    for algo, seed, rows, elapsed in results:
        curves[(algo, seed)] = rows
        path = out / f"{algo}_seed{seed}.csv"
        _write_csv(path, RAW_COLUMNS, rows)
        raw_paths.append(path)
        timing.append(dict(algo=algo, seed=seed, run_seed=cfg.train_config(algo, seed).seed,
                           wallclock_s=elapsed))
    agg = aggregate(curves)
    _write_csv(out / "aggregate.csv", AGG_COLUMNS, agg)
    _write_csv(out / "timing.csv", ("algo", "seed", "run_seed", "wallclock_s"), timing)
    return dict(curves=curves, aggregate=agg, raw=raw_paths, aggregate_path=out / "aggregate.csv")


def steps_to_threshold(rows, threshold: float = THRESHOLD) -> int:
    for r in rows:
        if r["mean_return"] >= threshold:
            return int(r["step"])
    return NOT_REACHED


def _ablation(cfg: ExperimentConfig, values, label: str, make, threshold: float, stop: bool) -> dict:
    if not values:
        raise ValueError("need at least one value to ablate")
    table = {seed: {"seed": seed} for seed in cfg.seeds}
    for v in values:
        sub = make(v)
        res = run_experiment(sub, stop_at=threshold if stop else None)
        for seed in cfg.seeds:
            rows = res["curves"][("tac", seed)]
            table[seed][f"{label}_{v}"] = steps_to_threshold(rows, threshold)
            table[seed][f"final_{label}_{v}"] = rows[-1]["mean_return"]
    columns = ["seed"] + [f"{label}_{v}" for v in values] + [f"final_{label}_{v}" for v in values]
    path = Path(cfg.out_dir) / cfg.id / f"{label}_ablation.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [table[s] for s in cfg.seeds]
    _write_csv(path, columns, rows)
    return dict(rows=rows, path=path, columns=columns)


def rank_ablation(cfg: ExperimentConfig, ranks, threshold: float = THRESHOLD, stop: bool = False) -> dict:
    """tac at each critic rank; columns ``rank_<k>`` hold steps-to-threshold (-1 if never).

    ``final_rank_<k>`` holds the last evaluated return. With ``stop`` each
    run ends once it reaches the threshold.
    """
    def make(k):
        overrides = {**cfg.overrides, "tac": {**cfg.overrides.get("tac", {}), "rank": int(k)}}
        return replace(cfg, id=f"{cfg.id}-rank{k}", algos=["tac"], overrides=overrides,
                       seed_namespace=cfg.seed_namespace or cfg.id,
                       out_dir=str(Path(cfg.out_dir) / cfg.id))
    return _ablation(cfg, list(ranks), "rank", make, threshold, stop)


def env_rank_ablation(cfg: ExperimentConfig, env_ranks, model_rank: int = 2, threshold: float = THRESHOLD,
                      stop: bool = False) -> dict:
    """tac at fixed model rank against games of each generator rank; columns ``env_rank_<r>``.

    Generator ranks above the action count cannot have independent factors
    and are generated without that check.
    """
    def make(r):
        env = {**cfg.env, "rank": int(r), "allow_dependent": int(r) > int(cfg.env["actions"])}
        overrides = {**cfg.overrides, "tac": {**cfg.overrides.get("tac", {}), "rank": int(model_rank)}}
        return replace(cfg, id=f"{cfg.id}-erank{r}", env=env, algos=["tac"], overrides=overrides,
                       seed_namespace=cfg.seed_namespace or cfg.id,
                       out_dir=str(Path(cfg.out_dir) / cfg.id))
    return _ablation(cfg, list(env_ranks), "env_rank", make, threshold, stop)


# ---------------------------------------------------------------------------
# check suites


def _check(name, measured, tolerance, passed=None, **extra) -> dict:
    measured = float(measured)
    ok = measured <= tolerance if passed is None else bool(passed)
    return dict(name=name, measured=measured, tolerance=tolerance, passed=ok, **extra)


def _random_policy(rng, S, n, u) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.ones(u), (S, n)))


def _suite_tensor(seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    out = []
    worst = 0.0
    for _ in range(10):
        shape = tuple(rng.integers(2, 6, size=int(rng.integers(2, 5))))
        k = int(rng.integers(1, 4))
        t = cp_reconstruct(CPModel(np.ones(k), [rng.standard_normal((d, k)) for d in shape]))
        fit = cp_als(t, k, ALSOptions(init_scheme="hosvd-like", n_init=3, seed=seed))
        worst = max(worst, frobenius_norm(t - cp_reconstruct(fit)) / frobenius_norm(t))
    out.append(_check("cp_als_exact_rank_residual", worst, 1e-6, instances=10))

    worst = 0.0
    for _ in range(20):
        n, u, k = int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
        model = CPModel.from_factors([rng.standard_normal((u, k)) for _ in range(n)], rng.standard_normal(k))
        vecs = [rng.standard_normal(u) for _ in range(n)]
        full = inner_product_full(cp_reconstruct(model), outer_product(vecs))
        worst = max(worst, abs(factored_inner_product(model, vecs) - full))
    out.append(_check("factored_inner_product", worst, 1e-9, instances=20))

    errs, wins = [], 0
    idx_all = np.stack(np.unravel_index(np.arange(512), (8, 8, 8)), axis=1)
    for s in range(10):
        g = gen_tensor_game(3, 8, 2, seed + s)
        seen = np.random.default_rng(seed + s).choice(512, int(0.3 * 512), replace=False)
        mask = np.zeros(512, bool)
        mask[seen] = True
        obs = ObservedEntrySet((8, 8, 8), idx_all[mask], g.reward.ravel()[mask])
        est = cp_reconstruct(cp_complete(obs, 2)).ravel()
        truth = g.reward.ravel()
        errs.append(np.linalg.norm(est - truth) / np.linalg.norm(truth))
        hidden = ~mask
        cp_err = np.linalg.norm(est[hidden] - truth[hidden])
        mean_err = np.linalg.norm(truth[mask].mean() - truth[hidden])
        wins += cp_err < mean_err
    good = int(np.sum(np.array(errs) <= 0.05))
    out.append(_check("completion_error_le_0.05_seeds", good, 9, passed=good >= 9,
                      worst_error=float(max(errs)), instances=10))
    out.append(_check("completion_beats_mean_imputation_seeds", wins, 9, passed=wins >= 9, instances=10))
    return out


def _suite_bellman(seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    worst_fit, worst_eval, cases = 0.0, 0.0, []
    for i in range(20):
        S, n, u = int(rng.integers(1, 4)), int(rng.integers(2, 4)), int(rng.integers(2, 5))
        k1, k2 = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        m = gen_lowrank_mmdp(S, n, u, k1, k2, 0.9, 0.05, seed + i)
        p = _random_policy(rng, S, n, u)
        q = exact_policy_eval(m, p)
        k = k1 + k2 * S
        for s in range(S):
            fit = cp_als(q[s], k, ALSOptions(init_scheme="hosvd-like", n_init=3, seed=seed))
            worst_fit = max(worst_fit, frobenius_norm(q[s] - cp_reconstruct(fit)) / frobenius_norm(q[s]))
        cases.append((m, p, k))
    out = [_check("exact_q_rank_residual", worst_fit, 1e-5, instances=20)]
    for m, p, k in cases:
        worst_eval = max(worst_eval, float(np.abs(projected_policy_eval(m, p, k) - exact_policy_eval(m, p)).max()))
    out.append(_check("projected_eval_sufficient_rank", worst_eval, 1e-5, instances=20))
    m = gen_lowrank_mmdp(2, 3, 3, 2, 1, 0.9, 0.05, seed)
    p = _random_policy(np.random.default_rng(seed), 2, 3, 3)
    gap = float(np.abs(projected_policy_eval(m, p, k=1) - exact_policy_eval(m, p)).max())
    out.append(_check("projected_eval_rank1_gap", gap, 1e-3, passed=gap > 1e-3, direction="greater"))
    return out


def lossless_cp(t: np.ndarray) -> CPModel:
    """Exact CP form of any tensor: mode-0 fibres times one-hot selectors."""
    t = np.asarray(t, dtype=float)
    rest = t.shape[1:]
    cols = int(np.prod(rest))
    first = t.reshape(t.shape[0], cols)
    idx = np.unravel_index(np.arange(cols), rest)
    others = [np.eye(d)[:, i] for d, i in zip(rest, idx)]
    return CPModel.from_factors([first] + others)


def _perturbed_estimate(m, eps, rng) -> DynamicsEstimate:
    r = np.clip(m.rewards + rng.uniform(-eps, eps, m.rewards.shape), 0, 1)
    p = np.clip(m.transitions + rng.uniform(-eps, eps, m.transitions.shape), 0, None)
    return DynamicsEstimate(
        m.S, m.n, m.u, m.u ** (m.n - 1), [lossless_cp(x) for x in r],
        [[lossless_cp(p[s, s2]) for s2 in range(m.S)] for s in range(m.S)],
        np.ones((m.S,) + m.action_shape, dtype=np.int64))


def _suite_bounds(seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    tv_ok = q_ok = 0
    worst_ratio = 0.0
    for i in range(20):
        S, n, u = int(rng.integers(1, 4)), int(rng.integers(2, 4)), int(rng.integers(2, 4))
        gamma = float(rng.uniform(0.0, 0.95))
        m = gen_lowrank_mmdp(S, n, u, 2, 2, gamma, 0.05, seed + i)
        d = _perturbed_estimate(m, float(rng.uniform(0.001, 0.05)), rng)
        rep = tv_and_bounds(d, m, _random_policy(rng, S, n, u), gamma)
        tv_ok += rep.tv_ok and rep.tv_measured <= rep.tv_bound + 1e-12
        q_ok += rep.q_err_measured <= rep.q_err_bound + 1e-12
        if np.isfinite(rep.q_err_bound) and rep.q_err_bound > 0:
            worst_ratio = max(worst_ratio, rep.q_err_measured / rep.q_err_bound)
    return [
        _check("tv_bound_sound_instances", tv_ok, 20, passed=tv_ok == 20, instances=20),
        _check("q_bound_sound_instances", q_ok, 20, passed=q_ok == 20, instances=20,
               worst_measured_over_bound=worst_ratio),
        _check("worked_case_1.9", abs(q_error_bound(0.01, 0.01, 1.0, 4, 0.9) - 1.9), 1e-12),
    ]


def _critic_check(seed, squash, embed, shared, n_probe) -> float:
    rng = np.random.default_rng(seed)
    n, u, S = 3, 3, 2
    c = FactoredCritic.init(n + S, u, 2, seed, m=u + (2 if embed else 0), hidden=(5,), squash=squash,
                            embed=embed, n=n, shared=shared)
    for net in c.net.nets:
        net.set_params([p + rng.standard_normal(p.shape) for p in net.params])
    c.w = rng.standard_normal(2)
    states = rng.integers(S, size=8)
    b = EpisodeBatch(states, rng.integers(u, size=(8, n)), rng.random(8), states, np.ones(8, bool))
    targets = rng.random(8)

    def f(params):
        trial = FactoredCritic(AgentNets([net.copy() for net in c.net.nets], n), c.w.copy(), c.emb.copy(),
                               c.k, c.m, c.u, c.squash, c.embed)
        for dst, src in zip(trial.params, params):
            dst[...] = src
        return critic_loss_and_grads(trial, b, targets, S)

    return grad_check(f, c.params, n_probe=n_probe, seed=seed)


def _policy_check(seed, n_probe) -> float:
    rng = np.random.default_rng(seed)
    n, u, S = 3, 4, 2
    a = ActorSet.init(n + S, S, u, seed=seed, hidden=(6,), shared=False)
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

    return grad_check(f, a.policy.params, n_probe=n_probe, seed=seed)


def _mlp_check(seed, n_probe) -> float:
    rng = np.random.default_rng(seed)
    net = MLP.init((4, 8, 8, 3), seed)
    x, y = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))

    def f(params):
        trial = net.copy()
        trial.set_params([p.copy() for p in params])
        out, cache = mlp_forward(trial, x)
        return 0.5 * float(np.sum((out - y) ** 2)), mlp_backward(trial, cache, out - y)

    return grad_check(f, net.params, n_probe=n_probe, seed=seed)


def _suite_gradients(seed: int) -> list[dict]:
    n_probe = 40
    out = [_check("mlp_mse", _mlp_check(seed, n_probe), 1e-4, probes=n_probe)]
    for squash, embed, shared in [("sigmoid", False, True), ("sigmoid", False, False), ("unit", True, True),
                                  ("none", True, False)]:
        err = _critic_check(seed + 1, squash, embed, shared, n_probe)
        name = f"critic_td_loss_{squash}{'_embed' if embed else ''}{'_shared' if shared else ''}"
        out.append(_check(name, err, 1e-4, probes=n_probe))
    for i in range(3):
        out.append(_check(f"policy_loss_{i}", _policy_check(seed + 2 + i, n_probe), 1e-4, probes=n_probe))
    return out


def _suite_relations(seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(50):
        n, d, u = int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(2, 4))
        q = [rng.standard_normal(u) for _ in range(n)]
        f = [rng.standard_normal((u, d)) for _ in range(n)]
        worst = max(worst, float(np.abs(cp_reconstruct(fql_to_cp(q, f)) - fql_dense(q, f)).max()))
    out = [_check("fql_construction", worst, 1e-10, instances=50)]
    worst = 0.0
    for _ in range(50):
        n, u = int(rng.integers(1, 5)), int(rng.integers(2, 5))
        worst = max(worst, vdn_exp_rank1_check([rng.uniform(-1, 1, u) for _ in range(n)]))
    out.append(_check("vdn_exp_rank1", worst, 1e-6, instances=50))

    worst = 0.0
    for i in range(100):
        n, u, k = int(rng.integers(1, 7)), int(rng.integers(2, 4)), int(rng.integers(1, 4))
        c = FactoredCritic.init(n + 1, u, k, seed + i, hidden=(5,), n=n, squash=["sigmoid", "unit", "none"][i % 3])
        for net in c.net.nets:
            net.set_params([p + rng.standard_normal(p.shape) for p in net.params])
        c.w = rng.standard_normal(k)
        obs = agent_obs(0, n, 1)
        t = critic_tensor(c, obs)
        a = tuple(int(x) for x in rng.integers(u, size=n))
        worst = max(worst, abs(critic_q(c, obs, a) - t[a]))
    out.append(_check("critic_factored_equals_materialized", worst, 1e-9, instances=100))
    out.append(_speed_check(seed))
    return out


def _speed_check(seed: int, trials: int = 10) -> dict:
    n, m, k = 8, 8, 4
    c = FactoredCritic.init(n + 1, m, k, seed=seed, n=n)
    obs = agent_obs(0, n, 1)
    a = tuple(range(n))
    fast, slow = [], []
    for _ in range(trials):
        t0 = time.perf_counter()
        critic_q(c, obs, a)
        fast.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        critic_tensor(c, obs)[a]
        slow.append(time.perf_counter() - t0)
    ratio = float(np.median(slow) / np.median(fast))
    return _check("critic_factored_speedup_n8_m8_k4", ratio, 100.0, passed=ratio >= 100.0, direction="greater")


_SUITES = dict(tensor=_suite_tensor, bellman=_suite_bellman, bounds=_suite_bounds,
               gradients=_suite_gradients, relations=_suite_relations)


def check_suite(name: str, seed: int = 0) -> dict:
    """Run one property suite; returns ``{"suite", "passed", "seconds", "checks": [...]}``.

    Each check reports its measured value, the tolerance and whether it
    passed. Counts (``*_seeds``, ``*_instances``) pass at a minimum count.
    """
    if name not in _SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    t0 = time.perf_counter()
    checks = _SUITES[name](seed)
    return dict(suite=name, seed=seed, passed=all(c["passed"] for c in checks),
                seconds=time.perf_counter() - t0, checks=checks)
