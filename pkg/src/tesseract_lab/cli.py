"""Command line entry point: ``tesseract-lab <subcommand>``.

Exit status is 0 iff every requested run or check succeeded.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import io
from .bellman import TabularPolicy, exact_policy_eval, projected_policy_eval
from .harness import SUITES, ExperimentConfig, check_suite, env_rank_ablation, rank_ablation, run_experiment
from .mdp_env import gen_lowrank_mmdp, gen_tensor_game
from .model_based import ModelBasedConfig, run_model_based
from .model_free import TrainConfig, train
from .tensor_core import ALSOptions, ObservedEntrySet, cp_als, cp_complete

TRAIN_COLUMNS = ("step", "seed", "algo", "mean_return", "td_loss", "entropy_coef", "wallclock_ms")
MB_COLUMNS = ("iteration", "seed", "greedy_return", "eps_R", "eps_P", "tv_bound", "q_err_bound")


def _write_rows(path, columns, rows) -> None:
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([format(float(r[c]), ".17g") if isinstance(r[c], (float, np.floating)) else r[c]
                        for c in columns])
    finally:
        if fh is not sys.stdout:
            fh.close()


def _als_opts(args) -> ALSOptions:
    return ALSOptions(max_sweeps=args.max_sweeps, seed=args.seed, init_scheme=args.init, n_init=args.restarts)


def cmd_decompose(args) -> int:
    t = io.load_tensor(args.tensor)
    model = cp_als(t, args.rank, _als_opts(args))
    io.save_cp(model, args.out)
    return 0


def cmd_complete(args) -> int:
    """Entries listed as NaN in the tensor file are treated as unobserved."""
    t = io.load_tensor(args.tensor)
    mask = ~np.isnan(t)
    model = cp_complete(ObservedEntrySet.from_mask(np.where(mask, t, 0.0), mask), args.rank,
                        ALSOptions(ridge=1e-8, n_init=args.restarts, init_scheme=args.init, seed=args.seed,
                                   max_sweeps=args.max_sweeps))
    io.save_cp(model, args.out)
    return 0


def cmd_gen_game(args) -> int:
    g = gen_tensor_game(args.agents, args.actions, args.rank, args.seed, allow_dependent=args.allow_dependent)
    io.save_tensor(g.reward, args.out)
    return 0


def cmd_gen_mmdp(args) -> int:
    m = gen_lowrank_mmdp(args.states, args.agents, args.actions, args.k1, args.k2, args.gamma,
                         mix=args.mix, seed=args.seed)
    io.save_mmdp(m, args.out)
    return 0


def cmd_eval(args) -> int:
    m = io.load_mmdp(args.mmdp)
    p = (TabularPolicy.uniform(m.S, m.n, m.u) if args.policy is None
         else TabularPolicy(io.load_tensor(args.policy)))
    if args.mode == "exact":
        q = exact_policy_eval(m, p)
    else:
        if args.rank is None:
            raise ValueError("--mode projected needs --rank")
        q = projected_policy_eval(m, p, args.rank)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in range(m.S):
        io.save_tensor(q[s], out / f"q_{s}.txt")
    return 0


def _env_from(args):
    spec = io.load_env_spec(args.env_spec)
    return io.make_env(spec, Path(args.env_spec).parent)


def cmd_model_based(args) -> int:
    cfg = ModelBasedConfig(env=_env_from(args), rank=args.rank, iters=args.iters, seed=args.seed)
    _write_rows(args.out, MB_COLUMNS, run_model_based(cfg))
    return 0


def cmd_train(args) -> int:
    opts = _load_yaml(args.config) if args.config else {}
    opts.update(algo=args.algo, seed=args.seed)
    if args.rank is not None:
        opts["rank"] = args.rank
    if args.steps is not None:
        opts["total_steps"] = args.steps
    if "hidden" in opts:
        opts["hidden"] = tuple(opts["hidden"])
    rows = train(TrainConfig(**opts), _env_from(args))
    _write_rows(args.out, TRAIN_COLUMNS, rows)
    return 0


def _load_yaml(path) -> dict:
    d = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(d, dict):
        raise ValueError(f"{path}: expected a mapping")
    return d


def _experiment(args) -> ExperimentConfig:
    d = _load_yaml(args.config)
    if args.out_dir:
        d["out_dir"] = args.out_dir
    if args.workers:
        d["workers"] = args.workers
    return ExperimentConfig.from_dict(d)


def cmd_experiment(args) -> int:
    res = run_experiment(_experiment(args))
    print(res["aggregate_path"])
    return 0


def cmd_rank_ablation(args) -> int:
    res = rank_ablation(_experiment(args), args.ranks, stop=args.stop)
    print(res["path"])
    return 0


def cmd_env_rank_ablation(args) -> int:
    res = env_rank_ablation(_experiment(args), args.env_ranks, model_rank=args.model_rank, stop=args.stop)
    print(res["path"])
    return 0


def cmd_check(args) -> int:
    names = SUITES if args.suite == "all" else [args.suite]
    reports = [check_suite(n, seed=args.seed) for n in names]
    if args.json:
        print(json.dumps(reports if args.suite == "all" else reports[0], indent=2))
    else:
        for rep in reports:
            for c in rep["checks"]:
                print(f"{'PASS' if c['passed'] else 'FAIL'} {rep['suite']}.{c['name']} "
                      f"measured={c['measured']:.6g} tolerance={c['tolerance']:.6g}")
    return 0 if all(r["passed"] for r in reports) else 1


def _als_args(p) -> None:
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", choices=["hosvd-like", "random-normal"], default="hosvd-like")
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("--max-sweeps", type=int, default=500)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tesseract-lab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="fit a CP model to a tensor file")
    p.add_argument("tensor")
    _als_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_decompose)

    p = sub.add_parser("complete", help="fit a CP model to the non-NaN entries of a tensor file")
    p.add_argument("tensor")
    _als_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_complete)

    p = sub.add_parser("gen-game", help="write a random low-rank tensor game")
    p.add_argument("--agents", type=int, required=True)
    p.add_argument("--actions", type=int, required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allow-dependent", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_game)

    p = sub.add_parser("gen-mmdp", help="write a random low-rank MMDP directory")
    p.add_argument("--states", type=int, required=True)
    p.add_argument("--agents", type=int, required=True)
    p.add_argument("--actions", type=int, required=True)
    p.add_argument("--k1", type=int, default=1)
    p.add_argument("--k2", type=int, default=1)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--mix", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_mmdp)

    p = sub.add_parser("eval", help="policy evaluation on an MMDP directory")
    p.add_argument("--mmdp", required=True)
    p.add_argument("--policy", help="tensor file of shape S n u (default uniform)")
    p.add_argument("--mode", choices=["exact", "projected"], default="exact")
    p.add_argument("--rank", type=int)
    p.add_argument("--out", required=True, help="directory for q_<s>.txt")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("model-based", help="model-based loop with CP-completed dynamics")
    p.add_argument("--env-spec", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_model_based)

    p = sub.add_parser("train", help="model-free training run")
    p.add_argument("--algo", choices=["tac", "iac", "vdn"], default="tac")
    p.add_argument("--env-spec", required=True)
    p.add_argument("--rank", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="YAML file of extra training options")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train)

    for name, fn, help_ in [("experiment", cmd_experiment, "seed sweep from a YAML config"),
                            ("rank-ablation", cmd_rank_ablation, "tac critic-rank sweep"),
                            ("env-rank-ablation", cmd_env_rank_ablation, "tac against games of several ranks")]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
        p.add_argument("--out-dir")
        p.add_argument("--workers", type=int)
        if name == "rank-ablation":
            p.add_argument("--ranks", type=int, nargs="+", default=[2, 8, 32])
        if name == "env-rank-ablation":
            p.add_argument("--env-ranks", type=int, nargs="+", default=[8, 32, 128])
            p.add_argument("--model-rank", type=int, default=2)
        if name != "experiment":
            p.add_argument("--stop", action="store_true", help="end each run once it reaches 0.9")
        p.set_defaults(fn=fn)

    p = sub.add_parser("check", help="run a property suite")
    p.add_argument("suite", choices=list(SUITES) + ["all"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
