import json

import numpy as np
import yaml

from tesseract_lab.cli import main
from tesseract_lab.harness import read_csv
from tesseract_lab.io import load_cp, load_tensor, save_tensor
from tesseract_lab.tensor_core import cp_reconstruct


def test_gen_game_and_decompose(tmp_path):
    assert main(["gen-game", "--agents", "3", "--actions", "4", "--rank", "2", "--seed", "1",
                 "--out", str(tmp_path / "g.txt")]) == 0
    t = load_tensor(tmp_path / "g.txt")
    assert t.shape == (4, 4, 4) and t.max() == 1.0
    assert main(["decompose", str(tmp_path / "g.txt"), "--rank", "2", "--out", str(tmp_path / "m.txt")]) == 0
    fit = cp_reconstruct(load_cp(tmp_path / "m.txt"))
    assert np.linalg.norm(fit - t) / np.linalg.norm(t) <= 1e-6


def test_complete_treats_nan_as_missing(tmp_path):
    rng = np.random.default_rng(0)
    a, b = rng.random(5), rng.random(6)
    t = np.outer(a, b)
    holey = t.copy()
    holey[rng.random(t.shape) < 0.3] = np.nan
    save_tensor(holey, tmp_path / "h.txt")
    assert main(["complete", str(tmp_path / "h.txt"), "--rank", "1", "--out", str(tmp_path / "m.txt")]) == 0
    np.testing.assert_allclose(cp_reconstruct(load_cp(tmp_path / "m.txt")), t, atol=1e-6)


def test_gen_mmdp_and_eval(tmp_path):
    env = tmp_path / "env"
    assert main(["gen-mmdp", "--states", "2", "--agents", "2", "--actions", "2", "--k1", "1", "--k2", "1",
                 "--gamma", "0.8", "--out", str(env)]) == 0
    assert main(["eval", "--mmdp", str(env), "--out", str(tmp_path / "qe")]) == 0
    assert main(["eval", "--mmdp", str(env), "--mode", "projected", "--rank", "3",
                 "--out", str(tmp_path / "qp")]) == 0
    for s in range(2):
        np.testing.assert_allclose(load_tensor(tmp_path / "qp" / f"q_{s}.txt"),
                                   load_tensor(tmp_path / "qe" / f"q_{s}.txt"), atol=1e-6)
    assert main(["eval", "--mmdp", str(env), "--mode", "projected", "--out", str(tmp_path / "x")]) == 2


def test_train_and_model_based_csv(tmp_path):
    spec = tmp_path / "game.yaml"
    spec.write_text(yaml.safe_dump({"type": "game", "agents": 2, "actions": 3, "rank": 1, "seed": 0}))
    assert main(["train", "--algo", "iac", "--env-spec", str(spec), "--steps", "50",
                 "--out", str(tmp_path / "t.csv")]) == 0
    rows = read_csv(tmp_path / "t.csv")
    assert list(rows[0]) == ["step", "seed", "algo", "mean_return", "td_loss", "entropy_coef", "wallclock_ms"]
    assert rows[-1]["step"] == "50"
    assert main(["model-based", "--env-spec", str(spec), "--rank", "1", "--iters", "2",
                 "--out", str(tmp_path / "mb.csv")]) == 0
    rows = read_csv(tmp_path / "mb.csv")
    assert list(rows[0]) == ["iteration", "seed", "greedy_return", "eps_R", "eps_P", "tv_bound", "q_err_bound"]
    assert len(rows) == 3


def test_experiment_from_yaml(tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(yaml.safe_dump({
        "id": "cli", "env": {"type": "game", "agents": 2, "actions": 3, "rank": 1},
        "algos": ["vdn"], "seeds": [0, 1], "train": {"total_steps": 20, "eval_every": 10},
    }))
    assert main(["experiment", str(cfg), "--out-dir", str(tmp_path / "runs")]) == 0
    assert (tmp_path / "runs" / "cli" / "aggregate.csv").exists()
    assert main(["rank-ablation", str(cfg), "--ranks", "1", "--out-dir", str(tmp_path / "runs")]) == 0
    assert (tmp_path / "runs" / "cli" / "rank_ablation.csv").exists()


def test_check_json(capsys):
    assert main(["check", "bounds", "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["suite"] == "bounds" and rep["passed"]
    assert {c["name"] for c in rep["checks"]} >= {"worked_case_1.9"}
