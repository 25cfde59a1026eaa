"""Plain-text file formats.

Tensor file: first line is the space-separated shape, second line the
row-major entries. A CP model is one tensor block per factor matrix
followed by a block holding the weights. An MMDP is a directory with a
``manifest.yaml`` and one tensor file per reward / transition tensor.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml

from .mdp_env import TabularMMDP, TensorGame, gen_lowrank_mmdp, gen_tensor_game
from .tensor_core import CPModel

ENV_TYPES = ("game", "mmdp", "mmdp-dir")


def _block(t: np.ndarray) -> str:
    t = np.asarray(t, dtype=float)
    return (" ".join(str(d) for d in t.shape) + "\n"
            + " ".join(format(float(x), ".17g") for x in t.ravel()) + "\n")


def _parse_blocks(text: str) -> list[np.ndarray]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) % 2:
        raise ValueError("tensor file must alternate shape and data lines")
    out = []
    for head, data in zip(lines[0::2], lines[1::2]):
        shape = tuple(int(d) for d in head.split())
        vals = np.array(data.split(), dtype=float)
        if vals.size != int(np.prod(shape)):
            raise ValueError(f"shape {shape} needs {int(np.prod(shape))} entries, got {vals.size}")
        out.append(vals.reshape(shape))
    return out


def save_tensor(t: np.ndarray, path) -> None:
    Path(path).write_text(_block(t))


def load_tensor(path) -> np.ndarray:
    blocks = _parse_blocks(Path(path).read_text())
    if len(blocks) != 1:
        raise ValueError(f"{path}: expected one tensor, found {len(blocks)}")
    return blocks[0]


def save_cp(model: CPModel, path) -> None:
    Path(path).write_text("".join(_block(f) for f in model.factors) + _block(model.weights))


def load_cp(path) -> CPModel:
    blocks = _parse_blocks(Path(path).read_text())
    if len(blocks) < 2:
        raise ValueError(f"{path}: a CP model needs factor blocks and a weights block")
    return CPModel(blocks[-1], blocks[:-1])


def save_mmdp(m: TabularMMDP, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = dict(S=m.S, n=m.n, u=m.u, gamma=float(m.gamma), k1=m.k1, k2=m.k2, mix=float(m.mix),
                    rewards=[f"reward_{s}.txt" for s in range(m.S)],
                    transitions=[f"transition_{s}.txt" for s in range(m.S)])
    for s in range(m.S):
        save_tensor(m.rewards[s], d / manifest["rewards"][s])
        save_tensor(m.transitions[s], d / manifest["transitions"][s])
    (d / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))


def load_mmdp(directory) -> TabularMMDP:
    d = Path(directory)
    man = yaml.safe_load((d / "manifest.yaml").read_text())
    rewards = np.stack([load_tensor(d / f) for f in man["rewards"]])
    transitions = np.stack([load_tensor(d / f) for f in man["transitions"]])
    return TabularMMDP(S=int(man["S"]), n=int(man["n"]), u=int(man["u"]), gamma=float(man["gamma"]),
                       rewards=rewards, transitions=transitions, k1=int(man.get("k1", 1)),
                       k2=int(man.get("k2", 1)), mix=float(man.get("mix", 0.0)))


def make_env(spec: dict, base: Path | None = None) -> TensorGame | TabularMMDP:
    """Build an environment from a spec mapping.

    ``{"type": "game", "agents", "actions", "rank", "seed"}`` generates a
    tensor game, ``{"type": "mmdp", "states", "agents", "actions", "k1",
    "k2", "gamma", "seed"}`` a low-rank MMDP, and ``{"type": "mmdp-dir",
    "path"}`` loads a saved one (relative to ``base``).
    """
    spec = dict(spec)
    kind = spec.pop("type", "game")
    if kind not in ENV_TYPES:
        raise ValueError(f"env type must be one of {ENV_TYPES}, got {kind!r}")
    if kind == "game":
        return gen_tensor_game(int(spec["agents"]), int(spec["actions"]), int(spec["rank"]),
                               int(spec.get("seed", 0)), allow_dependent=bool(spec.get("allow_dependent", False)))
    if kind == "mmdp":
        return gen_lowrank_mmdp(int(spec["states"]), int(spec["agents"]), int(spec["actions"]),
                                int(spec.get("k1", 1)), int(spec.get("k2", 1)), float(spec.get("gamma", 0.9)),
                                mix=float(spec.get("mix", 0.05)), seed=int(spec.get("seed", 0)))
    path = Path(spec["path"])
    return load_mmdp(path if base is None or path.is_absolute() else base / path)


def load_env_spec(path) -> dict:
    spec = yaml.safe_load(Path(path).read_text())
    if not isinstance(spec, dict):
        raise ValueError(f"{path}: env spec must be a mapping")
    return spec
