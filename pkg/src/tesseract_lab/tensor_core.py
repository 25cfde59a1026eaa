"""Dense tensor algebra and CP (canonical polyadic) decomposition.

Dense tensors are plain ``numpy.ndarray`` objects; a rank-k CP model is a
:class:`CPModel` holding a weight vector and one factor matrix per mode with
unit-norm columns.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import networkx as nx
import numpy as np
from scipy.optimize import least_squares

COLUMN_NORM_TOL = 1e-9
# largest Jacobian (entries x parameters) the Gauss-Newton polish will build
POLISH_MAX_JACOBIAN = 2_000_000


@dataclass
class CPModel:
    """Weighted sum of outer products ``sum_r w[r] * (F_0[:, r] o ... o F_{n-1}[:, r])``."""

    weights: np.ndarray
    factors: list[np.ndarray]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.factors = [np.asarray(f, dtype=float) for f in self.factors]
        if not self.factors:
            raise ValueError("CPModel needs at least one factor matrix")
        k = self.weights.size
        for i, f in enumerate(self.factors):
            if f.ndim != 2 or f.shape[1] != k:
                raise ValueError(f"factor {i} has shape {f.shape}, expected (d, {k})")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("CP weights must be finite")

    @property
    def rank(self) -> int:
        return self.weights.size

    @property
    def order(self) -> int:
        return len(self.factors)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    def column_norms(self) -> np.ndarray:
        """(order, rank) array of factor column norms."""
        return np.stack([np.linalg.norm(f, axis=0) for f in self.factors])

    def check_normalized(self, tol: float = COLUMN_NORM_TOL) -> bool:
        return bool(np.all(np.abs(self.column_norms() - 1.0) <= tol))

    @classmethod
    def from_factors(cls, factors: Sequence[np.ndarray], weights=None) -> "CPModel":
        """Build a normalized model from arbitrary-scale factor matrices.

        Column magnitudes are absorbed into the weights. A zero column gets
        weight 0 and is replaced by the first standard basis vector so the
        unit-norm invariant still holds.
        """
        factors = [np.array(f, dtype=float, copy=True) for f in factors]
        k = factors[0].shape[1]
        w = np.ones(k) if weights is None else np.array(weights, dtype=float, copy=True)
        for f in factors:
            norms = np.linalg.norm(f, axis=0)
            dead = norms == 0
            norms[dead] = 1.0
            f /= norms
            f[:, dead] = 0.0
            f[0, dead] = 1.0
            w = w * np.where(dead, 0.0, norms)
        return cls(w, factors)


@dataclass
class ObservedEntrySet:
    """Partially observed tensor: multi-indices, values and observation counts."""

    shape: tuple[int, ...]
    indices: np.ndarray
    values: np.ndarray
    counts: np.ndarray = None

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, len(self.shape))
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.counts is None:
            self.counts = np.ones(len(self.values), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64).reshape(-1)
        if not (len(self.indices) == len(self.values) == len(self.counts)):
            raise ValueError("indices, values and counts must have equal length")
        if len(self.indices):
            if np.any(self.indices < 0) or np.any(self.indices >= np.array(self.shape)):
                raise ValueError("observed index out of bounds")
            flat = np.ravel_multi_index(self.indices.T, self.shape)
            if np.unique(flat).size != flat.size:
                raise ValueError("duplicate observed index")
        if np.any(self.counts < 1):
            raise ValueError("observation counts must be >= 1")

    def __len__(self):
        return len(self.values)

    @classmethod
    def from_mask(cls, tensor: np.ndarray, mask: np.ndarray) -> "ObservedEntrySet":
        idx = np.argwhere(mask)
        return cls(tensor.shape, idx, tensor[tuple(idx.T)])


@dataclass
class ALSOptions:
    max_sweeps: int = 500
    rel_tol: float = 1e-10
    init_scheme: str = "random-normal"
    ridge: float = 0.0
    seed: int = 0
    line_search: bool = True
    n_init: int = 1
    polish: bool = True

    def __post_init__(self):
        if self.max_sweeps < 1 or self.n_init < 1:
            raise ValueError("max_sweeps and n_init must be positive")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if self.init_scheme not in ("random-normal", "hosvd-like"):
            raise ValueError(f"unknown init scheme {self.init_scheme!r}")


@dataclass(frozen=True)
class CoherenceStats:
    mu: float
    w_max: float
    w_min: float


# ---------------------------------------------------------------------------
# basic algebra


def outer_product(vectors: Sequence) -> np.ndarray:
    if len(vectors) == 0:
        raise ValueError("outer_product needs at least one vector")
    out = np.asarray(vectors[0], dtype=float).reshape(-1)
    if out.size == 0:
        raise ValueError("empty vector")
    for v in vectors[1:]:
        v = np.asarray(v, dtype=float).reshape(-1)
        if v.size == 0:
            raise ValueError("empty vector")
        out = np.multiply.outer(out, v)
    return out


def cp_reconstruct(model: CPModel) -> np.ndarray:
    """Materialize the dense tensor of a CP model."""
    acc = model.factors[0] * model.weights
    for f in model.factors[1:]:
        acc = (acc[..., None, :] * f).reshape(acc.shape[:-1] + (f.shape[0], model.rank))
    return acc.sum(axis=-1)


def contract(a: np.ndarray, b: np.ndarray, shared_modes: Sequence[tuple[int, int]]) -> np.ndarray:
    """Sum over paired modes of ``a`` and ``b`` (0-based mode numbers).

    The result carries the free modes of ``a`` followed by those of ``b``.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    axes_a = [p[0] for p in shared_modes]
    axes_b = [p[1] for p in shared_modes]
    for i, j in shared_modes:
        if a.shape[i] != b.shape[j]:
            raise ValueError(f"mode {i} of a has size {a.shape[i]} but mode {j} of b has {b.shape[j]}")
    return np.tensordot(a, b, axes=(axes_a, axes_b))


def inner_product_full(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def factored_inner_product(model: CPModel, action_vectors: Sequence) -> float:
    """<reconstruct(model), outer(action_vectors)> in O(n k m) without materializing."""
    if len(action_vectors) != model.order:
        raise ValueError(f"expected {model.order} vectors, got {len(action_vectors)}")
    prod = model.weights.copy()
    for f, v in zip(model.factors, action_vectors):
        v = np.asarray(v, dtype=float).reshape(-1)
        if v.size != f.shape[0]:
            raise ValueError(f"vector of length {v.size} against mode of size {f.shape[0]}")
        prod *= v @ f
    return float(prod.sum())


def frobenius_norm(t: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(t, dtype=float).ravel()))


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1)


def khatri_rao(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Column-wise Kronecker product; row index runs C-order over ``mats``."""
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, out.shape[1])
    return out


# ---------------------------------------------------------------------------
# ALS


def _init_factors(t: np.ndarray, rank: int, opts: ALSOptions, rng) -> list[np.ndarray]:
    factors = []
    for mode, d in enumerate(t.shape):
        f = rng.standard_normal((d, rank))
        if opts.init_scheme == "hosvd-like":
            u, _, _ = np.linalg.svd(unfold(t, mode), full_matrices=False)
            r = min(rank, u.shape[1])
            f[:, :r] = u[:, :r]
        norms = np.linalg.norm(f, axis=0)
        factors.append(f / np.where(norms > 0, norms, 1.0))
    return factors


def _relative_residual(t: np.ndarray, factors: list[np.ndarray], t_norm: float) -> float:
    r = frobenius_norm(t - cp_reconstruct(CPModel(np.ones(factors[0].shape[1]), factors)))
    return r / t_norm if t_norm > 0 else r


def _als_sweep(t: np.ndarray, factors: list[np.ndarray], ridge: float) -> list[np.ndarray]:
    # Each mode solves min ||unfold(t) - F kr^T|| directly on the Khatri-Rao
    # matrix; the normal equations square its condition number and lose
    # monotonicity when components are nearly collinear.
    factors = list(factors)
    k = factors[0].shape[1]
    for mode in range(t.ndim):
        kr = khatri_rao([factors[j] for j in range(t.ndim) if j != mode])
        rhs = unfold(t, mode).T
        if ridge > 0:
            kr = np.vstack([kr, math.sqrt(ridge) * np.eye(k)])
            rhs = np.vstack([rhs, np.zeros((k, rhs.shape[1]))])
        factors[mode] = np.linalg.lstsq(kr, rhs, rcond=None)[0].T
    return factors


def _normalize(factors: list[np.ndarray]) -> CPModel:
    return CPModel.from_factors(factors)


def _balanced(factors: list[np.ndarray]) -> list[np.ndarray]:
    """Unit columns in modes 1..n-1, all scale carried by mode 0."""
    model = _normalize(factors)
    out = [f.copy() for f in model.factors]
    out[0] = out[0] * model.weights
    return out


def cp_als(
    t: np.ndarray,
    rank: int,
    opts: ALSOptions | None = None,
    init: CPModel | None = None,
    history: list | None = None,
) -> CPModel:
    """Rank-``rank`` CP approximation of ``t`` by alternating least squares.

    Each mode update is an exact least-squares solve, so the residual never
    increases. After every sweep the columns are renormalized and their scale
    moved into the weights. When ``opts.line_search`` is set, an extrapolated
    step along the last sweep direction is tried and kept only if it lowers
    the residual.

    Parameters
    ----------
    init : CPModel, optional
        Warm start; overrides ``opts.init_scheme``.
    history : list, optional
        Receives the relative residual before the first sweep and after every
        sweep.
    """
    opts = opts or ALSOptions()
    if rank < 1:
        raise ValueError("rank must be >= 1")
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor has non-finite entries")
    if t.ndim == 1:
        t = t.reshape(-1, 1)
        model = cp_als(t, rank, opts, init=None, history=history)
        return CPModel(model.weights * model.factors[1][0], model.factors[:1])

    if init is not None or opts.n_init == 1:
        return _cp_als_single(t, rank, opts, init, history)
    # restarts (random-normal after the first): keep the best fit, stop early once exact
    best, best_res, best_hist = None, np.inf, None
    for r in range(opts.n_init):
        hist = []
        scheme = opts.init_scheme if r == 0 else "random-normal"
        run_opts = replace(opts, seed=opts.seed + r, n_init=1, init_scheme=scheme)
        model = _cp_als_single(t, rank, run_opts, None, hist)
        if hist[-1] < best_res:
            best, best_res, best_hist = model, hist[-1], hist
        if best_res < 1e-10:
            break
    if history is not None:
        history.extend(best_hist)
    return best


def _cp_als_single(t, rank, opts, init, history) -> CPModel:
    t_norm = frobenius_norm(t)
    if t_norm == 0:
        rng = np.random.default_rng(opts.seed)
        factors = _init_factors(t, rank, opts, rng)
        if history is not None:
            history.append(0.0)
        return CPModel(np.zeros(rank), factors)

    if init is not None:
        if init.rank != rank or init.shape != t.shape:
            raise ValueError("warm start does not match rank/shape")
        factors = [f.copy() for f in init.factors]
        factors[0] = factors[0] * init.weights
    else:
        factors = _init_factors(t, rank, opts, np.random.default_rng(opts.seed))

    res = _relative_residual(t, factors, t_norm)
    if history is not None:
        history.append(res)
    for sweep in range(1, opts.max_sweeps + 1):
        prev_factors = factors
        factors = _balanced(_als_sweep(t, factors, opts.ridge))
        new_res = _relative_residual(t, factors, t_norm)
        if opts.line_search and sweep > 2:
            step = sweep ** (1.0 / 3.0)
            trial = [f + step * (f - g) for f, g in zip(factors, prev_factors)]
            trial_res = _relative_residual(t, trial, t_norm)
            if trial_res < new_res:
                factors, new_res = _balanced(trial), trial_res
        if new_res > res:
            # round-off floor reached: keep the better previous iterate
            factors, new_res = prev_factors, res
        if history is not None:
            history.append(new_res)
        improvement = (res - new_res) / max(res, 1e-300)
        res = new_res
        if res < 1e-14 or improvement < opts.rel_tol:
            break
    if opts.polish and res > 1e-12 and t.size * rank * sum(t.shape) <= POLISH_MAX_JACOBIAN:
        polished = _gn_polish(t, factors)
        polished_res = _relative_residual(t, polished, t_norm)
        if polished_res < res:
            factors, res = polished, polished_res
            if history is not None:
                history.append(res)
    return _normalize(factors)


def _gn_polish(t: np.ndarray, factors: list[np.ndarray]) -> list[np.ndarray]:
    """Trust-region Gauss-Newton on all factors jointly.

    ALS crawls when components are nearly collinear or small next to a
    dominant one; a joint second-order step resolves those cases quickly.
    """
    shape, k, n = t.shape, factors[0].shape[1], t.ndim
    offsets = np.cumsum([0] + [d * k for d in shape])
    idx = np.indices(shape).reshape(n, -1).T
    rows = np.arange(t.size)
    other_flat = []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        other_flat.append(np.ravel_multi_index(idx[:, others].T, [shape[j] for j in others]))

    def unpack(x):
        return [x[offsets[i]:offsets[i + 1]].reshape(shape[i], k) for i in range(n)]

    def fun(x):
        return cp_reconstruct(CPModel(np.ones(k), unpack(x))).ravel() - t.ravel()

    def jac(x):
        fs = unpack(x)
        blocks = []
        for i in range(n):
            kr = khatri_rao([fs[j] for j in range(n) if j != i])
            block = np.zeros((t.size, shape[i], k))
            block[rows, idx[:, i], :] = kr[other_flat[i]]
            blocks.append(block.reshape(t.size, -1))
        return np.hstack(blocks)

    x0 = np.concatenate([f.ravel() for f in factors])
    sol = least_squares(fun, x0, jac=jac, method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    return unpack(sol.x)


def cp_complete(obs: ObservedEntrySet, rank: int, opts: ALSOptions | None = None) -> CPModel:
    """Fit a CP model to observed entries only (masked, ridge-regularized ALS).

    Each row of each factor matrix is the ridge solution over the observed
    entries whose index in that mode equals the row. Masked ALS often stalls
    in a swamp, so ``opts.n_init`` starts are tried (the first with
    ``opts.init_scheme``, the rest random-normal) and the one with the
    smallest residual on the observed entries is kept.
    """
    opts = opts or ALSOptions(ridge=1e-8, n_init=8, init_scheme="hosvd-like")
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if len(obs) == 0:
        raise ValueError("no observed entries")
    if not np.any(obs.values):
        rng = np.random.default_rng(opts.seed)
        factors = [rng.standard_normal((d, rank)) for d in obs.shape]
        return CPModel.from_factors(factors, np.zeros(rank))
    best, best_res = None, np.inf
    for r in range(opts.n_init):
        scheme = opts.init_scheme if r == 0 else "random-normal"
        factors, res = _complete_single(obs, rank, opts, scheme, opts.seed + r)
        if res < best_res:
            best, best_res = factors, res
        if best_res < 1e-8:
            break
    return CPModel.from_factors(best)


def _complete_single(obs, rank, opts, scheme, seed):
    shape, idx, y = obs.shape, obs.indices, obs.values
    order = len(shape)
    rng = np.random.default_rng(seed)
    init_opts = ALSOptions(init_scheme=scheme, seed=seed)
    if scheme == "hosvd-like":
        dense = np.full(shape, y.mean())
        dense[tuple(idx.T)] = y
        factors = _init_factors(dense, rank, init_opts, rng)
    else:
        factors = _init_factors(np.zeros(shape), rank, init_opts, rng)
    scale = np.sqrt(np.mean(y ** 2)) ** (1.0 / order)
    factors = [f * scale for f in factors]

    y_norm = np.linalg.norm(y)
    ridge = max(opts.ridge, 1e-12) * np.eye(rank)

    def residual(fs):
        pred = np.ones((len(y), rank))
        for m in range(order):
            pred *= fs[m][idx[:, m]]
        return np.linalg.norm(pred.sum(1) - y) / y_norm

    res = residual(factors)
    for _ in range(opts.max_sweeps):
        for mode in range(order):
            z = np.ones((len(y), rank))
            for m in range(order):
                if m != mode:
                    z *= factors[m][idx[:, m]]
            d = shape[mode]
            gram = np.zeros((d, rank, rank))
            rhs = np.zeros((d, rank))
            np.add.at(gram, idx[:, mode], z[:, :, None] * z[:, None, :])
            np.add.at(rhs, idx[:, mode], z * y[:, None])
            factors[mode] = np.linalg.solve(gram + ridge, rhs[..., None])[..., 0]
        # rebalance column scales across modes so no single mode drifts
        norms = np.stack([np.linalg.norm(f, axis=0) for f in factors])
        if np.all(norms > 0):
            geo = np.exp(np.log(norms).mean(axis=0))
            factors = [f * (geo / nm) for f, nm in zip(factors, norms)]
        new_res = residual(factors)
        improvement = (res - new_res) / max(res, 1e-300)
        res = new_res
        if res < 1e-13 or abs(improvement) < opts.rel_tol:
            break
    return factors, res


# ---------------------------------------------------------------------------
# recovery diagnostics


def coherence(model: CPModel) -> CoherenceStats:
    mu = math.sqrt(model.order) * max(float(np.max(np.abs(f))) for f in model.factors)
    return CoherenceStats(mu=mu, w_max=float(model.weights.max()), w_min=float(model.weights.min()))


def recovery_policy_floor(stats: CoherenceStats, n: int, u: int, k: int, log_term: float) -> float:
    """Minimum joint-action probability needed for low-rank recovery, up to a constant.

    Returns ``mu^6 k^5 w_max^4 ln(u)^4 log_term / (u^(n/2) w_min^4)``; the
    problem-dependent multiplicative constant is omitted.
    """
    if stats.w_min == 0:
        raise ValueError("w_min must be nonzero")
    num = stats.mu ** 6 * k ** 5 * stats.w_max ** 4 * math.log(u) ** 4 * log_term
    return num / (u ** (n / 2) * stats.w_min ** 4)


def boost_count(eta: float, n_states: int, delta: float) -> int:
    """Independent estimates needed so the majority cluster is right w.p. 1 - delta/(3|S|)."""
    if not (eta > 0 and 0 < delta < 1 and n_states >= 1):
        raise ValueError("need eta > 0, 0 < delta < 1, n_states >= 1")
    return math.ceil(math.log(3 * n_states / delta) / (2 * eta ** 2))


def cluster_boost(estimates: Sequence[np.ndarray], eps: float) -> np.ndarray:
    """Return a member of the largest group of estimates pairwise within 2*eps/3.

    Among equally large groups the one containing the lowest index wins, and
    the lowest-index member of that group is returned.
    """
    if len(estimates) == 0:
        raise ValueError("need at least one estimate")
    shape = np.shape(estimates[0])
    stack = np.stack([np.asarray(e, dtype=float) for e in estimates]) if all(
        np.shape(e) == shape for e in estimates) else None
    if stack is None:
        raise ValueError("estimates must share one shape")
    flat = stack.reshape(len(estimates), -1)
    dist = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=-1)
    graph = nx.Graph()
    graph.add_nodes_from(range(len(estimates)))
    ii, jj = np.nonzero(np.triu(dist <= 2 * eps / 3, k=1))
    graph.add_edges_from(zip(ii.tolist(), jj.tolist()))
    best = min(nx.find_cliques(graph), key=lambda c: (-len(c), sorted(c)))
    return stack[min(best)].copy()
