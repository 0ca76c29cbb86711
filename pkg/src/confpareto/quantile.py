"""Conditional lower-quantile models of a single reward given (decision, covariates).

Two model kinds share one container:

* ``forest`` -- a quantile regression forest.  Trees are grown with scikit-learn's
  variance-reduction CART on bootstrap resamples; every leaf then holds the
  *original* training rows that fall into it and a prediction is the quantile of
  the forest-weighted empirical distribution of those responses.
* ``linear`` -- a linear pinball-loss fit on the one-hot/covariate encoding.

All empirical quantiles use the inverse-CDF convention: the smallest value whose
cumulative weight reaches the level.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from sklearn.tree import DecisionTreeRegressor

from .data import Dataset
from .errors import DomainError, InsufficientDataError, OptimizationError, SchemaError, StateError
from .seeding import STREAM_FOREST, int_seed_for, rng_for

# cumulative weights are compared against a level with this absolute slack so
# that e.g. 180 masses of 1/200 reach 0.9 despite rounding
CUM_TOL = 1e-12

FORMAT_VERSION = 1


def pinball_loss(level: float, y, yhat):
    """Quantile (check) loss ``max(level * e, (level - 1) * e)`` with ``e = y - yhat``."""
    if not 0.0 < level < 1.0:
        raise DomainError(f"level must lie in (0, 1), got {level}")
    e = np.asarray(y, dtype=float) - np.asarray(yhat, dtype=float)
    out = np.maximum(level * e, (level - 1.0) * e)
    return float(out) if out.ndim == 0 else out


def empirical_quantile(values, level: float, weights=None) -> float:
    """Inverse-CDF quantile of a (weighted) sample."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise InsufficientDataError("quantile of an empty sample")
    w = np.full(v.size, 1.0 / v.size) if weights is None else np.asarray(weights, dtype=float) / np.sum(weights)
    order = np.argsort(v, kind="stable")
    cum = np.cumsum(w[order])
    j = int(np.searchsorted(cum, level - CUM_TOL, side="left"))
    return float(v[order][min(j, v.size - 1)])


# ---------------------------------------------------------------------------
# feature encoding


def encode_features(x: int, z, num_decisions: int) -> np.ndarray:
    if not 0 <= x < num_decisions:
        raise DomainError(f"decision {x} outside [0, {num_decisions})")
    return np.concatenate([np.eye(num_decisions)[x], np.atleast_1d(np.asarray(z, dtype=float))])


def encode_batch(decisions, covariates, num_decisions: int) -> np.ndarray:
    dec = np.asarray(decisions, dtype=np.int64)
    cov = np.asarray(covariates, dtype=float).reshape(len(dec), -1)
    if dec.size and (dec.min() < 0 or dec.max() >= num_decisions):
        raise DomainError(f"decisions outside [0, {num_decisions})")
    onehot = np.zeros((len(dec), num_decisions))
    onehot[np.arange(len(dec)), dec] = 1.0
    return np.hstack([onehot, cov])


def decode_features(f, num_decisions: int) -> tuple[int, np.ndarray]:
    f = np.asarray(f, dtype=float)
    return int(np.argmax(f[:num_decisions])), f[num_decisions:].copy()


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True)
class QuantileFitConfig:
    level: float
    trees: int = 100
    min_leaf: int = 5
    max_depth: int | None = None
    feature_subsample: float = 1.0 / 3.0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise DomainError(f"level must lie in (0, 1), got {self.level}")
        if self.trees < 1 or self.min_leaf < 1:
            raise DomainError("trees and min_leaf must be positive")
        if self.max_depth is not None and self.max_depth < 1:
            raise DomainError("max_depth must be positive or None")
        if not 0.0 < self.feature_subsample <= 1.0:
            raise DomainError("feature_subsample must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class _Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    train_leaf: np.ndarray  # leaf node of every original training row

    def apply(self, X32: np.ndarray) -> np.ndarray:
        node = np.zeros(X32.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.left[node] >= 0)
        while active.size:
            cur = node[active]
            go_left = X32[active, self.feature[cur]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
            active = active[self.left[node[active]] >= 0]
        return node


@dataclass(frozen=True, eq=False)
class QuantileModel:
    kind: str
    level: float
    num_decisions: int
    d: int
    y_range: tuple[float, float]
    y_train: np.ndarray | None = field(default=None, repr=False)
    trees: tuple[_Tree, ...] = field(default=(), repr=False)
    coef: np.ndarray | None = None
    loss_trace: tuple[float, ...] = field(default=(), repr=False)
    provenance: frozenset = field(default=frozenset(), repr=False)

    def predict(self, decisions, covariates, level: float | None = None) -> np.ndarray:
        return predict_quantiles(self, decisions, covariates, level)

    @property
    def n_features(self) -> int:
        return self.num_decisions + self.d


def row_fingerprints(data: Dataset) -> frozenset:
    """Content hashes of each row, used to detect calibration on training rows."""
    out = set()
    for i in range(data.n):
        h = hashlib.blake2b(digest_size=8)
        h.update(np.int64(data.decisions[i]).tobytes())
        h.update(data.rewards[i].tobytes())
        h.update(data.covariates[i].tobytes())
        out.add(h.hexdigest())
    return frozenset(out)


def _check_reward(data: Dataset, reward: int):
    if not 0 <= reward < data.m:
        raise SchemaError(f"reward index {reward} outside [0, {data.m})")


# ---------------------------------------------------------------------------
# forest


def _grow_tree(X, y, cfg: QuantileFitConfig, t: int) -> _Tree:
    n = len(y)
    boot = rng_for(cfg.seed, STREAM_FOREST, t).integers(0, n, size=n)
    est = DecisionTreeRegressor(
        min_samples_leaf=cfg.min_leaf,
        max_depth=cfg.max_depth,
        max_features=cfg.feature_subsample,
        random_state=int_seed_for(cfg.seed, STREAM_FOREST, t),
    )
    est.fit(X[boot], y[boot])
    tr = est.tree_
    return _Tree(
        feature=np.asarray(tr.feature, dtype=np.int64),
        threshold=np.asarray(tr.threshold, dtype=float),
        left=np.asarray(tr.children_left, dtype=np.int64),
        right=np.asarray(tr.children_right, dtype=np.int64),
        # every original row, not just the bootstrap draw
        train_leaf=np.asarray(est.apply(X.astype(np.float32)), dtype=np.int64),
    )


def fit_quantile_forest(data: Dataset, reward: int, cfg: QuantileFitConfig) -> QuantileModel:
    _check_reward(data, reward)
    if data.n == 0 or data.n < cfg.min_leaf:
        raise InsufficientDataError(f"forest needs at least max(1, min_leaf={cfg.min_leaf}) rows, got {data.n}")
    X = encode_batch(data.decisions, data.covariates, data.num_decisions)
    y = np.ascontiguousarray(data.rewards[:, reward])
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            trees = tuple(pool.map(lambda t: _grow_tree(X, y, cfg, t), range(cfg.trees)))
    else:
        trees = tuple(_grow_tree(X, y, cfg, t) for t in range(cfg.trees))
    y_train = y.copy()
    y_train.setflags(write=False)
    return QuantileModel(
        kind="forest",
        level=cfg.level,
        num_decisions=data.num_decisions,
        d=data.d,
        y_range=(float(y.min()), float(y.max())),
        y_train=y_train,
        trees=trees,
        provenance=row_fingerprints(data),
    )


@dataclass(frozen=True, eq=False)
class _PackedForest:
    """All trees' node arrays concatenated, child links shifted to global node ids."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    roots: np.ndarray
    inv_count: np.ndarray  # 1 / (training rows in leaf), per global node
    train_node: np.ndarray  # (T, n_train) global leaf id of each training row
    n_nodes: int


def _pack(model: QuantileModel) -> _PackedForest:
    cached = model.__dict__.get("_packed")
    if cached is not None:
        return cached
    feats, thrs, lefts, rights, roots, inv, train = [], [], [], [], [], [], []
    offset = 0
    for t in model.trees:
        size = len(t.left)
        leaf = t.left < 0
        feats.append(np.where(leaf, 0, t.feature))
        thrs.append(t.threshold)
        lefts.append(np.where(leaf, -1, t.left + offset))
        rights.append(np.where(leaf, -1, t.right + offset))
        roots.append(offset)
        counts = np.bincount(t.train_leaf, minlength=size).astype(float)
        inv.append(np.divide(1.0, counts, out=np.zeros(size), where=counts > 0))
        train.append(t.train_leaf + offset)
        offset += size
    packed = _PackedForest(
        np.concatenate(feats), np.concatenate(thrs), np.concatenate(lefts), np.concatenate(rights),
        np.asarray(roots, dtype=np.int64), np.concatenate(inv), np.stack(train), offset,
    )
    object.__setattr__(model, "_packed", packed)
    return packed


def forest_apply(model: QuantileModel, X) -> np.ndarray:
    """``(T, n_query)`` global leaf ids, traversing every tree in lockstep."""
    pf = _pack(model)
    X32 = np.asarray(X, dtype=np.float32)
    nq = X32.shape[0]
    node = np.repeat(pf.roots, nq)
    col = np.tile(np.arange(nq), len(pf.roots))
    active = np.flatnonzero(pf.left[node] >= 0)
    while active.size:
        cur = node[active]
        go_left = X32[col[active], pf.feature[cur]] <= pf.threshold[cur]
        node[active] = np.where(go_left, pf.left[cur], pf.right[cur])
        active = active[pf.left[node[active]] >= 0]
    return node.reshape(len(pf.roots), nq)


def forest_weights(model: QuantileModel, X: np.ndarray) -> np.ndarray:
    """Dense ``(n_query, n_train)`` matrix of forest weights; each row sums to one."""
    pf = _pack(model)
    leaves = forest_apply(model, X)
    T, nq = leaves.shape
    n_train = pf.train_node.shape[1]
    Q = sparse.csr_matrix(
        (pf.inv_count[leaves.ravel()], (np.tile(np.arange(nq), T), leaves.ravel())), shape=(nq, pf.n_nodes)
    )
    B = sparse.csr_matrix(
        (np.ones(n_train * T), (np.tile(np.arange(n_train), T), pf.train_node.ravel())), shape=(n_train, pf.n_nodes)
    )
    return (Q @ B.T).toarray() / T


def _weighted_quantiles(y: np.ndarray, W: np.ndarray, level: float) -> np.ndarray:
    order = np.argsort(y, kind="stable")
    cum = np.cumsum(W[:, order], axis=1)
    hit = cum >= level - CUM_TOL
    j = np.where(hit.any(axis=1), hit.argmax(axis=1), len(y) - 1)
    return y[order][j]


def predict_quantiles(model: QuantileModel, decisions, covariates, level: float | None = None) -> np.ndarray:
    if model is None or (model.kind == "forest" and not model.trees) or (model.kind == "linear" and model.coef is None):
        raise StateError("model is not fitted")
    level = model.level if level is None else float(level)
    if not 0.0 < level < 1.0:
        raise DomainError(f"level must lie in (0, 1), got {level}")
    cov = np.asarray(covariates, dtype=float).reshape(len(np.atleast_1d(decisions)), -1)
    if cov.shape[1] != model.d:
        raise SchemaError(f"model expects {model.d} covariates, got {cov.shape[1]}")
    X = encode_batch(np.atleast_1d(decisions), cov, model.num_decisions)
    if model.kind == "linear":
        if not math.isclose(level, model.level, rel_tol=0, abs_tol=1e-15):
            raise DomainError(f"linear model was fitted at level {model.level}; refit for level {level}")
        return X @ model.coef
    return _weighted_quantiles(model.y_train, forest_weights(model, X), level)


def predict_quantile(model: QuantileModel, x: int, z, level: float | None = None) -> float:
    return float(predict_quantiles(model, [x], np.atleast_1d(np.asarray(z, dtype=float))[None, :], level)[0])


# ---------------------------------------------------------------------------
# linear pinball model


def _lp_pinball(F: np.ndarray, y: np.ndarray, level: float) -> np.ndarray:
    n, p = F.shape
    # variables: beta (free), u+ >= 0, u- >= 0 ; F beta + u+ - u- = y
    c = np.concatenate([np.zeros(p), np.full(n, level / n), np.full(n, (1.0 - level) / n)])
    A = sparse.hstack([sparse.csr_matrix(F), sparse.eye(n), -sparse.eye(n)], format="csr")
    bounds = [(None, None)] * p + [(0, None)] * (2 * n)
    res = linprog(c, A_eq=A, b_eq=y, bounds=bounds, method="highs")
    if res.status != 0:
        raise OptimizationError(f"pinball LP failed: {res.message}")
    return res.x[:p]


def _subgradient_pinball(F: np.ndarray, y: np.ndarray, level: float, num_decisions: int, epochs: int, tol: float):
    """Full-batch subgradient descent, step ``scale / sqrt(t)``; keeps the best iterate."""
    n, p = F.shape
    mu = F.mean(axis=0)
    sd = F.std(axis=0)
    # covariate columns are standardised; the one-hot block is left alone
    is_cov = np.arange(p) >= num_decisions
    mu = np.where(is_cov, mu, 0.0)
    sd = np.where(is_cov & (sd > 0), sd, 1.0)
    G = (F - mu) / sd
    scale = float(np.std(y)) or 1.0

    def loss(b):
        return float(np.mean(pinball_loss(level, y, G @ b)))

    beta = np.zeros(p)
    best, best_loss = beta.copy(), loss(beta)
    trace = [best_loss]
    prev, rises = best_loss, 0
    for t in range(1, epochs + 1):
        r = y - G @ beta
        g = -G.T @ (level - (r < 0)) / n
        beta = beta - scale / math.sqrt(t) * g
        cur = loss(beta)
        rises = rises + 1 if cur > prev else 0
        if rises >= 50:
            raise OptimizationError("pinball subgradient descent diverged (50 consecutive loss increases)")
        if cur < best_loss:
            improvement = best_loss - cur
            best, best_loss = beta.copy(), cur
            trace.append(best_loss)
            if improvement < tol:
                break
        prev = cur
    # undo standardisation: G b = (F - mu)/sd b
    coef = best / sd
    # one-hot rows sum to one, so the centring constant folds into that block
    coef[~is_cov] -= float(np.dot(mu / sd, best))
    return coef, tuple(trace)


def fit_linear_pinball(
    data: Dataset,
    reward: int,
    cfg: QuantileFitConfig,
    solver: str = "highs",
    epochs: int = 500,
    tol: float = 1e-8,
) -> QuantileModel:
    """Linear quantile regression on ``[one-hot(x), z]``.

    ``solver="highs"`` solves the pinball LP exactly; ``solver="subgradient"`` runs
    plain subgradient descent and records the accepted-iterate loss trace.
    """
    _check_reward(data, reward)
    p = data.num_decisions + data.d
    if data.n == 0 or data.n < p:
        raise InsufficientDataError(f"linear fit needs at least {p} rows, got {data.n}")
    F = encode_batch(data.decisions, data.covariates, data.num_decisions)
    y = data.rewards[:, reward].astype(float)
    if solver == "highs":
        coef = _lp_pinball(F, y, cfg.level)
        trace = (float(np.mean(pinball_loss(cfg.level, y, F @ coef))),)
    elif solver == "subgradient":
        coef, trace = _subgradient_pinball(F, y, cfg.level, data.num_decisions, epochs, tol)
    else:
        raise DomainError(f"unknown solver {solver!r}")
    coef.setflags(write=False)
    return QuantileModel(
        kind="linear",
        level=cfg.level,
        num_decisions=data.num_decisions,
        d=data.d,
        y_range=(float(y.min()), float(y.max())),
        coef=coef,
        loss_trace=trace,
        provenance=row_fingerprints(data),
    )


# ---------------------------------------------------------------------------
# serialisation


def model_to_dict(model: QuantileModel) -> dict:
    out = {
        "format": "confpareto.quantile_model",
        "version": FORMAT_VERSION,
        "kind": model.kind,
        "level": model.level,
        "num_decisions": model.num_decisions,
        "d": model.d,
        "y_range": list(model.y_range),
        "provenance": sorted(model.provenance),
    }
    if model.kind == "forest":
        out["y_train"] = model.y_train.tolist()
        out["trees"] = [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "train_leaf": t.train_leaf.tolist(),
            }
            for t in model.trees
        ]
    else:
        out["coef"] = model.coef.tolist()
    return out


def model_from_dict(blob: dict, num_decisions: int | None = None, d: int | None = None) -> QuantileModel:
    if blob.get("format") != "confpareto.quantile_model":
        raise SchemaError("not a quantile model blob")
    if blob.get("version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported quantile model version {blob.get('version')}")
    if num_decisions is not None and blob["num_decisions"] != num_decisions:
        raise SchemaError(f"model has {blob['num_decisions']} decisions, dataset has {num_decisions}")
    if d is not None and blob["d"] != d:
        raise SchemaError(f"model has {blob['d']} covariates, dataset has {d}")

    def arr(v, dtype):
        a = np.asarray(v, dtype=dtype)
        a.setflags(write=False)
        return a

    common = dict(
        kind=blob["kind"],
        level=float(blob["level"]),
        num_decisions=int(blob["num_decisions"]),
        d=int(blob["d"]),
        y_range=tuple(blob["y_range"]),
        provenance=frozenset(blob.get("provenance", ())),
    )
    if blob["kind"] == "forest":
        trees = tuple(
            _Tree(
                feature=arr(t["feature"], np.int64),
                threshold=arr(t["threshold"], float),
                left=arr(t["left"], np.int64),
                right=arr(t["right"], np.int64),
                train_leaf=arr(t["train_leaf"], np.int64),
            )
            for t in blob["trees"]
        )
        return QuantileModel(y_train=arr(blob["y_train"], float), trees=trees, **common)
    if blob["kind"] == "linear":
        return QuantileModel(coef=arr(blob["coef"], float), **common)
    raise SchemaError(f"unknown model kind {blob['kind']!r}")
