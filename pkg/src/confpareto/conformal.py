"""Weighted split-conformal lower bounds on rewards.

For a target decision ``x*`` and context ``z`` the bound on reward ``k`` is
``qhat_k(x*, z) - kappa_k`` where ``kappa_k`` is the ``1 - alpha_k`` quantile of the
calibration residuals ``qhat_k(x_i, z_i) - y_ik`` under probability weights
proportional to ``w(x*, z_i)``, with the test weight ``w(x*, z)`` placed on ``+inf``.
An infinite ``kappa`` falls back to the reward's floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import DomainError, ProvenanceError, SchemaError
from .policy import PolicyModel, normalize
from .quantile import CUM_TOL, QuantileModel, predict_quantiles, row_fingerprints


@dataclass(frozen=True, eq=False)
class ResidualDistribution:
    """Discrete residual law: finite atoms plus a point mass at ``+inf``.

    Atoms are sorted ascending and equal values are merged on construction.
    """

    values: np.ndarray
    masses: np.ndarray
    infinity_mass: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        p = np.asarray(self.masses, dtype=float).reshape(-1)
        if v.shape != p.shape:
            raise SchemaError("values and masses differ in length")
        if np.any(p < 0) or self.infinity_mass < 0 or not np.all(np.isfinite(v)):
            raise DomainError("masses must be nonnegative and atom values finite")
        total = float(np.sum(p)) + self.infinity_mass
        if abs(total - 1.0) > 1e-12:
            raise DomainError(f"masses sum to {total!r}, not 1")
        order = np.argsort(v, kind="stable")
        v, p = v[order], p[order]
        uniq, start = np.unique(v, return_index=True)
        merged = np.add.reduceat(p, start) if len(v) else p
        object.__setattr__(self, "values", uniq)
        object.__setattr__(self, "masses", merged)
        object.__setattr__(self, "infinity_mass", float(self.infinity_mass))

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.values.tolist(), self.masses.tolist()))


def weighted_quantile(dist: ResidualDistribution, level: float) -> float:
    """Smallest atom ``t`` with ``sum_{r_i <= t} p_i >= level``; ``+inf`` if no atom qualifies."""
    if not 0.0 < level < 1.0:
        raise DomainError(f"level must lie in (0, 1), got {level}")
    cum = np.cumsum(dist.masses)
    j = int(np.searchsorted(cum, level - CUM_TOL, side="left"))
    return float(dist.values[j]) if j < len(cum) else math.inf


@dataclass(frozen=True)
class AlphaSpec:
    total: float
    per_reward: tuple[float, ...]

    def __post_init__(self):
        if not 0.0 < self.total < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {self.total}")
        if not all(0.0 < a < 1.0 for a in self.per_reward):
            raise DomainError("every per-reward alpha must lie in (0, 1)")
        if math.fsum(self.per_reward) > self.total * (1 + 1e-12):
            raise DomainError("per-reward alphas must sum to at most the total alpha")

    @classmethod
    def equal(cls, alpha: float, m: int) -> "AlphaSpec":
        return cls(alpha, (alpha / m,) * m)

    @property
    def m(self) -> int:
        return len(self.per_reward)

    def to_dict(self) -> dict:
        return {"total": self.total, "per_reward": list(self.per_reward)}

    @classmethod
    def from_dict(cls, d: dict) -> "AlphaSpec":
        return cls(float(d["total"]), tuple(float(a) for a in d["per_reward"]))


@dataclass(frozen=True)
class BoundResult:
    decision: int
    bound_vector: tuple[float, ...]
    kappas: tuple[float, ...]
    quantile_predictions: tuple[float, ...]
    clamped: tuple[bool, ...]

    def to_dict(self, alpha: float | None = None, z=None) -> dict:
        return {
            "decision": self.decision,
            "bounds": [_num(b) for b in self.bound_vector],
            "kappas": [_num(k) for k in self.kappas],
            "quantile_predictions": list(self.quantile_predictions),
            "clamped": list(self.clamped),
            "alpha": alpha,
            "z": None if z is None else [float(v) for v in np.atleast_1d(z)],
        }


def _num(v: float):
    # JSON has no infinities
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def compute_residuals(model: QuantileModel, calibration: Dataset, reward: int) -> np.ndarray:
    """``qhat(x_i, z_i) - y_ik`` for every calibration row, in row order."""
    if not 0 <= reward < calibration.m:
        raise SchemaError(f"reward index {reward} outside [0, {calibration.m})")
    if (model.num_decisions, model.d) != (calibration.num_decisions, calibration.d):
        raise SchemaError(
            f"model expects ({model.num_decisions} decisions, {model.d} covariates), "
            f"calibration has ({calibration.num_decisions}, {calibration.d})"
        )
    if calibration.n and model.provenance and row_fingerprints(calibration) <= model.provenance:
        raise ProvenanceError("every calibration row was part of the model's training data")
    if calibration.n == 0:
        return np.zeros(0)
    qhat = predict_quantiles(model, calibration.decisions, calibration.covariates)
    return qhat - calibration.rewards[:, reward]


def adjustment_kappa(
    model: QuantileModel,
    calibration: Dataset,
    policy: PolicyModel,
    x_star: int,
    z_test,
    reward: int,
    alpha_k: float,
    residuals: np.ndarray | None = None,
) -> float:
    r = compute_residuals(model, calibration, reward) if residuals is None else np.asarray(residuals, dtype=float)
    w_cal = policy.weights(x_star, calibration.decisions, calibration.covariates)
    w_test = float(policy.weights(x_star, [x_star], np.atleast_1d(np.asarray(z_test, float))[None, :])[0])
    p, p_inf = normalize(w_cal, w_test)
    keep = p > 0
    dist = ResidualDistribution(r[keep], p[keep], p_inf)
    return weighted_quantile(dist, 1.0 - alpha_k)


def kappa_batch(residuals: np.ndarray, w_cal: np.ndarray, w_test: np.ndarray, level: float) -> np.ndarray:
    """``kappa`` for many test points sharing one calibration set (vectorised ``adjustment_kappa``)."""
    w_test = np.asarray(w_test, dtype=float)
    out = np.full(len(w_test), math.inf)
    keep = w_cal > 0
    r, w = residuals[keep], w_cal[keep]
    if np.isinf(w).any():
        # only the infinite-weight atoms carry mass, equally shared
        r, w = r[np.isinf(w)], np.ones(int(np.isinf(w).sum()))
        finite_test = np.isfinite(w_test)
        if r.size:
            ones = np.zeros(len(w_test))
            out[finite_test] = _quantile_rows(r, w, ones[finite_test], level)
        return out
    finite = np.isfinite(w_test)
    if r.size and finite.any():
        out[finite] = _quantile_rows(r, w, w_test[finite], level)
    return out


def _quantile_rows(r: np.ndarray, w: np.ndarray, w_test: np.ndarray, level: float) -> np.ndarray:
    order = np.argsort(r, kind="stable")
    r, w = r[order], w[order]
    cum = np.cumsum(w)
    total = cum[-1] + w_test
    # cum / total >= level - tol, evaluated without dividing every row
    thr = (level - CUM_TOL) * total
    j = np.searchsorted(cum, thr, side="left")
    res = np.full(len(w_test), math.inf)
    ok = j < len(r)
    res[ok] = r[j[ok]]
    return res


def bounds_batch(
    models,
    calibration: Dataset,
    policy: PolicyModel,
    x_star: int,
    Z_test,
    alpha: AlphaSpec,
    reward_floors=None,
    residuals=None,
) -> dict[str, np.ndarray]:
    """Bounds for decision ``x_star`` at many contexts.

    Returns arrays ``bounds``, ``kappas``, ``qhat`` of shape ``(n, m)`` and boolean ``clamped``.
    ``residuals`` may carry precomputed per-reward calibration residuals.
    """
    m = len(models)
    if alpha.m != m:
        raise SchemaError(f"alpha spec has {alpha.m} rewards, got {m} models")
    floors = np.full(m, -np.inf) if reward_floors is None else np.asarray(reward_floors, dtype=float)
    Z = np.asarray(Z_test, dtype=float).reshape(-1, calibration.d)
    n = len(Z)
    w_cal = policy.weights(x_star, calibration.decisions, calibration.covariates)
    w_test = policy.weights(x_star, np.full(n, x_star), Z)
    dec = np.full(n, x_star)
    qhat = np.empty((n, m))
    kappas = np.empty((n, m))
    for k, model in enumerate(models):
        r = compute_residuals(model, calibration, k) if residuals is None else np.asarray(residuals[k], dtype=float)
        qhat[:, k] = predict_quantiles(model, dec, Z)
        kappas[:, k] = kappa_batch(r, w_cal, w_test, 1.0 - alpha.per_reward[k])
    clamped = np.isinf(kappas)
    with np.errstate(invalid="ignore"):
        raw = np.where(clamped, -np.inf, qhat - kappas)
    bounds = np.maximum(raw, floors[None, :])
    return {"bounds": bounds, "kappas": kappas, "qhat": qhat, "clamped": clamped}


def reward_bound(
    models,
    calibration: Dataset,
    policy: PolicyModel,
    x_star: int,
    z,
    alpha: AlphaSpec,
    reward_floors=None,
    residuals=None,
) -> BoundResult:
    """Bound vector of one decision at one context, one reward at a time."""
    m = len(models)
    if alpha.m != m:
        raise SchemaError(f"alpha spec has {alpha.m} rewards, got {m} models")
    floors = [-math.inf] * m if reward_floors is None else [float(f) for f in reward_floors]
    z = np.atleast_1d(np.asarray(z, dtype=float))
    bounds, kappas, qs, clamped = [], [], [], []
    for k, model in enumerate(models):
        r = None if residuals is None else residuals[k]
        kappa = adjustment_kappa(model, calibration, policy, x_star, z, k, alpha.per_reward[k], residuals=r)
        q = float(predict_quantiles(model, [x_star], z[None, :])[0])
        is_inf = math.isinf(kappa)
        bounds.append(floors[k] if is_inf else max(q - kappa, floors[k]))
        kappas.append(kappa)
        qs.append(q)
        clamped.append(is_inf)
    return BoundResult(x_star, tuple(bounds), tuple(kappas), tuple(qs), tuple(clamped))
