"""Decision-policy models and the importance weight ``w(x*, z) = 1(x = x*) / p(x* | z)``.

Three variants are supported:

``known``
    a closed-form logging policy (uniform, the unbalanced synthetic rule, or a
    fixed context-free probability table).
``propensity``
    a multinomial logistic model of ``p(x | z)``.
``generative``
    per-decision Gaussian mixtures of ``p(z | x)`` with decision marginals ``p(x)``;
    the weight is then ``sum_x' p(z|x') p(x') / (p(z|x*) p(x*))``, which equals
    ``1 / p(x* | z)`` by Bayes' rule.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp
from sklearn.linear_model import LogisticRegression

from .data import Dataset
from .errors import DegenerateWeightsError, DomainError, SchemaError

NUM_SYNTHETIC_DECISIONS = 5
VAR_FLOOR = 1e-6


def unbalanced_probs(z) -> np.ndarray:
    """Exact ``p(x | z)`` of the rule ``s = u * sigmoid((70 - z) / 5)`` with 0.2-wide bins."""
    z = np.asarray(z, dtype=float).reshape(-1)
    F = expit((70.0 - z) / 5.0)[:, None]
    lo = 0.2 * np.arange(NUM_SYNTHETIC_DECISIONS)[None, :]
    mass = np.clip(np.minimum(lo + 0.2, F) - np.minimum(lo, F), 0.0, None)
    return mass / F


# ---------------------------------------------------------------------------
# Gaussian mixtures


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Diagonal-covariance mixture; arrays are ``(C,)``, ``(C, d)``, ``(C, d)``."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def log_pdf(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float).reshape(-1, self.means.shape[1])
        diff = Z[:, None, :] - self.means[None, :, :]
        comp = -0.5 * np.sum(diff**2 / self.variances + np.log(2 * np.pi * self.variances), axis=2)
        with np.errstate(divide="ignore"):
            return logsumexp(comp + np.log(self.weights), axis=1)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "variances": self.variances.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        return cls(np.asarray(d["weights"], float), np.asarray(d["means"], float), np.asarray(d["variances"], float))


@dataclass(frozen=True)
class GmmFitReport:
    log_likelihood: tuple[float, ...]
    iterations: int
    converged: bool
    fallback: bool = False


def _single_gaussian(Z: np.ndarray, var_floor: float) -> GaussianMixture:
    var = np.maximum(Z.var(axis=0), var_floor)
    return GaussianMixture(np.ones(1), Z.mean(axis=0)[None, :], var[None, :])


def fit_gmm_em(
    Z,
    components: int = 2,
    tol: float = 1e-6,
    max_iter: int = 200,
    var_floor: float = VAR_FLOOR,
) -> tuple[GaussianMixture | None, GmmFitReport]:
    """EM for a diagonal Gaussian mixture.

    Initialisation sorts the samples along their leading principal direction and
    splits them into ``components`` equal-count groups.  Iteration stops when the
    mean per-sample log-likelihood changes by less than ``tol``.

    With fewer than ``2 * components`` samples a single Gaussian is fitted and the
    report's ``fallback`` flag is set; with no samples the mixture is ``None``.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    n = Z.shape[0]
    if n == 0:
        return None, GmmFitReport((), 0, False, fallback=True)
    if n < 2 * components:
        warnings.warn(f"{n} samples are too few for {components} components; fitting one Gaussian", stacklevel=2)
        g = _single_gaussian(Z, var_floor)
        return g, GmmFitReport((float(np.mean(g.log_pdf(Z))),), 0, True, fallback=True)

    if Z.shape[1] == 1:
        proj = Z[:, 0]
    else:
        _, vecs = np.linalg.eigh(np.cov(Z, rowvar=False))
        proj = (Z - Z.mean(axis=0)) @ vecs[:, -1]
    groups = np.array_split(np.argsort(proj, kind="stable"), components)
    weights = np.array([len(g) / n for g in groups])
    means = np.array([Z[g].mean(axis=0) for g in groups])
    variances = np.array([np.maximum(Z[g].var(axis=0), var_floor) for g in groups])

    trace: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        # E-step
        diff = Z[:, None, :] - means[None, :, :]
        logc = np.log(weights) - 0.5 * np.sum(diff**2 / variances + np.log(2 * np.pi * variances), axis=2)
        lse = logsumexp(logc, axis=1)
        trace.append(float(np.mean(lse)))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
        resp = np.exp(logc - lse[:, None])
        # M-step
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / n
        means = (resp.T @ Z) / nk[:, None]
        variances = np.maximum((resp.T @ Z**2) / nk[:, None] - means**2, var_floor)
    return GaussianMixture(weights, means, variances), GmmFitReport(tuple(trace), it, converged)


# ---------------------------------------------------------------------------
# policy container


@dataclass(frozen=True, eq=False)
class PolicyModel:
    variant: str
    num_decisions: int
    d: int
    rule: str | None = None  # known: uniform | unbalanced | fixed
    probs: np.ndarray | None = None  # known/fixed: p(x)
    marginals: np.ndarray | None = None  # generative: p(x) on the fitting data
    mixtures: tuple[GaussianMixture | None, ...] = ()
    reports: tuple[GmmFitReport | None, ...] = field(default=(), repr=False)
    coef: np.ndarray | None = None  # propensity: (K, d)
    intercept: np.ndarray | None = None
    z_mean: np.ndarray | None = None
    z_scale: np.ndarray | None = None

    def conditional(self, Z) -> np.ndarray:
        """``p(x | z)`` as an ``(n, K)`` matrix (not defined for the generative variant)."""
        Z = np.asarray(Z, dtype=float).reshape(-1, self.d)
        if self.variant == "known":
            if self.rule == "uniform":
                return np.full((len(Z), self.num_decisions), 1.0 / self.num_decisions)
            if self.rule == "unbalanced":
                return unbalanced_probs(Z[:, 0])
            return np.tile(self.probs, (len(Z), 1))
        if self.variant == "propensity":
            logits = ((Z - self.z_mean) / self.z_scale) @ self.coef.T + self.intercept
            return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        # generative: Bayes' rule, for inspection only
        logj = self._log_joint(Z)
        with np.errstate(invalid="ignore"):
            return np.exp(logj - logsumexp(logj, axis=1, keepdims=True))

    def _log_joint(self, Z) -> np.ndarray:
        """``log p(z | x) + log p(x)`` as ``(n, K)``; ``-inf`` for absent decisions."""
        out = np.full((len(Z), self.num_decisions), -np.inf)
        for x, g in enumerate(self.mixtures):
            if g is not None and self.marginals[x] > 0:
                out[:, x] = g.log_pdf(Z) + np.log(self.marginals[x])
        return out

    def weights(self, x_star: int, decisions, Z) -> np.ndarray:
        """Raw weights ``w(x*, z_i)`` for rows with the given decisions (0 where ``x_i != x*``)."""
        self._check(x_star)
        dec = np.atleast_1d(np.asarray(decisions, dtype=np.int64))
        if dec.size and (dec.min() < 0 or dec.max() >= self.num_decisions):
            raise DomainError(f"decisions outside [0, {self.num_decisions})")
        Z = np.asarray(Z, dtype=float).reshape(len(dec), self.d)
        out = np.zeros(len(dec))
        hit = dec == x_star
        if not hit.any():
            return out
        Zh = Z[hit]
        if self.variant == "generative":
            logj = self._log_joint(Zh)
            num = logsumexp(logj, axis=1)
            den = logj[:, x_star]
            with np.errstate(over="ignore", invalid="ignore"):
                w = np.exp(num - den)
            w[np.isneginf(den)] = np.inf
        else:
            p = self.conditional(Zh)[:, x_star]
            with np.errstate(divide="ignore"):
                w = np.where(p > 0, 1.0 / np.where(p > 0, p, 1.0), np.inf)
        out[hit] = w
        return out

    def _check(self, x: int):
        if not 0 <= x < self.num_decisions:
            raise DomainError(f"decision {x} outside [0, {self.num_decisions})")

    def to_dict(self) -> dict:
        out = {"variant": self.variant, "num_decisions": self.num_decisions, "d": self.d}
        if self.variant == "known":
            out["rule"] = self.rule
            if self.probs is not None:
                out["probs"] = self.probs.tolist()
        elif self.variant == "propensity":
            out.update(
                coef=self.coef.tolist(),
                intercept=self.intercept.tolist(),
                z_mean=self.z_mean.tolist(),
                z_scale=self.z_scale.tolist(),
            )
        else:
            out["marginals"] = self.marginals.tolist()
            out["mixtures"] = [None if g is None else g.to_dict() for g in self.mixtures]
            out["gmm_reports"] = [
                None if r is None else {"iterations": r.iterations, "converged": r.converged, "fallback": r.fallback}
                for r in self.reports
            ]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyModel":
        base = dict(variant=d["variant"], num_decisions=int(d["num_decisions"]), d=int(d["d"]))
        if d["variant"] == "known":
            probs = d.get("probs")
            return cls(rule=d["rule"], probs=None if probs is None else np.asarray(probs, float), **base)
        if d["variant"] == "propensity":
            return cls(
                coef=np.asarray(d["coef"], float),
                intercept=np.asarray(d["intercept"], float),
                z_mean=np.asarray(d["z_mean"], float),
                z_scale=np.asarray(d["z_scale"], float),
                **base,
            )
        if d["variant"] == "generative":
            return cls(
                marginals=np.asarray(d["marginals"], float),
                mixtures=tuple(None if g is None else GaussianMixture.from_dict(g) for g in d["mixtures"]),
                **base,
            )
        raise SchemaError(f"unknown policy variant {d['variant']!r}")


def weight(policy: PolicyModel, x_star: int, x: int, z) -> float:
    policy._check(x)
    return float(policy.weights(x_star, [x], np.atleast_1d(np.asarray(z, dtype=float))[None, :])[0])


def known_policy_synthetic(kind: str) -> PolicyModel:
    if kind not in ("uniform", "unbalanced"):
        raise DomainError(f"unknown synthetic policy {kind!r}")
    return PolicyModel(variant="known", num_decisions=NUM_SYNTHETIC_DECISIONS, d=1, rule=kind)


def known_policy_fixed(probs, d: int) -> PolicyModel:
    """Context-free known policy, e.g. a randomised trial with unequal arm sizes."""
    p = np.asarray(probs, dtype=float)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise DomainError("probs must be a probability vector")
    return PolicyModel(variant="known", num_decisions=len(p), d=d, rule="fixed", probs=p)


def fit_generative_policy(
    data: Dataset, components: int = 2, tol: float = 1e-6, max_iter: int = 200
) -> PolicyModel:
    """Per-decision GMMs of ``p(z | x)`` and empirical ``p(x)`` fitted on ``data``."""
    K = data.num_decisions
    counts = np.bincount(data.decisions, minlength=K).astype(float)
    marginals = counts / max(data.n, 1)
    mixtures, reports = [], []
    for x in range(K):
        g, rep = fit_gmm_em(data.covariates[data.decisions == x], components, tol, max_iter)
        mixtures.append(g)
        reports.append(rep)
    return PolicyModel(
        variant="generative", num_decisions=K, d=data.d, marginals=marginals, mixtures=tuple(mixtures), reports=tuple(reports)
    )


def fit_propensity_policy(data: Dataset, max_iter: int = 1000) -> PolicyModel:
    """Multinomial logistic ``p(x | z)``; decisions absent from ``data`` get probability 0."""
    K, d = data.num_decisions, data.d
    z_mean = data.covariates.mean(axis=0)
    z_scale = data.covariates.std(axis=0)
    z_scale = np.where(z_scale > 0, z_scale, 1.0)
    present = np.unique(data.decisions)
    coef = np.zeros((K, d))
    intercept = np.full(K, -np.inf)
    if len(present) == 1:
        intercept[present[0]] = 0.0
    else:
        clf = LogisticRegression(max_iter=max_iter)
        clf.fit((data.covariates - z_mean) / z_scale, data.decisions)
        if len(present) == 2:
            # sklearn's binary parametrisation: one row for the second class
            coef[present[1]] = clf.coef_[0]
            intercept[present[0]] = 0.0
            intercept[present[1]] = clf.intercept_[0]
        else:
            coef[present] = clf.coef_
            intercept[present] = clf.intercept_
    return PolicyModel(variant="propensity", num_decisions=K, d=d, coef=coef, intercept=intercept, z_mean=z_mean, z_scale=z_scale)


def normalized_weights(policy: PolicyModel, x_star: int, calibration: Dataset, z_test) -> tuple[np.ndarray, float]:
    """Probability weights over the calibration rows plus the mass at infinity.

    Infinite raw weights absorb all mass (shared equally among themselves).
    """
    w_cal = policy.weights(x_star, calibration.decisions, calibration.covariates)
    w_test = weight(policy, x_star, x_star, z_test)
    return normalize(w_cal, w_test)


def normalize(w_cal: np.ndarray, w_test: float) -> tuple[np.ndarray, float]:
    w_cal = np.asarray(w_cal, dtype=float)
    if np.isinf(w_test):
        return np.zeros(len(w_cal)), 1.0
    inf_cal = np.isinf(w_cal)
    if inf_cal.any():
        return inf_cal / inf_cal.sum(), 0.0
    total = float(np.sum(w_cal)) + w_test
    if total <= 0:
        raise DegenerateWeightsError("all calibration weights and the test weight are zero")
    return w_cal / total, w_test / total
