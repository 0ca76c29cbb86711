"""Synthetic decision scenario, interventional draws and the Monte Carlo coverage harness."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.special import expit
from scipy.stats import norm

from .conformal import AlphaSpec, bounds_batch, compute_residuals
from .data import Dataset, split_random
from .errors import DomainError
from .policy import (
    NUM_SYNTHETIC_DECISIONS,
    PolicyModel,
    fit_generative_policy,
    fit_propensity_policy,
    known_policy_fixed,
    known_policy_synthetic,
    unbalanced_probs,
)
from .quantile import QuantileFitConfig, fit_quantile_forest
from .seeding import STREAM_DATA, STREAM_FOREST, STREAM_SPLIT, STREAM_TEST, int_seed_for, rng_for

# reward surface constants per decision 0..4
TABLE_A = (2.4, 0.7, 0.8, 2.0, 1.2)
TABLE_B = (-1.4, 1.5, 1.0, -1.2, 1.0)
TABLE_C = (0.0, 2.2, 0.6, 0.0, 2.2)
TABLE_D = (2.4, -1.5, 1.0, 2.0, -1.0)


@dataclass(frozen=True)
class SyntheticConfig:
    a: tuple[float, ...] = TABLE_A
    b: tuple[float, ...] = TABLE_B
    c: tuple[float, ...] = TABLE_C
    d: tuple[float, ...] = TABLE_D
    noise_sd: float = 0.2
    rho: float = -0.2
    z_mean: float = 60.0
    z_sd: float = 10.0
    policy: str = "uniform"
    n: int = 1000
    seed: int = 0

    def __post_init__(self):
        if abs(self.rho) > 1:
            raise DomainError("rho must lie in [-1, 1]")
        if self.noise_sd < 0 or self.z_sd <= 0:
            raise DomainError("noise_sd must be nonnegative and z_sd positive")
        if self.policy not in ("uniform", "unbalanced"):
            raise DomainError(f"unknown assignment policy {self.policy!r}")
        if not len(self.a) == len(self.b) == len(self.c) == len(self.d) == NUM_SYNTHETIC_DECISIONS:
            raise DomainError("constant tables need one entry per decision")


def reward_means(cfg: SyntheticConfig, decisions, z) -> np.ndarray:
    """Noise-free reward surfaces ``(n, 2)``."""
    x = np.asarray(decisions, dtype=np.int64)
    z = np.asarray(z, dtype=float)
    a, b, c, d = (np.asarray(t)[x] for t in (cfg.a, cfg.b, cfg.c, cfg.d))
    y1 = a + b * expit((z - 55.0) / 9.0)
    y2 = c + d * expit((z - 50.0) / 8.0)
    return np.column_stack([y1, y2])


def _noise(cfg: SyntheticConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    e = rng.standard_normal((n, 2))
    u0 = e[:, 0]
    u1 = cfg.rho * e[:, 0] + math.sqrt(max(1.0 - cfg.rho**2, 0.0)) * e[:, 1]
    return cfg.noise_sd * np.column_stack([u0, u1])


def _rewards(cfg: SyntheticConfig, rng: np.random.Generator, x, z) -> np.ndarray:
    # truncation applies after the noise is added
    return np.maximum(reward_means(cfg, x, z) + _noise(cfg, rng, len(x)), 0.0)


def assign_decisions(s: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(s) / 0.2).astype(np.int64), 0, NUM_SYNTHETIC_DECISIONS - 1)


def _dataset(x, y, z) -> Dataset:
    return Dataset(
        decisions=x,
        rewards=y,
        covariates=np.asarray(z, dtype=float)[:, None],
        num_decisions=NUM_SYNTHETIC_DECISIONS,
        reward_floors=(0.0, 0.0),
        reward_names=("y1", "y2"),
        covariate_names=("z",),
    )


def gen_synthetic(cfg: SyntheticConfig, rng: np.random.Generator | None = None) -> Dataset:
    """Logged training data under the configured assignment policy."""
    rng = rng_for(cfg.seed, STREAM_DATA) if rng is None else rng
    n = cfg.n
    z = rng.normal(cfg.z_mean, cfg.z_sd, n)
    u = rng.uniform(0.0, 1.0, n)
    s = u if cfg.policy == "uniform" else u * expit((70.0 - z) / 5.0)
    x = assign_decisions(s)
    return _dataset(x, _rewards(cfg, rng, x, z), z)


def draw_interventional(cfg: SyntheticConfig, x_star: int, n_test: int, seed: int | None = None,
                        rng: np.random.Generator | None = None) -> Dataset:
    """Draws with the decision forced to ``x_star`` and ``z`` from its marginal."""
    if not 0 <= x_star < NUM_SYNTHETIC_DECISIONS:
        raise DomainError(f"decision {x_star} outside [0, {NUM_SYNTHETIC_DECISIONS})")
    rng = rng_for(cfg.seed if seed is None else seed, STREAM_TEST, x_star) if rng is None else rng
    z = rng.normal(cfg.z_mean, cfg.z_sd, n_test)
    x = np.full(n_test, x_star, dtype=np.int64)
    return _dataset(x, _rewards(cfg, rng, x, z), z)


def policy_marginals(cfg: SyntheticConfig) -> np.ndarray:
    """``p(x)`` of the logging policy, integrating ``p(x|z)`` against the ``z`` density."""
    if cfg.policy == "uniform":
        return np.full(NUM_SYNTHETIC_DECISIONS, 1.0 / NUM_SYNTHETIC_DECISIONS)
    # p(x|z) has kinks where the logistic score crosses a multiple of 0.2
    levels = np.arange(1, NUM_SYNTHETIC_DECISIONS) * 0.2
    kinks = sorted(70.0 - 5.0 * np.log(levels / (1.0 - levels)))
    lo, hi = cfg.z_mean - 12 * cfg.z_sd, cfg.z_mean + 12 * cfg.z_sd
    out = np.empty(NUM_SYNTHETIC_DECISIONS)
    for x in range(NUM_SYNTHETIC_DECISIONS):
        out[x] = quad(
            lambda z: unbalanced_probs([z])[0, x] * norm.pdf(z, cfg.z_mean, cfg.z_sd),
            lo, hi, points=[k for k in kinks if lo < k < hi], limit=500, epsabs=1e-13,
        )[0]
    return out / out.sum()


# ---------------------------------------------------------------------------
# Monte Carlo coverage


POLICY_VARIANTS = ("known", "generative", "propensity")


@dataclass(frozen=True)
class ForestSettings:
    trees: int = 100
    min_leaf: int = 5
    max_depth: int | None = None
    feature_subsample: float = 1.0 / 3.0


def build_policy(variant: str, train: Dataset, cfg: SyntheticConfig) -> PolicyModel:
    if variant == "known":
        return known_policy_synthetic(cfg.policy)
    if variant == "generative":
        return fit_generative_policy(train)
    if variant == "propensity":
        return fit_propensity_policy(train)
    raise DomainError(f"unknown policy variant {variant!r}")


@dataclass
class _RepResult:
    violations: np.ndarray  # (A, K, m + 1) counts, last slot is the joint event
    clamps: np.ndarray  # (A, K, m + 1) counts, last slot is "all rewards clamped"
    probe_clamped: np.ndarray  # (A, P, K, m + 1) booleans
    notes: list


def _replicate(cfg: SyntheticConfig, alphas, n_test, variant, seed, r, forest: ForestSettings, probe_z) -> _RepResult:
    data = gen_synthetic(cfg, rng_for(seed, STREAM_DATA, r))
    split = split_random(data, int_seed_for(seed, STREAM_SPLIT, r))
    train, cal = split.proper_training, split.calibration
    policy = build_policy(variant, train, cfg)
    K, m = NUM_SYNTHETIC_DECISIONS, data.m
    notes = []
    counts = np.bincount(train.decisions, minlength=K)
    for x in np.flatnonzero(counts < 4):
        notes.append({"replicate": r, "decision": int(x), "issue": f"{int(counts[x])} training rows"})
    if variant == "generative":
        for x, rep in enumerate(policy.reports):
            if rep is not None and rep.fallback:
                notes.append({"replicate": r, "decision": x, "issue": "gmm fallback"})

    tests = [draw_interventional(cfg, x, n_test, rng=rng_for(seed, STREAM_TEST, r, x)) for x in range(K)]
    P = len(probe_z)
    viol = np.zeros((len(alphas), K, m + 1), dtype=np.int64)
    clamps = np.zeros_like(viol)
    probe = np.zeros((len(alphas), P, K, m + 1), dtype=bool)
    for a_i, alpha in enumerate(alphas):
        spec = AlphaSpec.equal(alpha, m)
        models = [
            fit_quantile_forest(
                train,
                k,
                QuantileFitConfig(
                    level=spec.per_reward[k],
                    trees=forest.trees,
                    min_leaf=forest.min_leaf,
                    max_depth=forest.max_depth,
                    feature_subsample=forest.feature_subsample,
                    seed=int_seed_for(seed, STREAM_FOREST, r, a_i, k),
                ),
            )
            for k in range(m)
        ]
        residuals = [compute_residuals(mod, cal, k) for k, mod in enumerate(models)]
        for x in range(K):
            test = tests[x]
            Z = np.concatenate([test.covariates, np.asarray(probe_z, dtype=float).reshape(P, 1)])
            out = bounds_batch(models, cal, policy, x, Z, spec, data.reward_floors, residuals)
            b, cl = out["bounds"][:n_test], out["clamped"][:n_test]
            below = test.rewards < b
            viol[a_i, x, :m] = below.sum(axis=0)
            viol[a_i, x, m] = below.any(axis=1).sum()
            clamps[a_i, x, :m] = cl.sum(axis=0)
            clamps[a_i, x, m] = cl.all(axis=1).sum()
            pc = out["clamped"][n_test:]
            probe[a_i, :, x, :m] = pc
            probe[a_i, :, x, m] = pc.all(axis=1)
    return _RepResult(viol, clamps, probe, notes)


def _run_replicate(args):
    return _replicate(*args)


@dataclass
class CoverageReport:
    alphas: tuple[float, ...]
    replicates: int
    n_test: int
    variant: str
    reward_names: tuple[str, ...]
    violation_counts: np.ndarray  # (A, K, m + 1) summed over replicates
    clamp_counts: np.ndarray
    per_replicate_rates: np.ndarray = field(repr=False)  # (R, A, K, m + 1)
    policy_mass: np.ndarray = field(repr=False)
    probe_z: tuple[float, ...] = ()
    probe_clamp_rate: np.ndarray | None = None  # (A, P, K, m + 1)
    degenerate: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def trials(self) -> int:
        return self.replicates * self.n_test

    @property
    def violation_rate(self) -> np.ndarray:
        """Per (alpha, decision, reward/joint) rate pooled over replicates and draws."""
        return self.violation_counts / self.trials

    @property
    def se(self) -> np.ndarray:
        p = self.violation_rate
        return np.sqrt(p * (1 - p) / self.trials)

    @property
    def se_replicate(self) -> np.ndarray:
        """Standard error from the spread of per-replicate rates (accounts for shared calibration)."""
        if self.replicates < 2:
            return np.full(self.violation_counts.shape, np.nan)
        return self.per_replicate_rates.std(axis=0, ddof=1) / math.sqrt(self.replicates)

    @property
    def clamp_rate(self) -> np.ndarray:
        return self.clamp_counts / self.trials

    def marginal(self, weighting: str = "equal") -> tuple[np.ndarray, np.ndarray]:
        """Rates marginalised over decisions, ``(A, m + 1)``, with binomial standard errors."""
        K = self.violation_counts.shape[1]
        w = np.full(K, 1.0 / K) if weighting == "equal" else np.asarray(self.policy_mass)
        rate = np.einsum("akj,k->aj", self.violation_rate, w)
        var = np.einsum("akj,k->aj", self.violation_rate * (1 - self.violation_rate) / self.trials, w**2)
        return rate, np.sqrt(var)

    def to_dict(self) -> dict:
        names = [*self.reward_names, "joint"]
        rate, se = self.violation_rate, self.se
        se_rep = self.se_replicate
        rows = []
        for a_i, alpha in enumerate(self.alphas):
            for x in range(rate.shape[1]):
                for j, name in enumerate(names):
                    rows.append(
                        {
                            "alpha": alpha,
                            "decision": x,
                            "reward": name,
                            "violation_rate": float(rate[a_i, x, j]),
                            "se": float(se[a_i, x, j]),
                            "se_replicate": None if np.isnan(se_rep[a_i, x, j]) else float(se_rep[a_i, x, j]),
                            "clamp_rate": float(self.clamp_rate[a_i, x, j]),
                        }
                    )
        marginals = {}
        for weighting in ("equal", "policy"):
            mr, ms = self.marginal(weighting)
            marginals[weighting] = [
                {"alpha": alpha, "reward": name, "violation_rate": float(mr[a_i, j]), "se": float(ms[a_i, j])}
                for a_i, alpha in enumerate(self.alphas)
                for j, name in enumerate(names)
            ]
        probes = []
        if self.probe_clamp_rate is not None:
            for a_i, alpha in enumerate(self.alphas):
                for p_i, z in enumerate(self.probe_z):
                    for x in range(self.probe_clamp_rate.shape[2]):
                        probes.append(
                            {
                                "alpha": alpha,
                                "z": z,
                                "decision": x,
                                "clamp_rate": [float(v) for v in self.probe_clamp_rate[a_i, p_i, x]],
                            }
                        )
        return {
            "alphas": list(self.alphas),
            "replicates": self.replicates,
            "n_test_per_decision": self.n_test,
            "policy_variant": self.variant,
            "rewards": names,
            "per_decision": rows,
            "marginal": marginals,
            "policy_mass": [float(v) for v in self.policy_mass],
            "probe_clamp": probes,
            "degenerate": self.degenerate,
            "config": self.config,
        }

    def csv_rows(self) -> tuple[list[str], list[list]]:
        header = ["alpha", "decision", "reward", "violation_rate", "se", "clamp_rate"]
        names = [*self.reward_names, "joint"]
        rows = []
        rate, se, cr = self.violation_rate, self.se, self.clamp_rate
        for a_i, alpha in enumerate(self.alphas):
            for x in range(rate.shape[1]):
                for j, name in enumerate(names):
                    rows.append([repr(alpha), x, name, repr(float(rate[a_i, x, j])), repr(float(se[a_i, x, j])),
                                 repr(float(cr[a_i, x, j]))])
            for weighting in ("equal", "policy"):
                mr, ms = self.marginal(weighting)
                for j, name in enumerate(names):
                    rows.append([repr(alpha), f"all-{weighting}", name, repr(float(mr[a_i, j])), repr(float(ms[a_i, j])), ""])
        return header, rows


def coverage_mc(
    cfg: SyntheticConfig,
    alpha,
    replicates: int = 500,
    n_test: int = 200,
    policy_variant: str = "known",
    seed: int = 0,
    threads: int = 1,
    forest: ForestSettings = ForestSettings(),
    probe_z=(),
) -> CoverageReport:
    """Repeat generate -> split -> fit -> bound -> evaluate and pool the violation indicators.

    Replicate ``r`` draws everything from seeds derived from ``(seed, r)``; the result is
    identical for any ``threads``.
    """
    alphas = tuple(float(a) for a in np.atleast_1d(alpha))
    if not all(0.0 < a < 1.0 for a in alphas):
        raise DomainError("alpha must lie in (0, 1)")
    if policy_variant not in POLICY_VARIANTS:
        raise DomainError(f"unknown policy variant {policy_variant!r}")
    if replicates < 1 or n_test < 1:
        raise DomainError("replicates and n_test must be positive")
    probe_z = tuple(float(z) for z in probe_z)
    jobs = [(cfg, alphas, n_test, policy_variant, seed, r, forest, probe_z) for r in range(replicates)]
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            results = list(pool.map(_run_replicate, jobs, chunksize=max(1, replicates // (4 * threads))))
    else:
        results = [_run_replicate(j) for j in jobs]

    viol = np.sum([res.violations for res in results], axis=0)
    clamps = np.sum([res.clamps for res in results], axis=0)
    per_rep = np.stack([res.violations for res in results]) / n_test
    probe = np.mean([res.probe_clamped for res in results], axis=0) if probe_z else None
    notes = [note for res in results for note in res.notes]
    return CoverageReport(
        alphas=alphas,
        replicates=replicates,
        n_test=n_test,
        variant=policy_variant,
        reward_names=("y1", "y2"),
        violation_counts=viol,
        clamp_counts=clamps,
        per_replicate_rates=per_rep,
        policy_mass=policy_marginals(cfg),
        probe_z=probe_z,
        probe_clamp_rate=probe,
        degenerate=notes,
        config={
            "synthetic": asdict(cfg),
            "forest": asdict(forest),
            "seed": seed,
            "policy_variant": policy_variant,
        },
    )


# ---------------------------------------------------------------------------
# STAR-shaped stand-in

STAR_COVARIATES = (
    "gender",
    "race",
    "birth_month",
    "birth_year",
    "free_lunch",
    "school_urban",
    "school_suburban",
    "school_rural",
    "teacher_degree",
    "teacher_career",
    "teacher_experience",
)
STAR_CLASS_PROBS = (0.30, 0.38, 0.32)  # small, regular, regular-with-aide


def star_standin(n: int = 6322, seed: int = 0, class_probs=STAR_CLASS_PROBS) -> Dataset:
    """Schema-compatible synthetic replacement for the first-grade class-size data.

    Eleven pre-treatment covariates, a randomised three-arm class-type decision and an
    achievement score ``y1``.  The values are invented; only the shape matches.
    """
    rng = rng_for(seed, STREAM_DATA)
    gender = rng.integers(0, 2, n)
    race = (rng.uniform(size=n) < 0.33).astype(int)
    month = rng.integers(1, 13, n)
    year = rng.choice([1979, 1980, 1981], size=n, p=[0.2, 0.7, 0.1])
    lunch = (rng.uniform(size=n) < 0.5).astype(int)
    area = rng.choice(3, size=n, p=[0.25, 0.5, 0.25])
    degree = (rng.uniform(size=n) < 0.35).astype(int)
    career = rng.integers(0, 4, n)
    exper = np.round(rng.gamma(2.5, 4.5, n))
    Z = np.column_stack([gender, race, month, year, lunch, area == 0, area == 1, area == 2, degree, career, exper]).astype(float)
    x = rng.choice(3, size=n, p=np.asarray(class_probs))
    effect = np.array([30.0, 0.0, 10.0])[x]
    score = (
        1530.0
        + effect
        + 12.0 * gender
        - 35.0 * lunch
        - 20.0 * race
        + 15.0 * (area == 1)
        + 1.2 * np.minimum(exper, 20)
        + rng.normal(0.0, 45.0, n)
    )
    return Dataset(
        decisions=x,
        rewards=score[:, None],
        covariates=Z,
        num_decisions=3,
        reward_names=("y1",),
        covariate_names=STAR_COVARIATES,
        decision_name="class_type",
    )


def star_known_policy(class_probs=STAR_CLASS_PROBS) -> PolicyModel:
    return known_policy_fixed(class_probs, d=len(STAR_COVARIATES))


__all__ = [
    "SyntheticConfig",
    "ForestSettings",
    "CoverageReport",
    "gen_synthetic",
    "draw_interventional",
    "coverage_mc",
    "reward_means",
    "policy_marginals",
    "star_standin",
    "star_known_policy",
]

