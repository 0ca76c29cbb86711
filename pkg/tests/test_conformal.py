import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from confpareto.conformal import (
    AlphaSpec,
    BoundResult,
    ResidualDistribution,
    adjustment_kappa,
    bounds_batch,
    compute_residuals,
    reward_bound,
    weighted_quantile,
)
from confpareto.data import Dataset
from confpareto.errors import DomainError, ProvenanceError, SchemaError
from confpareto.policy import known_policy_synthetic
from confpareto.quantile import QuantileFitConfig, QuantileModel, fit_quantile_forest


def linear_model(coef, K=5, d=1, level=0.1):
    return QuantileModel("linear", level, K, d, (0.0, 1.0), coef=np.asarray(coef, dtype=float))


def cal_data(rng, n=200, K=5, m=1):
    dec = rng.integers(0, K, n)
    z = rng.normal(60, 10, (n, 1))
    return Dataset(decisions=dec, rewards=rng.normal(size=(n, m)), covariates=z, num_decisions=K)


def enumerate_quantile(values, masses, p_inf, level):
    """Scan candidate thresholds in increasing order and sum the masses at or below each."""
    for t in sorted(set(values)):
        if sum(p for v, p in zip(values, masses) if v <= t) >= level - 1e-12:
            return t
    return math.inf


# --- residuals -----------------------------------------------------------


def test_perfect_model_has_zero_residuals(rng):
    coef = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 0.5])
    dec = rng.integers(0, 5, 50)
    z = rng.normal(size=(50, 1))
    y = np.hstack([np.eye(5)[dec], z]) @ coef
    cal = Dataset(decisions=dec, rewards=y[:, None], covariates=z, num_decisions=5)
    assert np.all(compute_residuals(linear_model(coef), cal, 0) == 0.0)


def test_constant_model_residuals(rng):
    cal = cal_data(rng)
    r = compute_residuals(linear_model([2.5] * 5 + [0.0]), cal, 0)
    assert np.array_equal(r, 2.5 - cal.rewards[:, 0])


def test_residuals_are_pure(small_forest, synthetic_split):
    a = compute_residuals(small_forest, synthetic_split.calibration, 0)
    b = compute_residuals(small_forest, synthetic_split.calibration, 0)
    assert np.array_equal(a, b) and len(a) == synthetic_split.calibration.n


def test_residual_errors(small_forest, synthetic_split, rng):
    with pytest.raises(SchemaError):
        compute_residuals(small_forest, cal_data(rng, K=4), 0)
    with pytest.raises(SchemaError):
        compute_residuals(small_forest, synthetic_split.calibration, 2)
    with pytest.raises(ProvenanceError):
        compute_residuals(small_forest, synthetic_split.proper_training, 0)


# --- weighted quantile ---------------------------------------------------


def test_weighted_quantile_examples():
    dist = ResidualDistribution(np.arange(1.0, 11.0), np.full(10, 1 / 11), 1 / 11)
    assert weighted_quantile(dist, 0.9) == 10.0
    assert weighted_quantile(ResidualDistribution([], [], 1.0), 0.01) == math.inf
    half = ResidualDistribution([5.0], [0.5], 0.5)
    assert weighted_quantile(half, 0.5) == 5.0
    assert weighted_quantile(half, 0.6) == math.inf


def test_distribution_validation():
    with pytest.raises(DomainError):
        ResidualDistribution([1.0], [0.5], 0.4)
    with pytest.raises(DomainError):
        ResidualDistribution([1.0, 2.0], [1.2, -0.2], 0.0)
    with pytest.raises(SchemaError):
        ResidualDistribution([1.0, 2.0], [1.0], 0.0)
    with pytest.raises(DomainError):
        weighted_quantile(ResidualDistribution([1.0], [1.0], 0.0), 1.0)


def test_atoms_sorted_and_merged():
    dist = ResidualDistribution([3.0, 1.0, 3.0], [0.25, 0.25, 0.25], 0.25)
    assert dist.atoms == [(1.0, 0.25), (3.0, 0.5)]


dist_strategy = st.integers(0, 8).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(-5, 5).map(float), min_size=n, max_size=n),
        st.lists(st.floats(0.01, 10), min_size=n + 1, max_size=n + 1),
    )
)


def build(values, raw):
    raw = np.asarray(raw)
    p = raw / raw.sum()
    # force exact unit total so validation never trips on rounding
    p_inf = max(1.0 - p[:-1].sum(), 0.0)
    return ResidualDistribution(values, p[:-1], p_inf), p[:-1], p_inf


@given(dist_strategy, st.floats(0.01, 0.99))
def test_matches_enumeration(case, level):
    values, raw = case
    dist, p, p_inf = build(values, raw)
    assert weighted_quantile(dist, level) == enumerate_quantile(values, p, p_inf, level)


@given(dist_strategy, st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_non_decreasing_in_level(case, level, step):
    dist, _, _ = build(*case)
    assert weighted_quantile(dist, level) <= weighted_quantile(dist, min(level + step, 0.99))


@given(dist_strategy, st.floats(0.01, 0.99), st.randoms())
def test_permutation_and_split_atoms(case, level, rnd):
    values, raw = case
    dist, p, p_inf = build(values, raw)
    order = list(range(len(values)))
    rnd.shuffle(order)
    shuffled = ResidualDistribution([values[i] for i in order], p[order], p_inf)
    # splitting each atom in two halves is the inverse of merging ties
    split = ResidualDistribution(values + values, np.concatenate([p / 2, p / 2]), p_inf)
    q = weighted_quantile(dist, level)
    assert weighted_quantile(shuffled, level) == q
    assert weighted_quantile(split, level) == q


@given(dist_strategy, st.floats(0.01, 0.99), st.floats(0.0, 0.9))
def test_more_mass_at_infinity_never_lowers(case, level, extra):
    dist, p, p_inf = build(*case)
    scale = 1.0 - extra
    heavier = ResidualDistribution(case[0], p * scale, 1.0 - (p * scale).sum())
    assert weighted_quantile(heavier, level) >= weighted_quantile(dist, level)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.floats(0.01, 0.99))
def test_equal_masses_give_empirical_quantile(values, level):
    n = len(values)
    dist = ResidualDistribution(values, np.full(n, 1.0 / n), 0.0)
    v = np.sort(values)
    expect = v[max(math.ceil(level * n - 1e-9), 1) - 1]
    assert weighted_quantile(dist, level) == expect


# --- adjustment and bounds -----------------------------------------------


def test_kappa_uniform_policy_matches_unweighted_quantile(rng):
    n = 999
    dec = np.zeros(n, dtype=int)
    z = rng.normal(60, 10, (n, 1))
    y = rng.normal(size=n)
    cal = Dataset(decisions=dec, rewards=y[:, None], covariates=z, num_decisions=5)
    model = linear_model([0.0] * 6)
    kappa = adjustment_kappa(model, cal, known_policy_synthetic("uniform"), 0, [60.0], 0, 0.1)
    r = np.sort(-y)
    # the test point's mass at infinity makes this the ceil(0.9 (n+1))-th order statistic
    assert kappa == r[math.ceil(0.9 * (n + 1)) - 1]
    assert kappa == pytest.approx(np.quantile(-y, 0.9), abs=0.05)


def test_kappa_without_matching_data_is_infinite(rng):
    cal = cal_data(rng)
    cal = cal.replace(decisions=np.where(cal.decisions == 3, 2, cal.decisions))
    assert adjustment_kappa(linear_model([0.0] * 6), cal, known_policy_synthetic("uniform"), 3, [60.0], 0, 0.1) == math.inf


def test_kappa_at_tiny_level_is_smallest_residual(rng):
    cal = cal_data(rng)
    model = linear_model([0.0] * 6)
    r = compute_residuals(model, cal, 0)
    kappa = adjustment_kappa(model, cal, known_policy_synthetic("uniform"), 1, [60.0], 0, 1 - 1e-9)
    assert kappa == r[cal.decisions == 1].min()


def test_zero_kappa_returns_quantile_predictions(rng):
    cal = cal_data(rng, m=2)
    models = [linear_model([1, 2, 3, 4, 5, 0.01]), linear_model([0, 0, 0, 0, 0, 0.02])]
    res = reward_bound(models, cal, known_policy_synthetic("uniform"), 2, [50.0], AlphaSpec.equal(0.2, 2),
                       residuals=[np.zeros(cal.n), np.zeros(cal.n)])
    assert res.kappas == (0.0, 0.0)
    assert res.bound_vector == res.quantile_predictions == (3.5, 1.0)


def test_infinite_kappa_clamps_to_floor(rng):
    cal = cal_data(rng, m=2)
    cal = cal.replace(decisions=np.where(cal.decisions == 4, 0, cal.decisions))
    models = [linear_model([1.0] * 6), linear_model([2.0] * 6)]
    res = reward_bound(models, cal, known_policy_synthetic("uniform"), 4, [50.0], AlphaSpec.equal(0.2, 2), (0.0, -math.inf))
    assert res.bound_vector == (0.0, -math.inf)
    assert res.clamped == (True, True)
    assert res.to_dict(0.2, [50.0])["kappas"] == ["inf", "inf"]


def test_default_allocation_uses_level_point_nine(small_forest, synthetic_split):
    cal = synthetic_split.calibration
    spec = AlphaSpec.equal(0.2, 2)
    assert spec.per_reward == (0.1, 0.1)
    pol = known_policy_synthetic("uniform")
    res = reward_bound([small_forest, small_forest], cal, pol, 0, [60.0], spec)
    r = compute_residuals(small_forest, cal, 0)[cal.decisions == 0]
    n = len(r)
    dist = ResidualDistribution(r, np.full(n, 1 / (n + 1)), 1 - n / (n + 1))
    assert res.kappas[0] == weighted_quantile(dist, 0.9)


def test_batch_matches_scalar_path(small_forest, synthetic_split, rng):
    cal = synthetic_split.calibration
    pol = known_policy_synthetic("unbalanced")
    spec = AlphaSpec(0.3, (0.1, 0.15))
    Z = rng.normal(60, 15, (25, 1))
    for x in range(5):
        out = bounds_batch([small_forest, small_forest], cal, pol, x, Z, spec, (0.0, 0.0))
        for i, z in enumerate(Z):
            one = reward_bound([small_forest, small_forest], cal, pol, x, z, spec, (0.0, 0.0))
            assert tuple(out["bounds"][i]) == one.bound_vector
            assert tuple(out["clamped"][i]) == one.clamped


@given(a1=st.floats(0.01, 0.45), a2=st.floats(0.01, 0.45), bump=st.floats(0.0, 0.04), z=st.floats(20, 100))
def test_bound_monotone_in_alpha(small_forest, synthetic_split, a1, a2, bump, z):
    cal = synthetic_split.calibration
    pol = known_policy_synthetic("uniform")
    lo = AlphaSpec(a1 + a2, (a1, a2))
    hi = AlphaSpec(a1 + a2 + 2 * bump, (a1 + bump, a2 + bump))
    for x in (0, 3):
        b_lo = reward_bound([small_forest, small_forest], cal, pol, x, [z], lo, (0.0, 0.0))
        b_hi = reward_bound([small_forest, small_forest], cal, pol, x, [z], hi, (0.0, 0.0))
        assert all(h >= l for h, l in zip(b_hi.bound_vector, b_lo.bound_vector))
        assert all(b >= 0.0 for b in b_lo.bound_vector)


def test_alpha_spec_validation():
    with pytest.raises(DomainError):
        AlphaSpec(0.2, (0.15, 0.1))
    with pytest.raises(DomainError):
        AlphaSpec(1.2, (0.1,))
    spec = AlphaSpec(0.3, (0.1, 0.2))
    assert AlphaSpec.from_dict(spec.to_dict()) == spec


def test_bound_result_shape():
    res = BoundResult(1, (0.5, -math.inf), (0.2, math.inf), (0.7, 0.1), (False, True))
    d = res.to_dict(0.2, 60.0)
    assert d["bounds"] == [0.5, "-inf"] and d["z"] == [60.0] and d["decision"] == 1


def test_small_exhaustive_grid():
    # every tie pattern on a 3-atom grid with a few weight patterns
    for values in itertools.product([-1.0, 0.0, 1.0], repeat=3):
        for raw in ([1, 1, 1, 1], [3, 1, 2, 0.5], [0.1, 5, 0.1, 2]):
            dist, p, p_inf = build(list(values), raw)
            for level in (0.1, 0.25, 0.5, 0.75, 0.9):
                assert weighted_quantile(dist, level) == enumerate_quantile(list(values), p, p_inf, level)


def test_forest_bound_with_real_fit(synthetic_split):
    train, cal = synthetic_split.proper_training, synthetic_split.calibration
    models = [fit_quantile_forest(train, k, QuantileFitConfig(0.1, trees=20, seed=k)) for k in range(2)]
    res = reward_bound(models, cal, known_policy_synthetic("uniform"), 1, [60.0], AlphaSpec.equal(0.2, 2), (0.0, 0.0))
    assert all(np.isfinite(res.kappas)) and not any(res.clamped)
