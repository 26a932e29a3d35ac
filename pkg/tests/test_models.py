import numpy as np
import pytest

from selfcensor import models
from selfcensor.models import (ConfigurationError, GaussianBaseline,
                               MultinomialBaseline, WorkingModelSpec)
from selfcensor.patterns import PatternSet


def gaussian_spec(d=1, p=3, gamma=None, maps=(None, None)):
    rng = np.random.default_rng(5)
    coef = rng.normal(0, 0.5, (d + 1, p))
    a = rng.normal(0, 0.3, (p, p))
    cov = a @ a.T + np.eye(p)
    return WorkingModelSpec(
        p=p, d=d, y0=np.zeros(p),
        alpha1=rng.normal(0.5, 0.3, (p, d + 1)),
        gamma=np.array([0.4, -0.3, 0.2][:p]) if gamma is None else gamma,
        alpha2=rng.normal(0, 0.3, (p - 1, d + 1)),
        baseline=GaussianBaseline(coef=coef, cov=cov),
        x_propensity_map=maps[0], x_outcome_map=maps[1])


def multinomial_spec(p=2, n_levels=2):
    rng = np.random.default_rng(9)
    probs = rng.dirichlet(np.full(n_levels ** p, 4.0)).reshape((n_levels,) * p)
    support = tuple(tuple(float(v) for v in range(n_levels)) for _ in range(p))
    return WorkingModelSpec(
        p=p, d=0, y0=np.zeros(p),
        alpha1=rng.normal(0.6, 0.2, (p, 1)),
        gamma=rng.normal(0, 0.4, p),
        alpha2=rng.normal(0, 0.2, (p - 1, 1)),
        baseline=MultinomialBaseline(support=support, probs=probs))


def test_baseline_validation():
    with pytest.raises(ConfigurationError):
        GaussianBaseline(coef=np.zeros((2, 2)), cov=np.array([[1.0, 2.0],
                                                              [2.0, 1.0]]))
    with pytest.raises(ConfigurationError):
        MultinomialBaseline(support=((0.0, 1.0),), probs=np.array([0.7, 0.7]))


def test_odds_ratio_is_one_at_reference():
    spec = gaussian_spec()
    x = np.array([[0.3]])
    for i in range(spec.p):
        assert models.itemwise_odds_ratio(spec, x, i, spec.y0[i]) == pytest.approx(1.0)


def test_itemwise_propensity_matches_closed_form():
    spec = gaussian_spec()
    x = np.linspace(-1, 1, 7).reshape(-1, 1)
    y = np.linspace(-2, 2, 7)
    for i in range(spec.p):
        pi0 = models.itemwise_baseline_propensity(spec, x, i)
        gam = models.itemwise_odds_ratio(spec, x, i, y)
        direct = pi0 / (pi0 + (1 - pi0) * gam)
        np.testing.assert_allclose(
            models.itemwise_propensity(spec, x, i, y), direct, atol=1e-12)
        np.testing.assert_allclose(
            models.odds_function(spec, x, i, y),
            (1 - direct) / direct, rtol=1e-10)


def test_eta_active_rules():
    # eta_i is nonunity only when r_i = 0 and the preceding indicators are
    # not all one
    assert models.eta_active((1, 1, 1)).tolist() == [False, False]
    assert models.eta_active((1, 0, 1)).tolist() == [False, False]
    assert models.eta_active((0, 0, 1)).tolist() == [True, False]
    assert models.eta_active((0, 1, 0)).tolist() == [False, True]
    assert models.eta_active((0, 0, 0)).tolist() == [True, True]


def test_sequential_odds_ratio_values():
    spec = gaussian_spec()
    x = np.array([[0.5]])
    np.testing.assert_allclose(
        models.sequential_odds_ratio(spec, x, 1, (1, 0, 1)), 1.0)
    expected = np.exp(models.alpha2_lin(spec, x)[:, 0])
    np.testing.assert_allclose(
        models.sequential_odds_ratio(spec, x, 1, (0, 0, 1)), expected)


def test_full_propensity_normalizes():
    spec = gaussian_spec()
    ps = PatternSet.full_lattice(spec.p)
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, (50, 1))
    y = rng.normal(0, 1, (50, 3))
    prop = models.full_propensity(spec, ps, x, y)
    total = sum(prop.values())
    np.testing.assert_allclose(total, 1.0, atol=1e-12)
    assert all((v > 0).all() for v in prop.values())


def test_propensity_ratio_factorizes():
    # log ratio = sum of itemwise log odds over missing coords plus the
    # active sequential terms
    spec = gaussian_spec()
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (20, 1))
    y = rng.normal(0, 1, (20, 3))
    for r in [(0, 1, 1), (1, 0, 1), (0, 0, 1), (1, 0, 0), (0, 0, 0)]:
        expected = np.ones(20)
        for i in range(3):
            if r[i] == 0:
                expected = expected * models.odds_function(spec, x, i, y[:, i])
        for i in range(1, 3):
            expected = expected * models.sequential_odds_ratio(spec, x, i, r)
        np.testing.assert_allclose(
            models.propensity_ratio(spec, x, y, r), expected, rtol=1e-10)


def test_joint_odds_ratio_product():
    spec = gaussian_spec()
    x = np.array([[0.2]])
    y = np.array([[0.5, -1.0, 2.0]])
    r = (0, 1, 0)
    expected = (models.itemwise_odds_ratio(spec, x, 0, y[:, 0])
                * models.itemwise_odds_ratio(spec, x, 2, y[:, 2]))
    np.testing.assert_allclose(models.joint_odds_ratio(spec, x, y, r),
                               expected, rtol=1e-12)


def test_tilted_conditional_gaussian_mean_shift():
    spec = gaussian_spec()
    x = np.array([0.4])
    r = (0, 1, 1)
    y_obs = np.array([0.3, -0.2])
    law = models.tilted_conditional(spec, x, y_obs, r)
    mu_c, sig_c, mis = models._gaussian_conditional(spec, x, y_obs, r)
    np.testing.assert_allclose(law.cov, sig_c)
    np.testing.assert_allclose(law.mean,
                               mu_c + sig_c @ np.array([spec.gamma[0]]))


def test_tilted_expectation_against_brute_quadrature():
    # tilting a Gaussian by exp(gamma y) shifts the mean by Sigma gamma:
    # cross-check E(y) and E(y^2) against direct weighted quadrature
    spec = gaussian_spec()
    x = np.array([0.1])
    r = (0, 1, 1)
    y_obs = np.array([0.5, 0.25])
    law = models.tilted_conditional(spec, x, y_obs, r)
    mu_c, sig_c, _ = models._gaussian_conditional(spec, x, y_obs, r)
    nodes, wts = np.polynomial.hermite.hermgauss(80)
    pts = mu_c[0] + np.sqrt(2 * sig_c[0, 0]) * nodes
    w = wts / np.sqrt(np.pi) * np.exp(spec.gamma[0] * pts)
    w /= w.sum()
    np.testing.assert_allclose(law.mean[0], w @ pts, atol=1e-6)
    second = law.expectation(lambda yv: yv ** 2)
    np.testing.assert_allclose(second[0], w @ pts ** 2, atol=1e-6)


def test_quadrature_second_moment_oracle():
    pts, w = models.gauss_hermite_points(2, 16)
    np.testing.assert_allclose(w.sum(), 1.0, atol=1e-12)
    np.testing.assert_allclose(w @ pts, 0.0, atol=1e-8)
    np.testing.assert_allclose((w[:, None] * pts).T @ pts, np.eye(2),
                               atol=1e-8)


def test_quadrature_dimension_cap():
    with pytest.raises(ConfigurationError):
        models.gauss_hermite_points(5)


def test_normalizing_expectation_gaussian_mgf():
    spec = gaussian_spec()
    x = np.array([[0.3], [-0.6]])
    r = (0, 1, 0)
    mis = np.array([1.0, 0.0, 1.0])
    mu = models.out_design(spec, x) @ spec.baseline.coef
    t = spec.gamma * mis
    expected = np.exp(mu @ t + 0.5 * t @ spec.baseline.cov @ t)
    np.testing.assert_allclose(models.normalizing_expectation(spec, x, r),
                               expected, rtol=1e-10)


def test_normalizing_expectation_multinomial_sum():
    spec = multinomial_spec()
    r = (0, 1)
    cells = spec.baseline.cells()
    weights = spec.baseline.probs.ravel()
    expected = weights @ np.exp(spec.gamma[0] * cells[:, 0])
    np.testing.assert_allclose(
        models.normalizing_expectation(spec, np.zeros((1, 0)), r),
        [expected], rtol=1e-12)


def test_pattern_mean_matches_tilted_conditional():
    spec = multinomial_spec()
    r = (0, 1)
    pm = models.pattern_mean(spec, np.zeros((1, 0)), r)
    # brute force over the tilted full table
    cells = spec.baseline.cells()
    w = spec.baseline.probs.ravel() * np.exp(spec.gamma[0] * cells[:, 0])
    w /= w.sum()
    np.testing.assert_allclose(pm[0], w @ cells, rtol=1e-12)


def test_covariate_maps_change_designs_only():
    spec_raw = gaussian_spec()
    spec_map = gaussian_spec(maps=(np.exp, None))
    x = np.array([[0.5]])
    np.testing.assert_allclose(models.prop_design(spec_map, x)[0, 1],
                               np.exp(0.5))
    # the odds-ratio slope always sees the raw covariate
    y = np.array([[1.0, 0.0, 0.0]])
    np.testing.assert_allclose(
        models.joint_odds_ratio(spec_map, x, y, (0, 1, 1)),
        models.joint_odds_ratio(spec_raw, x, y, (0, 1, 1)))
