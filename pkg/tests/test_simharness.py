import io

import numpy as np
import pandas as pd
import pytest

from selfcensor import models
from selfcensor.estimators import mean_functional, risk_difference_functional
from selfcensor.models import GaussianBaseline, WorkingModelSpec
from selfcensor.patterns import PatternSet
from selfcensor.simharness import (SCENARIOS, MonteCarloReport, ScenarioConfig,
                                   analytic_pattern_marginal, coverage_table,
                                   default_truth, run_scenario, sample_dataset,
                                   scenario_spec, true_functional_value)


def flat_truth(gamma=(0.4, -0.4, 0.3)):
    """Covariate-free variant of the default generating law."""
    base = default_truth()
    return WorkingModelSpec(
        p=3, d=0, y0=np.zeros(3),
        alpha1=base.alpha1[:, [0]],
        gamma=np.asarray(gamma, float),
        alpha2=base.alpha2[:, [0]],
        baseline=GaussianBaseline(coef=base.baseline.coef[[0]],
                                  cov=base.baseline.cov))


def test_scenario_spec_maps():
    truth = default_truth()
    assert scenario_spec(truth, "TT").x_propensity_map is None
    assert scenario_spec(truth, "TT").x_outcome_map is None
    assert scenario_spec(truth, "FT").x_propensity_map is not None
    assert scenario_spec(truth, "FT").x_outcome_map is None
    assert scenario_spec(truth, "TF").x_propensity_map is None
    assert scenario_spec(truth, "TF").x_outcome_map is not None
    ff = scenario_spec(truth, "FF")
    assert ff.x_propensity_map is not None and ff.x_outcome_map is not None
    with pytest.raises(ValueError):
        scenario_spec(truth, "XX")


def test_pattern_marginal_normalizes_and_positive():
    truth = default_truth()
    x = np.linspace(-1, 1, 9).reshape(-1, 1)
    marg = analytic_pattern_marginal(truth, x)
    assert set(marg) == set(PatternSet.full_lattice(3).patterns)
    total = sum(marg.values())
    np.testing.assert_allclose(total, 1.0, atol=1e-12)
    assert all((v > 0).all() for v in marg.values())


def test_pattern_marginal_gamma_zero_equals_reference_propensity():
    truth = default_truth().with_params(gamma=np.zeros(3))
    x = np.array([[0.25], [-0.7]])
    marg = analytic_pattern_marginal(truth, x)
    y0 = np.zeros((2, 3))
    prop = models.full_propensity(truth, PatternSet.full_lattice(3), x, y0)
    for r, v in marg.items():
        np.testing.assert_allclose(v, prop[r], atol=1e-12)


def test_sampler_matches_analytic_marginal():
    truth = flat_truth()
    data = sample_dataset(truth, 200000, seed=0)
    marg = analytic_pattern_marginal(truth, np.zeros((1, 0)))
    counts = data.pattern_set().counts
    for r, v in marg.items():
        np.testing.assert_allclose(counts.get(r, 0) / data.n, v[0], atol=5e-3)


def test_sampler_outcome_law_within_pattern():
    # within the all-missing pattern the outcome mean shifts by Sigma gamma
    truth = flat_truth()
    data = sample_dataset(truth, 300000, seed=1)
    r_all = (data.r == 0).all(axis=1)
    shift = truth.baseline.cov @ truth.gamma
    expected = truth.baseline.coef[0] + shift
    got = data.y_full[r_all].mean(axis=0)
    np.testing.assert_allclose(got, expected, atol=0.04)
    # and the complete pattern is untilted
    cc = (data.r == 1).all(axis=1)
    np.testing.assert_allclose(data.y[cc].mean(axis=0),
                               truth.baseline.coef[0], atol=0.02)


def test_sampler_sidecar_and_mask_agree():
    data = sample_dataset(default_truth(), 500, seed=3)
    obs = ~np.isnan(data.y)
    np.testing.assert_array_equal(obs, data.r == 1)
    np.testing.assert_array_equal(data.y[obs], data.y_full[obs])
    assert np.isfinite(data.y_full).all()


def test_sampler_deterministic_in_seed():
    a = sample_dataset(default_truth(), 400, seed=9)
    b = sample_dataset(default_truth(), 400, seed=9)
    c = sample_dataset(default_truth(), 400, seed=10)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y_full, b.y_full)
    assert not np.array_equal(a.y_full, c.y_full)


def test_true_mean_against_closed_form():
    # E(Y_1) = intercept + sum_r p(r) (Sigma gamma_masked)_1 for d=0
    truth = flat_truth()
    marg = analytic_pattern_marginal(truth, np.zeros((1, 0)))
    expected = truth.baseline.coef[0, 0]
    for r, v in marg.items():
        t = truth.gamma * (1 - np.asarray(r))
        expected += float(v[0]) * (truth.baseline.cov @ t)[0]
    got = true_functional_value(truth, mean_functional(0))
    np.testing.assert_allclose(got[0], expected, atol=1e-10)


def test_true_mean_gamma_zero_is_baseline_intercept():
    truth = default_truth().with_params(gamma=np.zeros(3))
    got = true_functional_value(truth, mean_functional(0))
    # E(x) = 0 so the marginal mean is the intercept
    np.testing.assert_allclose(got[0], truth.baseline.coef[0, 0], atol=1e-10)


def test_true_value_nonaffine_matches_sampling():
    truth = flat_truth()
    sq = mean_functional(0)
    nonaffine = type(sq)(dim=1,
                         m=lambda x, y, psi: y[:, [0]] ** 2 - psi[0],
                         description="second moment", affine_in_y=False)
    got = true_functional_value(truth, nonaffine)
    data = sample_dataset(truth, 400000, seed=5)
    emp = (data.y_full[:, 0] ** 2).mean()
    se = (data.y_full[:, 0] ** 2).std() / np.sqrt(data.n)
    assert abs(got[0] - emp) < 4 * se


def test_run_scenario_deterministic_and_metrics():
    cfg = ScenarioConfig(truth=default_truth(), scenario="TT", n=400,
                         replications=3, seed=2,
                         functional=mean_functional(0),
                         estimators=("reg",), n_jobs=1)
    a = run_scenario(cfg)
    b = run_scenario(cfg)
    pd.testing.assert_frame_equal(a.replicates, b.replicates)
    assert a.scenario == "TT" and a.replications == 3
    m = a.metrics["reg"]
    for key in ("psi_bias", "psi_mc_sd", "psi_mean_se", "psi_coverage",
                "gamma1_bias", "gamma1_coverage", "n_nonconverged"):
        assert key in m
    assert 0.0 <= m["psi_coverage"] <= 1.0
    d = a.to_dict()
    assert d["scenario"] == "TT" and "reg" in d["metrics"]


def test_coverage_table_shape_and_csv():
    cfg = ScenarioConfig(truth=default_truth(), scenario="TT", n=400,
                         replications=2, seed=4,
                         functional=mean_functional(0),
                         estimators=("reg",), n_jobs=1)
    rep = run_scenario(cfg)
    text, csv_str = coverage_table([rep])
    assert "TT" in text and "reg" in text
    frame = pd.read_csv(io.StringIO(csv_str))
    assert {"scenario", "estimator"} <= set(frame.columns)
    assert len(frame) == 1


def test_scenario_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(truth=default_truth(), scenario="ZZ", n=100,
                       replications=1, seed=0,
                       functional=mean_functional(0))
    cfg = ScenarioConfig(truth=default_truth(), scenario="FF", n=100,
                         replications=1, seed=0,
                         functional=mean_functional(0),
                         estimators=("REG", "DR"))
    assert cfg.estimators == ("reg", "dr")
