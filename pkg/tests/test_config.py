import numpy as np
import pytest
import yaml

from selfcensor.config import (ConfigError, data_schema_from_config,
                               estimate_options_from_config,
                               functional_from_config, load_config,
                               scenario_configs_from_config, spec_from_config)
from selfcensor.models import GaussianBaseline, MultinomialBaseline


MODEL_NODE = {
    "model": {
        "p": 2,
        "d": 1,
        "alpha1": [[0.5, 0.2], [0.4, 0.1]],
        "gamma": [0.3, -0.2],
        "alpha2": [[0.1, 0.0]],
        "baseline": {
            "family": "gaussian",
            "coef": [[0.0, 0.1], [0.5, 0.5]],
            "cov": [[1.0, 0.2], [0.2, 1.0]],
        },
    }
}


def test_load_config_round_trip(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(MODEL_NODE))
    cfg = load_config(path)
    spec = spec_from_config(cfg)
    assert spec.p == 2 and spec.d == 1
    assert isinstance(spec.baseline, GaussianBaseline)
    np.testing.assert_allclose(spec.gamma, [0.3, -0.2])
    np.testing.assert_allclose(spec.baseline.cov, [[1.0, 0.2], [0.2, 1.0]])


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    broken = tmp_path / "broken.yaml"
    broken.write_text("a: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(broken)


def test_spec_defaults_to_study_truth():
    spec = spec_from_config({})
    assert spec.p == 3 and spec.d == 1


def test_multinomial_baseline_config():
    cfg = {
        "model": {
            "p": 2, "d": 0,
            "alpha1": [[0.5], [0.5]],
            "gamma": [0.4, -0.4],
            "alpha2": [[0.1]],
            "baseline": {
                "family": "multinomial",
                "support": [[0.0, 1.0], [0.0, 1.0]],
                "probs": [[0.25, 0.25], [0.25, 0.25]],
            },
        }
    }
    spec = spec_from_config(cfg)
    assert isinstance(spec.baseline, MultinomialBaseline)
    assert spec.baseline.support == ((0.0, 1.0), (0.0, 1.0))


def test_unknown_baseline_family():
    cfg = {"model": {"p": 2, "d": 0,
                     "baseline": {"family": "dirichlet"}}}
    with pytest.raises(ConfigError):
        spec_from_config(cfg)


def test_functional_selection():
    f = functional_from_config({"functional": {"kind": "mean", "index": 2}})
    y = np.array([[0.0, 0.0, 5.0]])
    np.testing.assert_allclose(f.m(None, y, np.array([1.0])), [[4.0]])
    rd = functional_from_config({"functional": {
        "kind": "risk-diff", "treat_index": 0, "outcome_index": 1,
        "stratum_index": 2}})
    assert rd.dim == 4
    # CLI flag overrides the config kind
    f2 = functional_from_config({"functional": {"kind": "risk-diff"}}, "mean")
    assert f2.dim == 1
    with pytest.raises(ConfigError):
        functional_from_config({"functional": {"kind": "risk-diff"}})
    with pytest.raises(ConfigError):
        functional_from_config({"functional": {"kind": "quantile"}})


def test_data_schema_requires_outcomes():
    schema = data_schema_from_config(
        {"data": {"covariates": ["x"], "outcomes": ["a", "b"]}})
    assert schema["missing_tokens"] == ("", "NA")
    with pytest.raises(ConfigError):
        data_schema_from_config({"data": {"covariates": ["x"]}})


def test_scenario_configs_and_overrides():
    cfg = {"simulate": {"scenarios": ["TT", "FF"], "n": 500,
                        "replications": 4, "seed": 9,
                        "estimators": ["dr"]}}
    configs = scenario_configs_from_config(cfg)
    assert [c.scenario for c in configs] == ["TT", "FF"]
    assert configs[0].n == 500 and configs[0].seed == 9
    assert configs[0].estimators == ("dr",)
    overridden = scenario_configs_from_config(cfg, seed=77, n_jobs=2)
    assert overridden[0].seed == 77 and overridden[0].n_jobs == 2
    single = scenario_configs_from_config({"simulate": {"scenarios": "TT"}})
    assert len(single) == 1


def test_estimate_options_pass_through():
    opts = estimate_options_from_config(
        {"estimate": {"min_count": 8, "tol": 1e-6, "quad_nodes": 8}})
    assert opts == {"min_count": 8, "tol": 1e-6, "quad_nodes": 8}
    assert estimate_options_from_config({}) == {}
