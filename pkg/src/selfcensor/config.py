"""YAML configuration mirroring the model and scenario structures.

The configuration tree uses the same field names as the corresponding
dataclasses: ``model`` maps to WorkingModelSpec, ``simulate`` to
ScenarioConfig, ``data`` to the CSV schema, and ``functional`` picks the
target.  See ``examples`` in the repository README for a full file.
"""

from __future__ import annotations

import numpy as np
import yaml

from .estimators import (Functional, mean_functional,
                         risk_difference_functional)
from .models import GaussianBaseline, MultinomialBaseline, WorkingModelSpec
from .simharness import SCENARIOS, ScenarioConfig, default_truth


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    return cfg


def spec_from_config(cfg: dict) -> WorkingModelSpec:
    node = cfg.get("model")
    if node is None:
        return default_truth()
    try:
        base_node = node["baseline"]
        family = base_node.get("family", "gaussian")
        if family == "gaussian":
            baseline = GaussianBaseline(
                coef=np.asarray(base_node["coef"], float),
                cov=np.asarray(base_node["cov"], float))
        elif family == "multinomial":
            baseline = MultinomialBaseline(
                support=tuple(tuple(lv) for lv in base_node["support"]),
                probs=np.asarray(base_node["probs"], float))
        else:
            raise ConfigError(f"unknown baseline family {family!r}")
        p = int(node["p"])
        d = int(node["d"])
        return WorkingModelSpec(
            p=p, d=d,
            y0=np.asarray(node.get("y0", np.zeros(p)), float),
            alpha1=np.asarray(node.get("alpha1", np.zeros((p, d + 1))), float),
            gamma=np.asarray(node.get("gamma", np.zeros(p)), float),
            alpha2=np.asarray(node.get("alpha2",
                                       np.zeros((max(p - 1, 0), d + 1))), float),
            baseline=baseline)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model configuration: {exc}") from exc


def functional_from_config(cfg: dict, name: str | None = None) -> Functional:
    node = cfg.get("functional", {}) or {}
    kind = name or node.get("kind", "mean")
    if kind == "mean":
        return mean_functional(int(node.get("index", 0)))
    if kind in ("risk-diff", "risk_difference"):
        try:
            return risk_difference_functional(
                treat_index=int(node["treat_index"]),
                outcome_index=int(node["outcome_index"]),
                stratum_index=int(node["stratum_index"]))
        except KeyError as exc:
            raise ConfigError(
                "risk-diff functional needs treat_index, outcome_index, "
                "stratum_index") from exc
    raise ConfigError(f"unknown functional {kind!r}")


def data_schema_from_config(cfg: dict) -> dict:
    node = cfg.get("data", {}) or {}
    schema = {
        "covariates": list(node.get("covariates", [])),
        "outcomes": list(node.get("outcomes", [])),
        "missing_tokens": tuple(node.get("missing_tokens", ("", "NA"))),
    }
    if not schema["outcomes"]:
        raise ConfigError("data.outcomes must list the outcome columns")
    return schema


def scenario_configs_from_config(cfg: dict, seed: int | None = None,
                                 n_jobs: int | None = None) -> list[ScenarioConfig]:
    node = cfg.get("simulate", {}) or {}
    truth = spec_from_config(cfg)
    functional = functional_from_config(cfg)
    scenarios = node.get("scenarios", list(SCENARIOS))
    if isinstance(scenarios, str):
        scenarios = [scenarios]
    out = []
    for sc in scenarios:
        out.append(ScenarioConfig(
            truth=truth,
            scenario=str(sc),
            n=int(node.get("n", 3000)),
            replications=int(node.get("replications", 200)),
            seed=int(seed if seed is not None else node.get("seed", 0)),
            functional=functional,
            estimators=tuple(node.get("estimators", ("ipw", "reg", "dr"))),
            n_jobs=int(n_jobs if n_jobs is not None else node.get("n_jobs", 1))))
    return out


def estimate_options_from_config(cfg: dict) -> dict:
    node = cfg.get("estimate", {}) or {}
    opts = {}
    for key, cast in (("min_count", int), ("min_propensity", float),
                      ("tol", float), ("max_iter", int), ("level", float),
                      ("quad_nodes", int)):
        if key in node:
            opts[key] = cast(node[key])
    return opts
