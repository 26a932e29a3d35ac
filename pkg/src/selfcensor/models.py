"""Parametric working models for the missingness mechanism and outcomes.

The joint law of (Y, R) given X is parameterized by three variationally
independent components:

* itemwise baseline propensities pi_i(x) = expit(alpha1_i' (1, x)),
* an odds-ratio function factoring into itemwise terms
  Gamma_i(x, y_i) = exp{gamma_i (y_i - y0_i)} (optionally with covariate
  interaction exp{(y_i - y0_i) gamma_i' (1, x)}),
* sequential odds ratios eta_i(r_i, r_<i, x) = exp{alpha2_i' (1, x)} when
  r_i = 0 and the preceding indicators are not all 1, and 1 otherwise,

together with a baseline outcome model for the complete cases: either a
Gaussian linear model N(B'(1,x), Sigma) or a covariate-free multinomial
table on a finite support.

All heavy operations accept row-batched inputs (n, d) / (n, p) and are
vectorized; the scalar forms broadcast through the same code paths.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .patterns import Pattern, PatternSet, as_pattern

DEFAULT_QUAD_NODES = 16
MAX_QUADRATURE_DIMS = 4


class ConfigurationError(ValueError):
    """Raised for structurally invalid model or quadrature configuration."""


class NumericalError(RuntimeError):
    """Raised when a linear-algebra step fails (singularity etc.)."""


# ---------------------------------------------------------------------------
# baseline outcome models


@dataclass(frozen=True)
class GaussianBaseline:
    """Linear Gaussian outcome model for complete cases: N(coef'(1,x), cov)."""

    coef: np.ndarray  # (d+1, p)
    cov: np.ndarray   # (p, p)

    def __post_init__(self):
        object.__setattr__(self, "coef", np.atleast_2d(np.asarray(self.coef, float)))
        object.__setattr__(self, "cov", np.atleast_2d(np.asarray(self.cov, float)))
        if self.cov.shape[0] != self.cov.shape[1]:
            raise ConfigurationError("covariance must be square")
        if not np.allclose(self.cov, self.cov.T):
            raise ConfigurationError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.cov).min() <= 0:
            raise ConfigurationError("covariance must be positive definite")

    @property
    def p(self) -> int:
        return self.coef.shape[1]


@dataclass(frozen=True)
class MultinomialBaseline:
    """Covariate-free outcome table on a finite product support."""

    support: tuple[tuple[float, ...], ...]  # levels per outcome
    probs: np.ndarray                       # shape (k_1, ..., k_p)

    def __post_init__(self):
        object.__setattr__(
            self, "support",
            tuple(tuple(float(v) for v in lv) for lv in self.support))
        probs = np.asarray(self.probs, float)
        object.__setattr__(self, "probs", probs)
        if probs.shape != tuple(len(lv) for lv in self.support):
            raise ConfigurationError("probability table shape does not match support")
        if (probs < 0).any():
            raise ConfigurationError("probability table entries must be >= 0")
        if abs(probs.sum() - 1.0) > 1e-10:
            raise ConfigurationError("probability table must sum to 1")

    @property
    def p(self) -> int:
        return len(self.support)

    def cells(self) -> np.ndarray:
        """All support points as an array of shape (prod k_i, p)."""
        grids = np.meshgrid(*[np.asarray(lv) for lv in self.support], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)


Baseline = GaussianBaseline | MultinomialBaseline


# ---------------------------------------------------------------------------
# working model specification


@dataclass(frozen=True)
class WorkingModelSpec:
    """All parameters of the working models.

    ``alpha1`` has shape (p, d+1); ``alpha2`` has shape (p-1, d+1) with row
    k holding the coefficients of eta for outcome k+1 (0-based); ``gamma``
    has shape (p,) for the scalar odds-ratio model or (p, d+1) for the
    covariate-interacted one.  ``x_propensity_map`` / ``x_outcome_map``
    optionally transform the raw covariates before they enter the
    propensity-side or outcome-side designs (used to fit deliberately
    misspecified working models; the odds-ratio model always sees raw x).
    """

    p: int
    d: int
    y0: np.ndarray
    alpha1: np.ndarray
    gamma: np.ndarray
    alpha2: np.ndarray
    baseline: Baseline
    x_propensity_map: Callable[[np.ndarray], np.ndarray] | None = None
    x_outcome_map: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "y0", np.asarray(self.y0, float).reshape(self.p))
        a1 = np.asarray(self.alpha1, float).reshape(self.p, self.d + 1)
        object.__setattr__(self, "alpha1", a1)
        g = np.asarray(self.gamma, float)
        if g.ndim == 1:
            g = g.reshape(self.p)
        else:
            g = g.reshape(self.p, self.d + 1)
        object.__setattr__(self, "gamma", g)
        a2 = np.asarray(self.alpha2, float)
        if self.p > 1:
            a2 = a2.reshape(self.p - 1, self.d + 1)
        else:
            a2 = a2.reshape(0, self.d + 1)
        object.__setattr__(self, "alpha2", a2)
        if self.baseline.p != self.p:
            raise ConfigurationError("baseline dimension does not match p")
        if isinstance(self.baseline, GaussianBaseline):
            if self.baseline.coef.shape[0] != self.d + 1:
                raise ConfigurationError("baseline coefficient rows must equal d+1")
        elif self.d != 0:
            raise ConfigurationError("multinomial baseline requires d = 0")

    @property
    def gamma_is_scalar(self) -> bool:
        return self.gamma.ndim == 1

    def with_params(self, **kwargs) -> "WorkingModelSpec":
        return replace(self, **kwargs)


def _as_rows(x, width: int) -> tuple[np.ndarray, bool]:
    """Coerce x to (n, width); returns (array, was_single_row)."""
    arr = np.asarray(x, float)
    if width == 0:
        if arr.size == 0:
            single = arr.ndim <= 1
            n = 1 if single else arr.shape[0]
            return np.zeros((n, 0)), single
        arr = arr.reshape(-1, 0) if arr.ndim > 1 else np.zeros((1, 0))
        return arr, True
    if arr.ndim == 0:
        return arr.reshape(1, 1), True
    if arr.ndim == 1:
        if width == 1 and arr.shape[0] != 1:
            return arr.reshape(-1, 1), False
        return arr.reshape(1, width), True
    return arr.reshape(-1, width), False


def _design(x_rows: np.ndarray, mapping) -> np.ndarray:
    if mapping is not None:
        x_rows = np.asarray(mapping(x_rows), float).reshape(x_rows.shape[0], -1)
    return np.hstack([np.ones((x_rows.shape[0], 1)), x_rows])


def prop_design(spec: WorkingModelSpec, x) -> np.ndarray:
    """Propensity-side design matrix (1, x) with any covariate transform."""
    rows, _ = _as_rows(x, spec.d)
    return _design(rows, spec.x_propensity_map)


def out_design(spec: WorkingModelSpec, x) -> np.ndarray:
    """Outcome-side design matrix (1, x) with any covariate transform."""
    rows, _ = _as_rows(x, spec.d)
    return _design(rows, spec.x_outcome_map)


def baseline_logits(spec: WorkingModelSpec, x) -> np.ndarray:
    """logit of the itemwise baseline propensities, shape (n, p)."""
    return prop_design(spec, x) @ spec.alpha1.T


def gamma_eff(spec: WorkingModelSpec, x) -> np.ndarray:
    """Effective odds-ratio slope per outcome, shape (n, p)."""
    rows, _ = _as_rows(x, spec.d)
    if spec.gamma_is_scalar:
        return np.broadcast_to(spec.gamma, (rows.shape[0], spec.p)).copy()
    return _design(rows, None) @ spec.gamma.T


def alpha2_lin(spec: WorkingModelSpec, x) -> np.ndarray:
    """Linear predictor of log eta_i per i = 1..p-1 (0-based), shape (n, p-1)."""
    return prop_design(spec, x) @ spec.alpha2.T


def expit(z):
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# propensity-side quantities


def itemwise_baseline_propensity(spec: WorkingModelSpec, x, i: int):
    """pi_i(x, y0_i): probability outcome i is observed at the reference value."""
    if not 0 <= i < spec.p:
        raise IndexError(f"outcome index {i} out of range for p={spec.p}")
    return expit(baseline_logits(spec, x)[:, i])


def itemwise_odds_ratio(spec: WorkingModelSpec, x, i: int, y_i):
    """Gamma_i(x, y_i) = exp{gamma_i(x) (y_i - y0_i)}; equals 1 at y0_i."""
    if not 0 <= i < spec.p:
        raise IndexError(f"outcome index {i} out of range for p={spec.p}")
    g = gamma_eff(spec, x)[:, i]
    return np.exp(g * (np.asarray(y_i, float) - spec.y0[i]))


def itemwise_propensity(spec: WorkingModelSpec, x, i: int, y_i):
    """pi_i(x, y_i) = pi0 / {pi0 + (1 - pi0) Gamma_i(x, y_i)}."""
    if not 0 <= i < spec.p:
        raise IndexError(f"outcome index {i} out of range for p={spec.p}")
    # log O_i = -logit(pi0) + gamma (y_i - y0_i); pi_i = expit(-log O_i)
    lo = -baseline_logits(spec, x)[:, i] + gamma_eff(spec, x)[:, i] * (
        np.asarray(y_i, float) - spec.y0[i])
    return expit(-lo)


def odds_function(spec: WorkingModelSpec, x, i: int, y_i):
    """O_i(x, y_i) = {1 - pi_i}/pi_i."""
    lo = -baseline_logits(spec, x)[:, i] + gamma_eff(spec, x)[:, i] * (
        np.asarray(y_i, float) - spec.y0[i])
    return np.exp(lo)


def eta_active(r: Pattern) -> np.ndarray:
    """Boolean mask over i = 1..p-1 (0-based) of nonunity eta factors in pattern r."""
    r = as_pattern(r)
    p = len(r)
    active = np.zeros(p - 1, dtype=bool)
    prefix_all_one = r[0] == 1
    for i in range(1, p):
        active[i - 1] = (r[i] == 0) and not prefix_all_one
        prefix_all_one = prefix_all_one and r[i] == 1
    return active


def sequential_odds_ratio(spec: WorkingModelSpec, x, i: int, r) -> np.ndarray:
    """eta_i(r_i, r_<i, x) for outcome i >= 1 (0-based)."""
    if not 1 <= i < spec.p:
        raise IndexError(f"sequential odds ratio defined for 1 <= i < p, got {i}")
    r = as_pattern(r)
    if eta_active(r)[i - 1]:
        return np.exp(alpha2_lin(spec, x)[:, i - 1])
    n = prop_design(spec, x).shape[0]
    return np.ones(n)


def log_propensity_ratio(spec: WorkingModelSpec, x, y, r) -> np.ndarray:
    """log of Pi_r(x, y) / Pi_1(x, y), shape (n,)."""
    r = as_pattern(r)
    yr, _ = _as_rows(y, spec.p)
    miss = np.array([b == 0 for b in r])
    lo = -baseline_logits(spec, x) + gamma_eff(spec, x) * (yr - spec.y0)
    out = lo[:, miss].sum(axis=1)
    act = eta_active(r)
    if act.any():
        out = out + alpha2_lin(spec, x)[:, act].sum(axis=1)
    return out


def propensity_ratio(spec: WorkingModelSpec, x, y, r) -> np.ndarray:
    """Pi_r(x, y) / Pi_1(x, y) = prod of odds and sequential odds-ratio factors."""
    return np.exp(log_propensity_ratio(spec, x, y, r))


def log_propensity_ratios(spec: WorkingModelSpec, x, y,
                          patterns: Sequence[Pattern]) -> np.ndarray:
    """log Pi_r / Pi_1 for every pattern, shape (n, len(patterns))."""
    yr, _ = _as_rows(y, spec.p)
    lo = -baseline_logits(spec, x) + gamma_eff(spec, x) * (yr - spec.y0)
    a2 = alpha2_lin(spec, x)
    cols = []
    for r in patterns:
        r = as_pattern(r)
        miss = np.array([b == 0 for b in r])
        col = lo[:, miss].sum(axis=1)
        act = eta_active(r)
        if act.any():
            col = col + a2[:, act].sum(axis=1)
        cols.append(col)
    return np.stack(cols, axis=1)


def full_propensity(spec: WorkingModelSpec, ps: PatternSet, x, y) -> dict[Pattern, np.ndarray]:
    """Pattern propensities Pi_r(x, y) normalized over the observed pattern set."""
    pats = ps.patterns
    logs = log_propensity_ratios(spec, x, y, pats)
    logs = logs - logs.max(axis=1, keepdims=True)
    w = np.exp(logs)
    w /= w.sum(axis=1, keepdims=True)
    return {r: w[:, k] for k, r in enumerate(pats)}


def joint_odds_ratio(spec: WorkingModelSpec, x, y, r) -> np.ndarray:
    """OR(y, r | x) = prod_i Gamma_i(x, y_i)^(1 - r_i)."""
    r = as_pattern(r)
    yr, _ = _as_rows(y, spec.p)
    miss = np.array([b == 0 for b in r])
    t = gamma_eff(spec, x) * miss
    return np.exp((t * (yr - spec.y0)).sum(axis=1))


# ---------------------------------------------------------------------------
# tilted laws


@dataclass(frozen=True)
class GaussianLaw:
    mean: np.ndarray
    cov: np.ndarray

    def expectation(self, func) -> np.ndarray:
        z, w = gauss_hermite_points(self.mean.shape[-1])
        try:
            chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("conditional covariance is singular") from exc
        pts = self.mean + z @ chol.T
        vals = np.stack([np.asarray(func(pt), float) for pt in pts])
        return np.tensordot(w, vals, axes=1)


@dataclass(frozen=True)
class DiscreteLaw:
    cells: np.ndarray   # (ncells, k)
    probs: np.ndarray   # (ncells,)

    def expectation(self, func) -> np.ndarray:
        vals = np.stack([np.asarray(func(c), float) for c in self.cells])
        return np.tensordot(self.probs, vals, axes=1)


ConditionalLaw = GaussianLaw | DiscreteLaw


def gauss_hermite_points(dim: int, n_nodes: int = DEFAULT_QUAD_NODES):
    """Tensorized Gauss-Hermite rule for N(0, I_dim): points (m, dim), weights (m,)."""
    if dim > MAX_QUADRATURE_DIMS:
        raise ConfigurationError(
            f"{dim} missing continuous coordinates exceed the quadrature limit "
            f"of {MAX_QUADRATURE_DIMS}")
    x, w = hermgauss(n_nodes)
    x = x * np.sqrt(2.0)
    w = w / np.sqrt(np.pi)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    wts = np.ones(1)
    for _ in range(dim):
        wts = np.kron(wts, w)
    return pts, wts


def _gaussian_conditional(spec: WorkingModelSpec, x, y_obs, r: Pattern):
    """Baseline conditional N(mu_c, Sigma_c) of missing given observed coords."""
    base: GaussianBaseline = spec.baseline
    obs = [i for i, b in enumerate(r) if b == 1]
    mis = [i for i, b in enumerate(r) if b == 0]
    mu = (out_design(spec, x) @ base.coef)[0]
    sig = base.cov
    if obs:
        y_obs = np.asarray(y_obs, float).reshape(len(obs))
        soo = sig[np.ix_(obs, obs)]
        smo = sig[np.ix_(mis, obs)]
        try:
            k = np.linalg.solve(soo, smo.T).T
        except np.linalg.LinAlgError as exc:
            raise NumericalError("observed-block covariance is singular") from exc
        mu_c = mu[mis] + k @ (y_obs - mu[obs])
        sig_c = sig[np.ix_(mis, mis)] - k @ smo.T
    else:
        mu_c = mu[mis]
        sig_c = sig[np.ix_(mis, mis)]
    return mu_c, 0.5 * (sig_c + sig_c.T), mis


def tilted_conditional(spec: WorkingModelSpec, x, y_obs, r) -> ConditionalLaw:
    """Law of the missing outcomes given (X = x, observed Y, R = r) under
    the exponential-tilting representation of the within-pattern law."""
    r = as_pattern(r)
    if all(b == 1 for b in r):
        raise ConfigurationError("pattern has no missing coordinates")
    if isinstance(spec.baseline, GaussianBaseline):
        mu_c, sig_c, mis = _gaussian_conditional(spec, x, y_obs, r)
        t = gamma_eff(spec, x)[0, mis]
        return GaussianLaw(mean=mu_c + sig_c @ t, cov=sig_c)
    base: MultinomialBaseline = spec.baseline
    obs = [i for i, b in enumerate(r) if b == 1]
    mis = [i for i, b in enumerate(r) if b == 0]
    y_obs = np.asarray(y_obs, float).reshape(len(obs))
    idx: list = [slice(None)] * spec.p
    for j, val in zip(obs, y_obs):
        lv = np.asarray(base.support[j])
        hits = np.nonzero(np.isclose(lv, val))[0]
        if hits.size != 1:
            raise ValueError(f"observed value {val} not in support of outcome {j}")
        idx[j] = int(hits[0])
    sub = base.probs[tuple(idx)]
    grids = np.meshgrid(*[np.asarray(base.support[j]) for j in mis], indexing="ij")
    cells = np.stack([g.ravel() for g in grids], axis=1)
    g = gamma_eff(spec, x)[0, mis]
    w = sub.ravel() * np.exp(cells @ g - spec.y0[mis] @ g)
    total = w.sum()
    if total <= 0:
        raise NumericalError("tilted conditional has zero mass")
    return DiscreteLaw(cells=cells, probs=w / total)


def imputation_expectation(spec: WorkingModelSpec, x, y_obs, r, m, psi,
                           affine: bool = False) -> np.ndarray:
    """E{m(x, Y; psi) | x, observed Y, R = r} under the tilted law.

    With ``affine=True`` (m affine in y) the Gaussian case evaluates m at
    the tilted conditional mean, which is exact.
    """
    r = as_pattern(r)
    obs = [i for i, b in enumerate(r) if b == 1]
    mis = [i for i, b in enumerate(r) if b == 0]
    y_obs = np.asarray(y_obs, float).reshape(len(obs))

    def fill(y_mis):
        y = np.empty(spec.p)
        y[obs] = y_obs
        y[mis] = y_mis
        return np.asarray(m(np.asarray(x, float).reshape(spec.d), y, psi), float)

    law = tilted_conditional(spec, x, y_obs, r)
    if affine and isinstance(law, GaussianLaw):
        return fill(law.mean)
    return law.expectation(fill)


def pattern_mean(spec: WorkingModelSpec, x, r) -> np.ndarray:
    """E(Y | x, R = r) under the tilted within-pattern law, shape (n, p)."""
    r = as_pattern(r)
    mis = np.array([b == 0 for b in r])
    if isinstance(spec.baseline, GaussianBaseline):
        mu = out_design(spec, x) @ spec.baseline.coef
        t = gamma_eff(spec, x) * mis
        return mu + t @ spec.baseline.cov.T
    base: MultinomialBaseline = spec.baseline
    cells = base.cells()
    g = gamma_eff(spec, x)[0] * mis
    w = base.probs.ravel() * np.exp((cells - spec.y0) @ g)
    w /= w.sum()
    mean = w @ cells
    n = prop_design(spec, x).shape[0]
    return np.broadcast_to(mean, (n, spec.p)).copy()


def normalizing_expectation(spec: WorkingModelSpec, x, r) -> np.ndarray:
    """E{OR(Y, r | x) | x, R = 1}, the tilting normalizer for pattern r."""
    r = as_pattern(r)
    mis = np.array([b == 0 for b in r])
    if isinstance(spec.baseline, GaussianBaseline):
        mu = out_design(spec, x) @ spec.baseline.coef
        t = gamma_eff(spec, x) * mis
        quad = 0.5 * np.einsum("ni,ij,nj->n", t, spec.baseline.cov, t)
        return np.exp(((mu - spec.y0) * t).sum(axis=1) + quad)
    base: MultinomialBaseline = spec.baseline
    cells = base.cells()
    g = gamma_eff(spec, x)[0] * mis
    val = float(base.probs.ravel() @ np.exp((cells - spec.y0) @ g))
    n = prop_design(spec, x).shape[0]
    return np.full(n, val)


def log_normalizing_expectation(spec: WorkingModelSpec, x, r) -> np.ndarray:
    return np.log(normalizing_expectation(spec, x, r))
