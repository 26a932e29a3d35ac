"""Estimation pipelines for functionals of self-censored missing data.

Four pipelines are provided, all built as stacked estimating systems over
the working models:

* ``ipw``  -- inverse propensity weighting of complete cases,
* ``reg``  -- outcome regression with exponential-tilting imputation,
* ``dr``   -- the doubly robust combination of the two,
* ``mar``  -- the ``dr`` pipeline with the odds-ratio parameters pinned
  at zero, i.e. a missing-at-random benchmark.

Each pipeline solves its nuisance blocks in triangular order, performs a
joint refinement pass, and reports a sandwich covariance over the full
stacked system so nuisance uncertainty propagates into the target
standard errors.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import models
from .data import Dataset
from .eesolve import (Block, EstimatingSystem, SolveResult, fd_jacobian,
                      sandwich_covariance, solve, wald_ci)
from .models import (GaussianBaseline, MultinomialBaseline, WorkingModelSpec,
                     expit, gauss_hermite_points)
from .patterns import (DEFAULT_MIN_COUNT, DEFAULT_MIN_PROPENSITY, Pattern,
                       PatternSet, complete_pattern, validate_positivity)

METHODS = ("ipw", "reg", "dr", "mar")


class PatternError(ValueError):
    """Raised when the observed pattern set cannot support estimation."""


class ConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# functionals


@dataclass(frozen=True)
class Functional:
    """A target defined as the root of E{m(X, Y; psi)} = 0.

    ``m`` is vectorized: m(X (n,d), Y (n,p), psi (k,)) -> (n, k).
    ``affine_in_y`` enables exact mean-substitution imputation under a
    Gaussian baseline.  ``contrasts`` are (name, weight-vector) pairs
    reported with delta-method standard errors.
    """

    dim: int
    m: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    description: str = ""
    affine_in_y: bool = False
    contrasts: tuple[tuple[str, np.ndarray], ...] = ()
    validate: Callable[[Dataset], None] | None = None


def mean_functional(index: int = 0) -> Functional:
    """psi = E(Y_index), from m = y_index - psi."""

    def m(x, y, psi):
        return y[:, [index]] - psi[0]

    return Functional(dim=1, m=m, description=f"mean of outcome {index}",
                      affine_in_y=True)


def risk_difference_functional(treat_index: int, outcome_index: int,
                               stratum_index: int) -> Functional:
    """Cell means of a binary outcome by (treatment, stratum) cell.

    psi has four components, ordered (a=0,g=0), (a=0,g=1), (a=1,g=0),
    (a=1,g=1); the reported contrasts are the within-stratum risk
    differences psi[1,g] - psi[0,g].
    """
    cells = [(0, 0), (0, 1), (1, 0), (1, 1)]

    def m(x, y, psi):
        a = y[:, treat_index]
        g = y[:, stratum_index]
        o = y[:, outcome_index]
        cols = [(a == av) * (g == gv) * (o - psi[k])
                for k, (av, gv) in enumerate(cells)]
        return np.stack(cols, axis=1)

    contrasts = []
    for gv in (0, 1):
        c = np.zeros(4)
        c[cells.index((1, gv))] = 1.0
        c[cells.index((0, gv))] = -1.0
        contrasts.append((f"RD[g={gv}]", c))

    def validate(data: Dataset) -> None:
        for label, col in (("treatment", treat_index), ("stratum", stratum_index),
                           ("outcome", outcome_index)):
            vals = data.y[:, col]
            vals = vals[np.isfinite(vals)]
            if not np.isin(vals, (0.0, 1.0)).all():
                raise ValueError(
                    f"risk-difference {label} column must be binary 0/1")
        cc = (~np.isnan(data.y)).all(axis=1)
        a = data.y[cc, treat_index]
        g = data.y[cc, stratum_index]
        for av, gv in cells:
            if not ((a == av) & (g == gv)).any():
                raise ValueError(
                    f"no complete cases in treatment={av}, stratum={gv} cell")

    return Functional(dim=4, m=m,
                      description="treatment/stratum cell means of a binary outcome",
                      affine_in_y=False, contrasts=tuple(contrasts),
                      validate=validate)


# ---------------------------------------------------------------------------
# default instruments


def default_g(spec: WorkingModelSpec, x, y_minus_bar) -> np.ndarray:
    """Instrument for the (alpha1_i, gamma_i) blocks: ((1,x)', ybar_-i)'.

    With the covariate-interacted odds-ratio model the ybar part is
    expanded to ybar * (1, x)."""
    xp = models.prop_design(spec, x)
    yb = np.asarray(y_minus_bar, float).reshape(-1, 1)
    if spec.gamma_is_scalar:
        return np.hstack([xp, yb])
    xr = models.prop_design(spec.with_params(x_propensity_map=None), x)
    return np.hstack([xp, yb * xr])


def default_h(spec: WorkingModelSpec, x) -> np.ndarray:
    """Instrument for the alpha2 blocks: (1, x)."""
    return models.prop_design(spec, x)


# ---------------------------------------------------------------------------
# results


@dataclass
class EstimationResult:
    method: str
    psi_hat: np.ndarray
    psi_se: np.ndarray
    psi_ci: np.ndarray
    gamma_se: np.ndarray
    nuisance: dict[str, np.ndarray]
    covariance: np.ndarray | None
    theta_hat: np.ndarray
    param_names: tuple[str, ...]
    contrasts: list[dict]
    diagnostics: dict

    @property
    def converged(self) -> bool:
        return bool(self.diagnostics.get("converged", False))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "psi_hat": self.psi_hat.tolist(),
            "psi_se": self.psi_se.tolist(),
            "psi_ci": self.psi_ci.tolist(),
            "gamma_hat": self.nuisance.get("gamma", np.array([])).tolist(),
            "nuisance": {k: np.asarray(v).tolist() for k, v in self.nuisance.items()},
            "contrasts": self.contrasts,
            "diagnostics": self.diagnostics,
        }


# ---------------------------------------------------------------------------
# parameter layout


@dataclass(frozen=True)
class _Piece:
    name: str
    sl: slice


class _Layout:
    """Mapping between the stacked theta vector and spec parameters."""

    def __init__(self, method: str, template: WorkingModelSpec, k_psi: int,
                 alpha2_rows: tuple[int, ...]):
        self.method = method
        self.template = template
        self.alpha2_rows = alpha2_rows
        p, d = template.p, template.d
        gdim = 1 if template.gamma_is_scalar else d + 1
        self.gdim = gdim
        pieces: list[_Piece] = []
        pos = 0

        def add(name, size):
            nonlocal pos
            pieces.append(_Piece(name, slice(pos, pos + size)))
            pos += size

        if method in ("reg", "dr", "mar"):
            if isinstance(template.baseline, GaussianBaseline):
                add("beta_coef", (d + 1) * p)
                add("beta_chol", p * (p + 1) // 2)
            else:
                add("beta_probs", template.baseline.probs.size - 1)
        if method in ("ipw", "dr"):
            for i in range(p):
                add(f"propgamma_{i}", d + 1 + gdim)
        elif method == "mar":
            for i in range(p):
                add(f"alpha1_{i}", d + 1)
        elif method == "reg":
            for i in range(p):
                add(f"gamma_{i}", gdim)
        if method in ("ipw", "dr", "mar"):
            for k in alpha2_rows:
                add(f"alpha2_{k}", d + 1)
        add("psi", k_psi)
        self.pieces = {pc.name: pc.sl for pc in pieces}
        self.order = [pc.name for pc in pieces]
        self.dim = pos
        self._tril = np.tril_indices(p)

    def slice(self, name: str) -> slice:
        return self.pieces[name]

    def psi(self, theta: np.ndarray) -> np.ndarray:
        return theta[self.pieces["psi"]]

    def spec(self, theta: np.ndarray) -> WorkingModelSpec:
        t = self.template
        p, d = t.p, t.d
        kw: dict = {}
        if "beta_coef" in self.pieces:
            coef = theta[self.pieces["beta_coef"]].reshape(d + 1, p)
            chol = np.zeros((p, p))
            chol[self._tril] = theta[self.pieces["beta_chol"]]
            kw["baseline"] = GaussianBaseline.__new__(GaussianBaseline)
            object.__setattr__(kw["baseline"], "coef", coef)
            object.__setattr__(kw["baseline"], "cov", chol @ chol.T)
        elif "beta_probs" in self.pieces:
            base: MultinomialBaseline = t.baseline
            flat = np.empty(base.probs.size)
            flat[:-1] = theta[self.pieces["beta_probs"]]
            flat[-1] = 1.0 - flat[:-1].sum()
            kw["baseline"] = MultinomialBaseline.__new__(MultinomialBaseline)
            object.__setattr__(kw["baseline"], "support", base.support)
            object.__setattr__(kw["baseline"], "probs",
                               flat.reshape(base.probs.shape))
        if self.method in ("ipw", "dr"):
            a1 = np.empty_like(t.alpha1)
            gm = np.zeros(p) if t.gamma_is_scalar else np.empty_like(t.gamma)
            for i in range(p):
                blk = theta[self.pieces[f"propgamma_{i}"]]
                a1[i] = blk[:d + 1]
                gm[i] = blk[d + 1] if t.gamma_is_scalar else blk[d + 1:]
            kw["alpha1"] = a1
            kw["gamma"] = gm
        elif self.method == "mar":
            a1 = np.stack([theta[self.pieces[f"alpha1_{i}"]] for i in range(p)])
            kw["alpha1"] = a1
            kw["gamma"] = np.zeros(p) if t.gamma_is_scalar else np.zeros((p, d + 1))
        elif self.method == "reg":
            gm = np.zeros(p) if t.gamma_is_scalar else np.empty_like(t.gamma)
            for i in range(p):
                blk = theta[self.pieces[f"gamma_{i}"]]
                gm[i] = blk[0] if t.gamma_is_scalar else blk
            kw["gamma"] = gm
        if any(n.startswith("alpha2_") for n in self.pieces):
            a2 = t.alpha2.copy()
            for k in self.alpha2_rows:
                a2[k] = theta[self.pieces[f"alpha2_{k}"]]
            kw["alpha2"] = a2
        return t.with_params(**kw)

    def gamma_theta_indices(self) -> np.ndarray | None:
        """Theta index of each outcome's (first) odds-ratio slope, or None
        when the slopes are structurally fixed at zero."""
        if self.method == "mar":
            return None
        d = self.template.d
        idx = []
        for i in range(self.template.p):
            if self.method in ("ipw", "dr"):
                idx.append(self.pieces[f"propgamma_{i}"].start + d + 1)
            else:
                idx.append(self.pieces[f"gamma_{i}"].start)
        return np.asarray(idx)

    def param_names(self) -> tuple[str, ...]:
        names = []
        for name in self.order:
            sl = self.pieces[name]
            for j in range(sl.stop - sl.start):
                names.append(f"{name}[{j}]")
        return tuple(names)

    def nuisance(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        spec = self.spec(theta)
        out: dict[str, np.ndarray] = {
            "alpha1": spec.alpha1.copy(),
            "gamma": spec.gamma.copy(),
            "alpha2": spec.alpha2.copy(),
        }
        if isinstance(spec.baseline, GaussianBaseline):
            out["beta_coef"] = spec.baseline.coef.copy()
            out["beta_cov"] = spec.baseline.cov.copy()
        else:
            out["beta_probs"] = spec.baseline.probs.copy()
        return out


# ---------------------------------------------------------------------------
# dataset workspace


class _Workspace:
    """Static per-dataset arrays shared across residual evaluations."""

    def __init__(self, data: Dataset, template: WorkingModelSpec, ps: PatternSet):
        p = template.p
        self.p = p
        self.n = data.n
        self.X = data.x
        self.R = data.r.astype(float)
        self.Yf = np.nan_to_num(data.y, nan=0.0)
        self.complete = (data.r.sum(axis=1) == p).astype(float)
        self.complete_mask = self.complete.astype(bool)
        self.X1p = models.prop_design(template, data.x)
        self.X1o = models.out_design(template, data.x)
        self.X1raw = models.prop_design(
            template.with_params(x_propensity_map=None), data.x)
        self.ind_rminus = []
        self.ybar_minus = []
        row_sum = self.Yf.sum(axis=1)
        for i in range(p):
            others = [j for j in range(p) if j != i]
            self.ind_rminus.append(data.r[:, others].all(axis=1).astype(float))
            self.ybar_minus.append((row_sum - self.Yf[:, i]) / max(p - 1, 1))
        codes = (data.r.astype(np.int64) << np.arange(p)).sum(axis=1)
        self.pattern_mask = {
            r: codes == sum(b << i for i, b in enumerate(r)) for r in ps.patterns}
        self.patterns = ps.patterns
        self.incomplete_patterns = tuple(
            r for r in ps.patterns if r != complete_pattern(p))
        if isinstance(template.baseline, MultinomialBaseline):
            self.level_idx = np.full((self.n, p), -1, dtype=int)
            for j in range(p):
                lv = np.asarray(template.baseline.support[j])
                obs = ~np.isnan(data.y[:, j])
                diffs = np.abs(data.y[obs, j][:, None] - lv[None, :])
                hit = diffs.argmin(axis=1)
                if (diffs[np.arange(hit.size), hit] > 1e-8).any():
                    raise ValueError(
                        f"observed values of outcome {j} fall outside the "
                        "multinomial support")
                self.level_idx[obs, j] = hit


def _imputation_state(spec: WorkingModelSpec, ws: _Workspace, r: Pattern,
                      rows: np.ndarray, affine: bool, quad_nodes: int) -> tuple:
    """Psi-independent part of the per-pattern imputation for the given rows.

    Returns a tagged tuple consumed by :func:`_apply_imputation`; it
    depends on theta only through the baseline and odds-ratio parameters,
    so it can be reused across evaluations that leave those unchanged."""
    p = spec.p
    obs = [i for i, b in enumerate(r) if b == 1]
    mis = [i for i, b in enumerate(r) if b == 0]
    x_rows = ws.X[rows]
    y_rows = ws.Yf[rows]
    if isinstance(spec.baseline, GaussianBaseline):
        sig = spec.baseline.cov
        mu = (ws.X1o[rows] @ spec.baseline.coef)
        if obs:
            soo = sig[np.ix_(obs, obs)]
            smo = sig[np.ix_(mis, obs)]
            k = np.linalg.solve(soo, smo.T).T
            mu_c = mu[:, mis] + (y_rows[:, obs] - mu[:, obs]) @ k.T
            sig_c = sig[np.ix_(mis, mis)] - k @ smo.T
        else:
            mu_c = mu[:, mis]
            sig_c = sig[np.ix_(mis, mis)]
        sig_c = 0.5 * (sig_c + sig_c.T)
        t = models.gamma_eff(spec, x_rows)[:, mis]
        tilted = mu_c + t @ sig_c.T
        if affine:
            yfill = y_rows.copy()
            yfill[:, mis] = tilted
            return ("affine", x_rows, yfill)
        z, w = gauss_hermite_points(len(mis), quad_nodes)
        chol = np.linalg.cholesky(sig_c)
        return ("quad", x_rows, y_rows, mis, tilted, chol, z, w)
    base: MultinomialBaseline = spec.baseline
    table = base.probs.copy()
    g = models.gamma_eff(spec, np.zeros((1, 0)))[0]
    for j in mis:
        lv = np.asarray(base.support[j])
        shape = [1] * p
        shape[j] = lv.size
        table = table * np.exp(g[j] * (lv - spec.y0[j])).reshape(shape)
    moved = np.moveaxis(table, obs, range(len(obs)))
    if obs:
        sub = moved[tuple(ws.level_idx[rows, j] for j in obs)]
        sub = sub.reshape(rows.size, -1)
    else:
        sub = np.broadcast_to(moved.ravel(), (rows.size, moved.size)).copy()
    total = sub.sum(axis=1, keepdims=True)
    if (total <= 0).any():
        raise ValueError("zero-probability observed cell in imputation")
    weights = sub / total
    cells = np.array(list(itertools.product(
        *[np.asarray(base.support[j]) for j in mis])))
    return ("cells", x_rows, y_rows, mis, weights, cells)


def _apply_imputation(state: tuple, functional: Functional,
                      psi: np.ndarray) -> np.ndarray:
    """E{m(x, Y; psi) | x, observed Y, R = r} from a prepared state."""
    tag = state[0]
    if tag == "affine":
        _, x_rows, yfill = state
        return np.asarray(functional.m(x_rows, yfill, psi), float)
    if tag == "quad":
        _, x_rows, y_rows, mis, tilted, chol, z, w = state
        acc = np.zeros((y_rows.shape[0], functional.dim))
        yfill = y_rows.copy()
        for zj, wj in zip(z, w):
            yfill[:, mis] = tilted + chol @ zj
            acc += wj * np.asarray(functional.m(x_rows, yfill, psi), float)
        return acc
    _, x_rows, y_rows, mis, weights, cells = state
    acc = np.zeros((y_rows.shape[0], functional.dim))
    yfill = y_rows.copy()
    for c in range(cells.shape[0]):
        yfill[:, mis] = cells[c]
        acc += weights[:, [c]] * np.asarray(functional.m(x_rows, yfill, psi),
                                            float)
    return acc


def _pattern_mean_ybar(spec: WorkingModelSpec, ws: _Workspace, i: int) -> np.ndarray:
    """E{ybar_-i | x, R_i=0, R_-i=1} under the tilted within-pattern law."""
    r = tuple(0 if j == i else 1 for j in range(spec.p))
    pm = models.pattern_mean(spec, ws.X, r)
    others = [j for j in range(spec.p) if j != i]
    return pm[:, others].mean(axis=1)


# ---------------------------------------------------------------------------
# residual assembly


class _SystemBuilder:
    def __init__(self, method: str, data: Dataset, template: WorkingModelSpec,
                 ps: PatternSet, functional: Functional, layout: _Layout,
                 min_propensity: float, quad_nodes: int):
        self.method = method
        self.ws = _Workspace(data, template, ps)
        self.template = template
        self.functional = functional
        self.layout = layout
        self.min_propensity = min_propensity
        self.quad_nodes = quad_nodes
        self.p = template.p
        self.alpha2_patterns = {
            k: tuple(r for r in ps.patterns
                     if r != complete_pattern(self.p) and models.eta_active(r)[k])
            for k in layout.alpha2_rows}
        self.pattern_rows = {r: np.nonzero(self.ws.pattern_mask[r])[0]
                             for r in ps.patterns}
        # imputation states depend on theta only through the baseline and
        # odds-ratio parameters; cache them keyed by those bytes so the
        # finite-difference sweeps over other blocks reuse them
        self._imp_cache: dict = {}
        self._ybar_cache: dict = {}

    def _beta_bytes(self, spec: WorkingModelSpec) -> bytes:
        b = spec.baseline
        if isinstance(b, GaussianBaseline):
            return b.coef.tobytes() + b.cov.tobytes()
        return b.probs.tobytes()

    def _expected_m(self, spec: WorkingModelSpec, r: Pattern, rows: np.ndarray,
                    key: str, psi: np.ndarray) -> np.ndarray:
        mis = [i for i, b in enumerate(r) if b == 0]
        digest = (self._beta_bytes(spec), spec.gamma[mis].tobytes())
        hit = self._imp_cache.get((r, key))
        if hit is None or hit[0] != digest:
            state = _imputation_state(spec, self.ws, r, rows,
                                      self.functional.affine_in_y,
                                      self.quad_nodes)
            self._imp_cache[(r, key)] = (digest, state)
        else:
            state = hit[1]
        return _apply_imputation(state, self.functional, psi)

    def _ybar_mean(self, spec: WorkingModelSpec, i: int) -> np.ndarray:
        digest = (self._beta_bytes(spec),
                  np.asarray(spec.gamma[i]).tobytes())
        hit = self._ybar_cache.get(i)
        if hit is None or hit[0] != digest:
            val = _pattern_mean_ybar(spec, self.ws, i)
            self._ybar_cache[i] = (digest, val)
            return val
        return hit[1]

    # -- pieces -------------------------------------------------------------

    def _log_odds(self, spec: WorkingModelSpec) -> np.ndarray:
        ws = self.ws
        a1 = ws.X1p @ spec.alpha1.T
        if spec.gamma_is_scalar:
            geff = np.broadcast_to(spec.gamma, (ws.n, self.p))
        else:
            geff = ws.X1raw @ spec.gamma.T
        return -a1 + geff * (ws.Yf - spec.y0)

    def _log_ratios(self, spec, lo) -> dict[Pattern, np.ndarray]:
        """log Pi_r / Pi_1 for incomplete patterns; meaningful on complete rows."""
        ws = self.ws
        a2 = ws.X1p @ spec.alpha2.T
        out = {}
        for r in ws.incomplete_patterns:
            miss = np.array([b == 0 for b in r])
            col = lo[:, miss].sum(axis=1)
            act = models.eta_active(r)
            if act.any():
                col = col + a2[:, act].sum(axis=1)
            out[r] = col
        return out

    def _weight_i(self, spec, lo, i) -> np.ndarray:
        ws = self.ws
        return ws.complete * (1.0 + np.exp(lo[:, i])) - ws.ind_rminus[i]

    def _g_matrix(self, i) -> np.ndarray:
        ws = self.ws
        yb = ws.ybar_minus[i][:, None]
        if self.template.gamma_is_scalar:
            return np.hstack([ws.X1p, yb])
        return np.hstack([ws.X1p, yb * ws.X1raw])

    # -- blocks -------------------------------------------------------------

    def residual(self, data_unused, theta: np.ndarray) -> np.ndarray:
        spec = self.layout.spec(theta)
        psi = self.layout.psi(theta)
        ws = self.ws
        cols = np.empty((ws.n, self.layout.dim))
        lo = self._log_odds(spec)
        ratios = None
        if self.method in ("ipw", "dr", "mar"):
            log_ratios = self._log_ratios(spec, lo)
            ratios = {r: ws.complete * np.exp(v) for r, v in log_ratios.items()}

        for name in self.layout.order:
            sl = self.layout.slice(name)
            if name == "beta_coef":
                resid = ws.X1o[:, :, None] * (ws.Yf - ws.X1o @ spec.baseline.coef)[:, None, :]
                cols[:, sl] = ws.complete[:, None] * resid.reshape(ws.n, -1)
            elif name == "beta_chol":
                dev = ws.Yf - ws.X1o @ spec.baseline.coef
                outer = dev[:, :, None] * dev[:, None, :] - spec.baseline.cov
                tril = np.tril_indices(self.p)
                cols[:, sl] = ws.complete[:, None] * outer[:, tril[0], tril[1]]
            elif name == "beta_probs":
                base: MultinomialBaseline = spec.baseline
                flat_idx = np.ravel_multi_index(
                    tuple(np.clip(ws.level_idx[:, j], 0, None) for j in range(self.p)),
                    base.probs.shape)
                k_free = base.probs.size - 1
                ind = np.zeros((ws.n, k_free))
                valid = ws.complete_mask & (flat_idx < k_free)
                ind[np.nonzero(valid)[0], flat_idx[valid]] = 1.0
                cols[:, sl] = ws.complete[:, None] * (ind - base.probs.ravel()[:k_free])
            elif name.startswith("propgamma_"):
                i = int(name.split("_")[1])
                w = self._weight_i(spec, lo, i)
                if self.method == "dr":
                    ebar = self._ybar_mean(spec, i)
                    yb = ws.ybar_minus[i] - ebar
                    if self.template.gamma_is_scalar:
                        gmat = np.hstack([ws.X1p, yb[:, None]])
                    else:
                        gmat = np.hstack([ws.X1p, yb[:, None] * ws.X1raw])
                else:
                    gmat = self._g_matrix(i)
                cols[:, sl] = w[:, None] * gmat
            elif name.startswith("alpha1_"):
                i = int(name.split("_")[1])
                w = self._weight_i(spec, lo, i)
                cols[:, sl] = w[:, None] * ws.X1p
            elif name.startswith("gamma_"):
                i = int(name.split("_")[1])
                ind = ws.ind_rminus[i] * (1.0 - ws.R[:, i])
                yb = ws.ybar_minus[i] - self._ybar_mean(spec, i)
                if self.template.gamma_is_scalar:
                    cols[:, sl] = (ind * yb)[:, None]
                else:
                    cols[:, sl] = (ind * yb)[:, None] * ws.X1raw
            elif name.startswith("alpha2_"):
                k = int(name.split("_")[1])
                acc = np.zeros(ws.n)
                for r in self.alpha2_patterns[k]:
                    acc = acc + ratios[r] - ws.pattern_mask[r]
                cols[:, sl] = acc[:, None] * ws.X1p
            elif name == "psi":
                cols[:, sl] = self._psi_block(spec, psi, ratios)
        return cols

    def _psi_block(self, spec, psi, ratios) -> np.ndarray:
        ws = self.ws
        fn = self.functional
        mvals = np.asarray(fn.m(ws.X, ws.Yf, psi), float)
        out = np.zeros((ws.n, fn.dim))
        if self.method == "ipw":
            s = ws.complete.copy()
            for r in ws.incomplete_patterns:
                s = s + ratios[r]
            s = np.minimum(s, 1.0 / self.min_propensity)
            return (ws.complete * s)[:, None] * mvals
        if self.method == "reg":
            out = ws.complete[:, None] * mvals
            for r in ws.incomplete_patterns:
                rows = self.pattern_rows[r]
                if rows.size:
                    out[rows] = self._expected_m(spec, r, rows, "pat", psi)
            return out
        # dr / mar: complete-case term S*m - sum_r ratio_r * E_r m, plus the
        # per-pattern imputation term on incomplete rows.
        s = ws.complete.copy()
        for r in ws.incomplete_patterns:
            s = s + ratios[r]
        s = np.minimum(s, 1.0 / self.min_propensity)
        cc_rows = np.nonzero(ws.complete_mask)[0]
        acc_cc = (s[cc_rows, None] * mvals[cc_rows])
        for r in ws.incomplete_patterns:
            rows = self.pattern_rows[r]
            if rows.size:
                out[rows] = self._expected_m(spec, r, rows, "pat", psi)
            if cc_rows.size:
                em_cc = self._expected_m(spec, r, cc_rows, "cc", psi)
                acc_cc -= ratios[r][cc_rows, None] * em_cc
        out[cc_rows] = acc_cc
        return out

    # -- diagnostics --------------------------------------------------------

    def propensity_floor_hits(self, theta: np.ndarray) -> int:
        if self.method == "reg":
            return 0
        spec = self.layout.spec(theta)
        lo = self._log_odds(spec)
        log_ratios = self._log_ratios(spec, lo)
        s = np.ones(self.ws.n)
        for v in log_ratios.values():
            s = s + np.exp(v)
        hits = (1.0 / s < self.min_propensity) & self.ws.complete_mask
        return int(hits.sum())


# ---------------------------------------------------------------------------
# starting values


def _logistic_fit(xd: np.ndarray, ybin: np.ndarray, max_iter: int = 50) -> np.ndarray:
    beta = np.zeros(xd.shape[1])
    for _ in range(max_iter):
        eta = xd @ beta
        mu = expit(eta)
        w = np.clip(mu * (1 - mu), 1e-10, None)
        z = eta + (ybin - mu) / w
        wxd = xd * w[:, None]
        try:
            new = np.linalg.solve(xd.T @ wxd, xd.T @ (w * z))
        except np.linalg.LinAlgError:
            break
        if np.abs(new - beta).max() < 1e-10:
            beta = new
            break
        beta = new
    return beta


def _initial_theta(method: str, layout: _Layout, ws: _Workspace,
                   template: WorkingModelSpec, functional: Functional) -> np.ndarray:
    p, d = template.p, template.d
    theta = np.zeros(layout.dim)
    cc = ws.complete_mask
    if "beta_coef" in layout.pieces:
        coef, *_ = np.linalg.lstsq(ws.X1o[cc], ws.Yf[cc], rcond=None)
        dev = ws.Yf[cc] - ws.X1o[cc] @ coef
        cov = dev.T @ dev / cc.sum()
        cov = cov + 1e-8 * np.eye(p)
        theta[layout.slice("beta_coef")] = coef.ravel()
        theta[layout.slice("beta_chol")] = np.linalg.cholesky(cov)[np.tril_indices(p)]
    if "beta_probs" in layout.pieces:
        base: MultinomialBaseline = template.baseline
        flat_idx = np.ravel_multi_index(
            tuple(np.clip(ws.level_idx[cc, j], 0, None) for j in range(p)),
            base.probs.shape)
        freq = np.bincount(flat_idx, minlength=base.probs.size).astype(float)
        freq /= freq.sum()
        theta[layout.slice("beta_probs")] = freq[:-1]
    if method in ("ipw", "dr", "mar"):
        for i in range(p):
            sel = ws.ind_rminus[i].astype(bool)
            a1 = _logistic_fit(ws.X1p[sel], ws.R[sel, i])
            if method == "mar":
                theta[layout.slice(f"alpha1_{i}")] = a1
            else:
                sl = layout.slice(f"propgamma_{i}")
                theta[sl.start:sl.start + d + 1] = a1
    # gamma and alpha2 start at zero; psi from the complete-case equation
    mcc = lambda psi: np.asarray(
        functional.m(ws.X[cc], ws.Yf[cc], psi), float).mean(axis=0)
    psi0 = np.zeros(functional.dim)
    for _ in range(50):
        val = mcc(psi0)
        if np.abs(val).max() < 1e-10:
            break
        jac = fd_jacobian(mcc, psi0)
        try:
            psi0 = psi0 + np.linalg.solve(jac, -val)
        except np.linalg.LinAlgError:
            break
    theta[layout.slice("psi")] = psi0
    return theta


# ---------------------------------------------------------------------------
# public pipelines


def _block_order(method: str, layout: _Layout, p: int) -> tuple[Block, ...]:
    def idx(name):
        sl = layout.slice(name)
        return np.arange(sl.start, sl.stop)

    blocks: list[Block] = []
    if method in ("reg", "dr", "mar"):
        beta_idx = np.concatenate([idx(n) for n in layout.order
                                   if n.startswith("beta_")])
        blocks.append(Block("beta", beta_idx))
    if method in ("ipw", "dr"):
        for i in range(p):
            blocks.append(Block(f"propgamma_{i}", idx(f"propgamma_{i}")))
    elif method == "mar":
        for i in range(p):
            blocks.append(Block(f"alpha1_{i}", idx(f"alpha1_{i}")))
    elif method == "reg":
        for i in range(p):
            blocks.append(Block(f"gamma_{i}", idx(f"gamma_{i}")))
    if method != "reg":
        for k in layout.alpha2_rows:
            blocks.append(Block(f"alpha2_{k}", idx(f"alpha2_{k}")))
    blocks.append(Block("psi", idx("psi")))
    return tuple(blocks)


def _check_patterns(ps: PatternSet, p: int, method: str, min_count: int,
                    min_propensity: float) -> tuple[list[str], dict]:
    report = validate_positivity(ps, min_count=min_count,
                                 min_propensity=min_propensity)
    if not report.valid:
        raise PatternError(
            "pattern set violates positivity: " + "; ".join(report.warnings))
    warnings = list(report.warnings)
    for i in range(p):
        r_i = tuple(0 if j == i else 1 for j in range(p))
        count = ps.counts.get(r_i, 0)
        if count == 0:
            raise PatternError(
                f"pattern {r_i} (only outcome {i} missing) is absent; the "
                "odds-ratio parameter of this outcome is not estimable")
        if count < min_count and method in ("reg", "dr", "mar"):
            raise PatternError(
                f"pattern {r_i} has only {count} records "
                f"(min_count={min_count}); imputation equations are degenerate")
    return warnings, {str(r): c for r, c in sorted(ps.counts.items())}


def estimate(data: Dataset, spec_init: WorkingModelSpec, functional: Functional,
             method: str = "dr", *, min_count: int = DEFAULT_MIN_COUNT,
             min_propensity: float = DEFAULT_MIN_PROPENSITY,
             tol: float = 1e-8, max_iter: int = 100, level: float = 0.95,
             quad_nodes: int = models.DEFAULT_QUAD_NODES,
             compute_covariance: bool = True,
             theta0: np.ndarray | None = None) -> EstimationResult:
    """Run one estimation pipeline end to end.

    ``spec_init`` fixes the model structure (dimensions, baseline family,
    covariate transforms); its parameter values are ignored in favour of
    data-driven starting values unless ``theta0`` is given.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if data.p < 2:
        raise PatternError("estimation requires at least two outcomes")
    if functional.validate is not None:
        functional.validate(data)
    ps = data.pattern_set()
    warnings, pattern_counts = _check_patterns(ps, data.p, method, min_count,
                                               min_propensity)
    if not ps.counts.get(complete_pattern(data.p)):
        raise PatternError("no complete cases")

    alpha2_rows = tuple(
        k for k in range(data.p - 1)
        if any(r != complete_pattern(data.p) and models.eta_active(r)[k]
               for r in ps.patterns))
    layout = _Layout(method, spec_init, functional.dim, alpha2_rows)
    builder = _SystemBuilder(method, data, spec_init, ps, functional, layout,
                             min_propensity, quad_nodes)
    system = EstimatingSystem(dim=layout.dim, residual=builder.residual,
                              blocks=_block_order(method, layout, data.p))
    if theta0 is None:
        theta0 = _initial_theta(method, layout, builder.ws, spec_init, functional)
    result = solve(system, data, theta0, tol=tol, max_iter=max_iter)
    warnings.extend(result.warnings)

    cov = None
    psi_sl = layout.slice("psi")
    psi_hat = result.theta_hat[psi_sl]
    psi_se = np.full(functional.dim, np.nan)
    psi_ci = np.full((functional.dim, 2), np.nan)
    gamma_se = np.full(data.p, np.nan)
    contrasts: list[dict] = []
    if compute_covariance and result.converged:
        cov = sandwich_covariance(system, data, result.theta_hat)
        psi_cov = cov[psi_sl, psi_sl]
        psi_se = np.sqrt(np.clip(np.diag(psi_cov), 0.0, None))
        psi_ci = wald_ci(psi_hat, psi_cov, level)
        gidx = layout.gamma_theta_indices()
        if gidx is not None:
            gamma_se = np.sqrt(np.clip(np.diag(cov)[gidx], 0.0, None))
        for name, c in functional.contrasts:
            est = float(c @ psi_hat)
            se = float(np.sqrt(max(c @ psi_cov @ c, 0.0)))
            ci = wald_ci(np.array([est]), np.array([[se ** 2]]), level)[0]
            contrasts.append({"name": name, "estimate": est, "se": se,
                              "ci": ci.tolist()})

    floor_hits = builder.propensity_floor_hits(result.theta_hat)
    if floor_hits:
        warnings.append(
            f"{floor_hits} complete-case propensities fell below the "
            f"floor {min_propensity}")
    diagnostics = {
        "converged": result.converged,
        "iterations": result.iterations,
        "residual_norm": result.residual_norm,
        "pattern_counts": pattern_counts,
        "propensity_floor_hits": floor_hits,
        "warnings": warnings,
    }
    return EstimationResult(
        method=method, psi_hat=psi_hat, psi_se=psi_se, psi_ci=psi_ci,
        gamma_se=gamma_se,
        nuisance=layout.nuisance(result.theta_hat), covariance=cov,
        theta_hat=result.theta_hat, param_names=layout.param_names(),
        contrasts=contrasts, diagnostics=diagnostics)


def estimate_ipw(data, spec_init, functional, **kw) -> EstimationResult:
    return estimate(data, spec_init, functional, method="ipw", **kw)


def estimate_reg(data, spec_init, functional, **kw) -> EstimationResult:
    return estimate(data, spec_init, functional, method="reg", **kw)


def estimate_dr(data, spec_init, functional, **kw) -> EstimationResult:
    return estimate(data, spec_init, functional, method="dr", **kw)


def estimate_mar_benchmark(data, spec_init, functional, **kw) -> EstimationResult:
    """Doubly robust estimation under a missing-at-random working model
    (odds-ratio parameters pinned at zero)."""
    res = estimate(data, spec_init, functional, method="mar", **kw)
    return res
