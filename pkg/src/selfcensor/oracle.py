"""Discrete-support identification engine.

Everything here works with exhaustively enumerable joint laws f(y, r | x)
on finite outcome supports.  The module can

* construct a joint law satisfying self-censoring from a working model
  with a multinomial baseline,
* verify the self-censoring restriction by brute-force conditional
  probability comparison,
* recover the itemwise odds functions from the observed-data law by
  solving the defining integral equation as a finite linear system,
* rebuild the sequential odds ratios and the full joint law from the
  observed law alone (the executable content of the identification
  theory), and
* run the observable refutation test of the self-censoring restriction.

It serves as the ground-truth oracle for the estimation pipelines.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import models
from .models import MultinomialBaseline, WorkingModelSpec
from .patterns import (Pattern, PatternSet, as_pattern, complete_pattern,
                       int_to_pattern, pattern_to_int, validate_positivity)

RANK_RTOL = 1e-10
LSTSQ_RESIDUAL_TOL = 1e-8


class IdentificationError(RuntimeError):
    """Completeness fails on the given support."""

    def __init__(self, message: str, null_space_dim: int | None = None):
        super().__init__(message)
        self.null_space_dim = null_space_dim


class PositivityError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# joint and observed laws


@dataclass(frozen=True)
class DiscreteJoint:
    """Full joint law f(y, r | x) on a finite support.

    ``table`` has shape (nx, k_1, ..., k_p, 2**p); the last axis indexes
    missingness patterns by their integer code.  ``x_weights`` is the
    marginal law of the discrete covariate.
    """

    y_support: tuple[tuple[float, ...], ...]
    x_support: tuple[float, ...]
    table: np.ndarray
    x_weights: np.ndarray

    def __post_init__(self):
        ys = tuple(tuple(float(v) for v in lv) for lv in self.y_support)
        object.__setattr__(self, "y_support", ys)
        object.__setattr__(self, "x_support",
                           tuple(float(v) for v in self.x_support))
        table = np.asarray(self.table, float)
        xw = np.asarray(self.x_weights, float)
        p = len(ys)
        want = (len(self.x_support),) + tuple(len(lv) for lv in ys) + (1 << p,)
        if table.shape != want:
            raise ValueError(f"table shape {table.shape} != expected {want}")
        if (table < -1e-12).any():
            raise ValueError("table probabilities must be nonnegative")
        sums = table.reshape(table.shape[0], -1).sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-8:
            raise ValueError("table must sum to 1 for each x level")
        if xw.shape != (len(self.x_support),) or abs(xw.sum() - 1.0) > 1e-8:
            raise ValueError("x_weights must be a probability vector over x_support")
        object.__setattr__(self, "table", np.clip(table, 0.0, None))
        object.__setattr__(self, "x_weights", xw)

    @property
    def p(self) -> int:
        return len(self.y_support)

    @property
    def nx(self) -> int:
        return len(self.x_support)

    def pattern_mass(self) -> dict[Pattern, np.ndarray]:
        """Total mass per pattern, per x level."""
        p = self.p
        flat = self.table.reshape(self.nx, -1, 1 << p)
        mass = flat.sum(axis=1)
        return {int_to_pattern(c, p): mass[:, c] for c in range(1 << p)}

    def pattern_set(self, tol: float = 1e-14) -> PatternSet:
        mass = self.pattern_mass()
        counts = {r: 1 for r, m in mass.items() if m.max() > tol}
        return PatternSet(p=self.p, counts=counts)

    def observed(self) -> "ObservedLaw":
        return ObservedLaw.from_joint(self)

    # -- CSV interchange ----------------------------------------------------

    def to_csv(self, path_or_buf) -> None:
        p = self.p
        rows = []
        for xi, xv in enumerate(self.x_support):
            for idx in itertools.product(*[range(len(lv)) for lv in self.y_support]):
                for c in range(1 << p):
                    prob = self.table[(xi, *idx, c)] * self.x_weights[xi]
                    r = int_to_pattern(c, p)
                    row = {"x": xv}
                    for j in range(p):
                        row[f"y{j+1}"] = self.y_support[j][idx[j]]
                    for j in range(p):
                        row[f"r{j+1}"] = r[j]
                    row["prob"] = prob
                    rows.append(row)
        pd.DataFrame(rows).to_csv(path_or_buf, index=False)

    @classmethod
    def from_csv(cls, path_or_buf) -> "DiscreteJoint":
        frame = pd.read_csv(path_or_buf)
        ycols = sorted(c for c in frame.columns if c.startswith("y"))
        rcols = sorted(c for c in frame.columns if c.startswith("r"))
        if len(ycols) != len(rcols) or not ycols:
            raise ValueError("CSV must have matching y1..yp and r1..rp columns")
        p = len(ycols)
        x_support = tuple(sorted(frame["x"].unique()))
        y_support = tuple(tuple(sorted(frame[c].unique())) for c in ycols)
        shape = (len(x_support),) + tuple(len(lv) for lv in y_support) + (1 << p,)
        table = np.zeros(shape)
        xi = {v: k for k, v in enumerate(x_support)}
        yi = [{v: k for k, v in enumerate(lv)} for lv in y_support]
        for _, row in frame.iterrows():
            c = pattern_to_int(tuple(int(row[rc]) for rc in rcols))
            idx = (xi[row["x"]],) + tuple(yi[j][row[yc]]
                                          for j, yc in enumerate(ycols)) + (c,)
            table[idx] += row["prob"]
        x_weights = table.reshape(len(x_support), -1).sum(axis=1)
        if (x_weights <= 0).any():
            raise ValueError("every x level needs positive mass")
        table /= x_weights[(slice(None),) + (None,) * (p + 1)]
        return cls(y_support=y_support, x_support=x_support, table=table,
                   x_weights=x_weights / x_weights.sum())


@dataclass(frozen=True)
class ObservedLaw:
    """The observed-data law: for each pattern r, the mass
    f(observed coordinates, r | x) as an array over the observed axes.

    ``tables[r]`` has shape (nx, *(k_j for j observed in r)).
    """

    y_support: tuple[tuple[float, ...], ...]
    x_support: tuple[float, ...]
    x_weights: np.ndarray
    tables: dict[Pattern, np.ndarray]

    @property
    def p(self) -> int:
        return len(self.y_support)

    @property
    def nx(self) -> int:
        return len(self.x_support)

    def pattern_set(self, tol: float = 1e-14) -> PatternSet:
        counts = {r: 1 for r, t in self.tables.items() if t.max() > tol}
        return PatternSet(p=self.p, counts=counts)

    @classmethod
    def from_joint(cls, joint: DiscreteJoint) -> "ObservedLaw":
        p = joint.p
        tables: dict[Pattern, np.ndarray] = {}
        for c in range(1 << p):
            r = int_to_pattern(c, p)
            sub = joint.table[..., c]
            mis_axes = tuple(1 + j for j in range(p) if r[j] == 0)
            tables[r] = sub.sum(axis=mis_axes) if mis_axes else sub
        return cls(y_support=joint.y_support, x_support=joint.x_support,
                   x_weights=joint.x_weights, tables=tables)

    @classmethod
    def from_dataset(cls, data, y_support) -> "ObservedLaw":
        """Empirical frequency version from a sampled dataset (d = 0)."""
        if data.d != 0:
            raise ValueError("empirical observed laws require a dataset without covariates")
        p = data.p
        y_support = tuple(tuple(float(v) for v in lv) for lv in y_support)
        level_idx = np.full((data.n, p), -1, dtype=int)
        for j in range(p):
            lv = np.asarray(y_support[j])
            obs = ~np.isnan(data.y[:, j])
            diffs = np.abs(data.y[obs, j][:, None] - lv[None, :])
            hit = diffs.argmin(axis=1)
            if (diffs[np.arange(hit.size), hit] > 1e-8).any():
                raise ValueError(f"outcome {j} has values outside the support")
            level_idx[obs, j] = hit
        codes = (data.r.astype(np.int64) << np.arange(p)).sum(axis=1)
        tables: dict[Pattern, np.ndarray] = {}
        for c in range(1 << p):
            r = int_to_pattern(int(c), p)
            obs_j = [j for j in range(p) if r[j] == 1]
            shape = tuple(len(y_support[j]) for j in obs_j)
            tab = np.zeros((1,) + shape)
            rows = np.nonzero(codes == c)[0]
            for k in rows:
                tab[(0,) + tuple(level_idx[k, j] for j in obs_j)] += 1.0
            tables[r] = tab / data.n
        return cls(y_support=y_support, x_support=(0.0,),
                   x_weights=np.array([1.0]), tables=tables)


# ---------------------------------------------------------------------------
# construction and verification


@dataclass(frozen=True)
class SelfCensoringCheck:
    ok: bool
    max_violation: float
    notes: tuple[str, ...] = ()


def construct_self_censoring_joint(spec: WorkingModelSpec,
                                   ps: PatternSet) -> DiscreteJoint:
    """Build f(y, r | x) proportional to OR(y, r | x) f(y | r=1, x) p(r | x, y0).

    The result satisfies self-censoring by construction; its complete-case
    conditional law equals the baseline and its odds functions equal the
    working-model odds functions.
    """
    if not isinstance(spec.baseline, MultinomialBaseline):
        raise ValueError("discrete construction requires a multinomial baseline")
    report = validate_positivity(ps, min_count=1)
    if not report.valid:
        raise ValueError("invalid pattern set: " + "; ".join(report.warnings))
    base = spec.baseline
    p = spec.p
    cells = base.cells()
    x0 = np.zeros((1, 0))
    prop0 = models.full_propensity(spec, ps, x0, spec.y0)
    g = models.gamma_eff(spec, x0)[0]
    shape = tuple(len(lv) for lv in base.support)
    table = np.zeros((1,) + shape + (1 << p,))
    for r in ps.patterns:
        miss = np.array([b == 0 for b in r], float)
        orr = np.exp((cells - spec.y0) @ (g * miss))
        unnorm = orr * base.probs.ravel() * float(prop0[r][0])
        table[(0,) + (...,) + (pattern_to_int(r),)] = unnorm.reshape(shape)
    table /= table.sum()
    return DiscreteJoint(y_support=base.support, x_support=(0.0,),
                         table=table, x_weights=np.array([1.0]))


def verify_self_censoring(joint: DiscreteJoint,
                          tol: float = 1e-10) -> SelfCensoringCheck:
    """Check R_i independent of Y_-i given (X, Y_i, R_-i) by exhaustion.

    For every i, x, value of y_i and configuration of r_-i, the
    conditional probability of r_i = 1 must not vary across y_-i cells.
    Zero-probability conditioning cells are skipped with a note.
    """
    p = joint.p
    worst = 0.0
    notes: list[str] = []
    skipped = 0
    for xi in range(joint.nx):
        tab = joint.table[xi]
        for i in range(p):
            others = [j for j in range(p) if j != i]
            for r_other in itertools.product((0, 1), repeat=p - 1):
                r1 = [0] * p
                r0 = [0] * p
                for j, b in zip(others, r_other):
                    r1[j] = b
                    r0[j] = b
                r1[i] = 1
                m1 = tab[..., pattern_to_int(tuple(r1))]
                m0 = tab[..., pattern_to_int(tuple(r0))]
                denom = m1 + m0
                with np.errstate(invalid="ignore", divide="ignore"):
                    cond = np.where(denom > 0, m1 / np.where(denom > 0, denom, 1.0),
                                    np.nan)
                skipped += int(np.isnan(cond).sum())
                cond_i = np.moveaxis(cond, i, 0).reshape(cond.shape[i], -1)
                for row in cond_i:
                    vals = row[np.isfinite(row)]
                    if vals.size > 1:
                        worst = max(worst, float(vals.max() - vals.min()))
    if skipped:
        notes.append(f"{skipped} zero-probability conditioning cells skipped")
    return SelfCensoringCheck(ok=worst <= tol, max_violation=worst,
                              notes=tuple(notes))


# ---------------------------------------------------------------------------
# identification: odds functions, sequential odds ratios, reconstruction


@dataclass(frozen=True)
class OddsSolution:
    """Recovered odds function O_i(x, y_i): ``values`` has shape (nx, k_i)."""

    outcome: int
    values: np.ndarray
    rank: int
    singular_ratio: float
    residual: float


def solve_odds_function(observed: ObservedLaw, i: int) -> OddsSolution:
    """Solve E{O_i(x, Y_i) | x, y_-i, r=1} = f(y_-i, r_i=0, r_-i=1 | x)
    / f(y_-i, r=1 | x) as a linear system per x level.

    The coefficient matrix holds f(y_i | x, y_-i, r=1); full column rank is
    the discrete completeness condition.  Rectangular systems are solved by
    least squares; an inconsistent residual indicates model violation.
    """
    p = observed.p
    if not 0 <= i < p:
        raise IndexError(f"outcome index {i} out of range")
    r_i0 = tuple(0 if j == i else 1 for j in range(p))
    full = observed.tables[complete_pattern(p)]
    drop = observed.tables.get(r_i0)
    if drop is None or drop.max() <= 0:
        raise PositivityError(f"no mass on pattern {r_i0}")
    k_i = len(observed.y_support[i])
    values = np.empty((observed.nx, k_i))
    worst_ratio = np.inf
    worst_rank = k_i
    worst_resid = 0.0
    for xi in range(observed.nx):
        f1 = np.moveaxis(full[xi], i, -1)          # (..., k_i) with y_-i leading
        f1 = f1.reshape(-1, k_i)
        marg = f1.sum(axis=1)
        b_num = drop[xi].reshape(-1)
        keep = marg > 0
        if not keep.any():
            raise PositivityError("complete-case law has no mass at this x level")
        amat = f1[keep] / marg[keep, None]
        bvec = b_num[keep] / marg[keep]
        sing = np.linalg.svd(amat, compute_uv=False)
        ratio = float(sing.min() / sing.max()) if sing.size else 0.0
        rank = int((sing / sing.max() > RANK_RTOL).sum()) if sing.size else 0
        if rank < k_i:
            raise IdentificationError(
                f"completeness fails for outcome {i} at x level {xi}: "
                f"coefficient matrix rank {rank} < {k_i}",
                null_space_dim=k_i - rank)
        sol, *_ = np.linalg.lstsq(amat, bvec, rcond=None)
        resid = float(np.abs(amat @ sol - bvec).max())
        values[xi] = sol
        worst_ratio = min(worst_ratio, ratio)
        worst_rank = min(worst_rank, rank)
        worst_resid = max(worst_resid, resid)
    return OddsSolution(outcome=i, values=values, rank=worst_rank,
                        singular_ratio=worst_ratio, residual=worst_resid)


def sequential_or_from_observed(observed: ObservedLaw, odds: OddsSolution,
                                i: int) -> dict[Pattern, np.ndarray]:
    """Sequential odds ratio eta_i(r_i, r_<i, x) for outcome i >= 1.

    Returns a map from the prefix r_<=i (a tuple of length i+1) to the
    per-x-level value; equals 1 when r_i = 1 and at the all-ones prefix.
    Prefixes whose required patterns carry no mass are omitted.
    """
    p = observed.p
    if not 1 <= i < p:
        raise IndexError("sequential odds ratios are defined for 1 <= i < p")
    out: dict[Pattern, np.ndarray] = {}
    for prefix in itertools.product((0, 1), repeat=i + 1):
        r_num = prefix + (1,) * (p - i - 1)
        r_den = prefix[:i] + (1,) * (p - i)
        t_num = observed.tables.get(r_num)
        t_den = observed.tables.get(r_den)
        if t_num is None or t_den is None:
            continue
        num = t_num.reshape(observed.nx, -1).sum(axis=1)
        # position of axis i among the observed coordinates of r_den
        pos = sum(r_den[j] for j in range(i))
        dk = np.moveaxis(t_den, 1 + pos, -1).reshape(observed.nx, -1,
                                                     len(observed.y_support[i]))
        f_yi = dk.sum(axis=1)
        weight = odds.values if prefix[i] == 0 else np.ones_like(odds.values)
        den = (f_yi * weight).sum(axis=1)
        if (den <= 0).any():
            raise PositivityError(
                f"zero denominator for eta of outcome {i} at prefix {prefix}")
        out[prefix] = num / den
    return out


def reconstruct_joint(observed: ObservedLaw) -> DiscreteJoint:
    """Rebuild the full joint law from the observed law alone.

    Chains the odds-function solve, the sequential odds ratios, the
    factorized missingness mechanism, and the complete-case identity
    f(y, r | x) = f(y, r=1 | x) p(r | x, y) / p(r=1 | x, y).
    """
    p = observed.p
    ps = observed.pattern_set()
    report = validate_positivity(ps, min_count=1)
    if not report.valid:
        raise PositivityError(
            "observed pattern set violates positivity: "
            + "; ".join(report.warnings))
    odds = [solve_odds_function(observed, i) for i in range(p)]
    pi = [1.0 / (1.0 + o.values) for o in odds]      # (nx, k_i) each
    etas = [sequential_or_from_observed(observed, odds[i], i)
            for i in range(1, p)]
    full = observed.tables[complete_pattern(p)]
    shape = tuple(len(lv) for lv in observed.y_support)
    table = np.zeros((observed.nx,) + shape + (1 << p,))
    pats = ps.patterns
    for xi in range(observed.nx):
        weights = {}
        for r in pats:
            w = np.ones(shape)
            for j in range(p):
                pj = pi[j][xi]                        # (k_j,)
                facs = pj if r[j] == 1 else 1.0 - pj
                w = w * facs.reshape([-1 if a == j else 1 for a in range(p)])
            for j in range(1, p):
                eta = etas[j - 1].get(r[:j + 1])
                if eta is None:
                    raise PositivityError(
                        f"sequential odds ratio unavailable for prefix {r[:j+1]}")
                w = w * eta[xi]
            weights[r] = w
        total = sum(weights.values())
        w_complete = weights[complete_pattern(p)]
        for r in pats:
            table[(xi, ..., pattern_to_int(r))] = (
                full[xi] * weights[r] / w_complete)
        # f(y, r=1 | x) * p(r | x, y) / p(r=1 | x, y) sums to 1 only if the
        # observed law is internally consistent; renormalize residual error.
        table[xi] /= table[xi].sum()
    return DiscreteJoint(y_support=observed.y_support,
                         x_support=observed.x_support, table=table,
                         x_weights=observed.x_weights)


# ---------------------------------------------------------------------------
# definitional eta (for the y-independence property)


def definitional_eta(joint: DiscreteJoint, i: int) -> dict[Pattern, np.ndarray]:
    """eta_i from its definition as a four-way odds ratio of the mechanism,
    evaluated at every full y cell: map prefix -> array (nx, *y_shape).

    Under self-censoring this must be constant in y.
    """
    p = joint.p
    if not 1 <= i < p:
        raise IndexError("sequential odds ratios are defined for 1 <= i < p")
    out: dict[Pattern, np.ndarray] = {}

    def cond_ri(tab, r_other_full):
        """p(r_i = 1 | x, y, r_other) over the full y grid; NaN where undefined."""
        r1 = list(r_other_full)
        r0 = list(r_other_full)
        r1[i] = 1
        r0[i] = 0
        m1 = tab[..., pattern_to_int(tuple(r1))]
        m0 = tab[..., pattern_to_int(tuple(r0))]
        den = m1 + m0
        return np.where(den > 0, m1 / np.where(den > 0, den, 1.0), np.nan)

    for prefix in itertools.product((0, 1), repeat=i + 1):
        vals = []
        for xi in range(joint.nx):
            tab = joint.table[xi]
            r_seq = prefix[:i] + (1,) + (1,) * (p - i - 1)
            r_ref = (1,) * p
            p_seq = cond_ri(tab, r_seq)
            p_ref = cond_ri(tab, r_ref)
            if prefix[i] == 1:
                # numerator and denominator factors coincide at r_i = 1
                vals.append(np.where(np.isfinite(p_seq * p_ref), 1.0, np.nan))
                continue
            num = (1.0 - p_seq) * p_ref
            den = p_seq * (1.0 - p_ref)
            with np.errstate(invalid="ignore", divide="ignore"):
                vals.append(np.where(den > 0, num / np.where(den > 0, den, 1.0),
                                     np.nan))
        out[prefix] = np.stack(vals)
    return out


# ---------------------------------------------------------------------------
# refutation test


@dataclass(frozen=True)
class RestrictionTest:
    """Outcome of the observable self-censoring refutation for one outcome.

    ``status`` is 'pass', 'fail', or 'inconclusive'; ``witness`` carries
    either the recovered itemwise propensities or the infeasibility
    certificate (the offending linear system and its solution)."""

    outcome: int
    status: str
    witness: dict

    @property
    def ok(self) -> bool:
        return self.status != "fail"


def test_self_censoring_restriction(observed: ObservedLaw, i: int,
                                    tol: float = 1e-8) -> RestrictionTest:
    """Solve E{R_i / phi(X, Y_i) | X, observed Y_-i, R_-i pattern} = 1 for
    phi on the discrete support; the restriction is refuted when no
    solution lies in (0, 1].

    Systems with fewer conditioning cells than y_i levels are skipped as
    inconclusive; the overall status is 'fail' if any system is
    infeasible, else 'pass' if at least one system was conclusive.
    """
    p = observed.p
    k_i = len(observed.y_support[i])
    others = [j for j in range(p) if j != i]
    any_conclusive = False
    witness: dict = {}
    for r_other in itertools.product((0, 1), repeat=p - 1):
        r1 = [0] * p
        r0 = [0] * p
        for j, b in zip(others, r_other):
            r1[j] = b
            r0[j] = b
        r1[i] = 1
        t1 = observed.tables.get(tuple(r1))
        t0 = observed.tables.get(tuple(r0))
        if t1 is None or t1.max() <= 0:
            continue
        for xi in range(observed.nx):
            # numerator over (y_o, y_i); axis i position among observed of r1
            pos = sum(r1[j] for j in range(i))
            num = np.moveaxis(t1[xi], pos, -1).reshape(-1, k_i)
            den = num.sum(axis=1)
            if t0 is not None:
                den = den + t0[xi].reshape(-1)
            keep = den > 0
            if keep.sum() < k_i:
                continue
            amat = num[keep] / den[keep, None]
            sing = np.linalg.svd(amat, compute_uv=False)
            if sing.size == 0 or sing.min() / sing.max() <= RANK_RTOL:
                continue
            ones = np.ones(keep.sum())
            u, *_ = np.linalg.lstsq(amat, ones, rcond=None)
            resid = float(np.abs(amat @ u - ones).max())
            any_conclusive = True
            feasible = resid <= tol and (u >= 1.0 - tol).all() and \
                np.isfinite(u).all()
            if not feasible:
                witness = {
                    "x_level": xi,
                    "conditioning_pattern": tuple(r_other),
                    "solution": u.tolist(),
                    "residual": resid,
                    "reason": ("no exact solution" if resid > tol
                               else "solution leaves (0, 1]"),
                }
                return RestrictionTest(outcome=i, status="fail", witness=witness)
            witness = {"phi": (1.0 / u).tolist()}
    if not any_conclusive:
        return RestrictionTest(outcome=i, status="inconclusive",
                               witness={"reason": "underdetermined systems only"})
    return RestrictionTest(outcome=i, status="pass", witness=witness)


def refute_self_censoring(observed: ObservedLaw,
                          tol: float = 1e-8) -> tuple[bool, list[RestrictionTest]]:
    """Run the refutation test for every outcome.

    Returns (compatible, per-outcome results): compatible is False iff
    some outcome's test fails."""
    results = [test_self_censoring_restriction(observed, i, tol)
               for i in range(observed.p)]
    return all(t.ok for t in results), results


# ---------------------------------------------------------------------------
# random generators for property tests


def random_self_censoring_spec(rng: np.random.Generator, p: int = 2,
                               n_levels: int = 2,
                               max_tries: int = 50) -> tuple[WorkingModelSpec, PatternSet]:
    """Random working model on a binary/ternary support whose induced
    complete-case law satisfies discrete completeness (resampled until the
    coefficient matrices are well conditioned)."""
    support = tuple(tuple(float(v) for v in range(n_levels)) for _ in range(p))
    ps = PatternSet.full_lattice(p)
    for _ in range(max_tries):
        probs = rng.dirichlet(np.full(n_levels ** p, 3.0)).reshape((n_levels,) * p)
        if probs.min() < 1e-3:
            continue
        baseline = MultinomialBaseline(support=support, probs=probs)
        spec = WorkingModelSpec(
            p=p, d=0, y0=np.zeros(p),
            alpha1=rng.uniform(0.2, 1.2, (p, 1)),
            gamma=rng.uniform(-0.8, 0.8, p),
            alpha2=rng.uniform(-0.5, 0.5, (max(p - 1, 0), 1)),
            baseline=baseline)
        joint = construct_self_censoring_joint(spec, ps)
        obs = joint.observed()
        try:
            ok = all(solve_odds_function(obs, i).singular_ratio > 1e-4
                     for i in range(p))
        except (IdentificationError, PositivityError):
            ok = False
        if ok:
            return spec, ps
    raise RuntimeError("could not generate a well-conditioned random spec")


def random_violating_joint(rng: np.random.Generator,
                           max_tries: int = 50) -> DiscreteJoint:
    """Binary p=2 law where R_1 depends on Y_2 given (Y_1, R_2): the
    refutation test must fail.  Dependence between Y_1 and Y_2 is kept
    weak so the violation is observationally detectable."""
    from .models import expit
    for _ in range(max_tries):
        q1 = rng.uniform(0.35, 0.65)
        q2 = rng.uniform(0.35, 0.65)
        delta = rng.uniform(0.005, 0.03)
        fy = np.array([[(1 - q1) * (1 - q2) + delta, (1 - q1) * q2 - delta],
                       [q1 * (1 - q2) - delta, q1 * q2 + delta]])
        if fy.min() <= 0.01:
            continue
        a = rng.uniform(-0.2, 0.4)
        b = rng.uniform(2.0, 3.5) * rng.choice([-1.0, 1.0])
        c = rng.uniform(0.3, 0.9)
        table = np.zeros((1, 2, 2, 4))
        for y1, y2 in itertools.product(range(2), repeat=2):
            p_r1 = expit(np.array([a + b * y2]))[0]
            p_r2 = expit(np.array([c]))[0]
            for r1, r2 in itertools.product(range(2), repeat=2):
                pr = (p_r1 if r1 else 1 - p_r1) * (p_r2 if r2 else 1 - p_r2)
                table[0, y1, y2, pattern_to_int((r1, r2))] = fy[y1, y2] * pr
        joint = DiscreteJoint(y_support=((0.0, 1.0), (0.0, 1.0)),
                              x_support=(0.0,), table=table,
                              x_weights=np.array([1.0]))
        compatible, _ = refute_self_censoring(joint.observed())
        if not compatible:
            return joint
    raise RuntimeError("could not generate a detectable violating law")
