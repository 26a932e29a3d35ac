"""Generic M-estimation engine.

Stacks per-observation residual functions G(record, theta) into an
empirical estimating equation mean(G) = 0, solves it with a damped Newton
iteration on finite-difference Jacobians, and provides sandwich
covariance, Wald intervals, and a reproducible nonparametric bootstrap.

Residual functions are vectorized: ``residual(data, theta)`` returns an
(n, q) array of per-observation residuals.  Systems may declare named
parameter blocks with a solve order; upstream blocks are solved first and
held fixed, then the full system gets a joint refinement pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
from joblib import Parallel, delayed

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
FD_BASE_STEP = 1e-6
RIDGE = 1e-8
MAX_COND = 1e12


class SingularJacobianError(RuntimeError):
    def __init__(self, message: str, cond: float | None = None):
        super().__init__(message)
        self.cond = cond


class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class Block:
    """A named parameter block occupying ``indices`` of theta (and of the
    residual vector: blocks are square)."""

    name: str
    indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, int))


@dataclass(frozen=True)
class EstimatingSystem:
    dim: int
    residual: "callable"        # (data, theta) -> (n, dim)
    blocks: tuple[Block, ...] = ()

    def __post_init__(self):
        if self.blocks:
            used = np.concatenate([b.indices for b in self.blocks])
            if sorted(used.tolist()) != list(range(self.dim)):
                raise ValueError("blocks must partition the parameter indices")

    def mean_residual(self, data, theta: np.ndarray) -> np.ndarray:
        return np.asarray(self.residual(data, theta)).mean(axis=0)


@dataclass
class SolveResult:
    theta_hat: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    covariance: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)


def _fd_steps(theta: np.ndarray) -> np.ndarray:
    return FD_BASE_STEP * np.maximum(1.0, np.abs(theta))


def fd_jacobian(func, theta: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    """Central finite-difference Jacobian of ``func`` at theta.

    ``cols`` restricts differentiation to a subset of parameters; the
    returned matrix then has one column per entry of ``cols``.
    """
    theta = np.asarray(theta, float)
    cols = np.arange(theta.size) if cols is None else np.asarray(cols, int)
    h = _fd_steps(theta)
    jac_cols = []
    for j in cols:
        up = theta.copy()
        dn = theta.copy()
        up[j] += h[j]
        dn[j] -= h[j]
        jac_cols.append((np.asarray(func(up)) - np.asarray(func(dn))) / (2 * h[j]))
    return np.stack(jac_cols, axis=-1)


def _newton_step(jac: np.ndarray, resid: np.ndarray, warnings: list[str]) -> np.ndarray:
    try:
        return np.linalg.solve(jac, -resid)
    except np.linalg.LinAlgError:
        warnings.append("singular Jacobian; retrying with ridge regularization")
        try:
            return np.linalg.solve(jac + RIDGE * np.eye(jac.shape[0]), -resid)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobianError("Jacobian singular even after ridge") from exc


def _newton(mean_resid, theta0, idx, tol, max_iter, warnings):
    """Damped Newton on the square subsystem mean_resid[idx](theta[idx]) = 0."""
    theta = np.asarray(theta0, float).copy()
    full = mean_resid(theta)
    norm = np.abs(full[idx]).max() if idx.size else 0.0
    it = 0
    while norm > tol and it < max_iter:
        def sub(th):
            return mean_resid(th)[idx]
        jac = fd_jacobian(sub, theta, cols=idx)
        try:
            step = _newton_step(jac, full[idx], warnings)
        except SingularJacobianError:
            warnings.append("unrecoverable singular Jacobian in Newton step")
            return theta, norm, it, False
        scale = 1.0
        for _ in range(30):
            cand = theta.copy()
            cand[idx] += scale * step
            cand_full = mean_resid(cand)
            cand_norm = np.abs(cand_full[idx]).max()
            if np.isfinite(cand_norm) and (cand_norm < norm or cand_norm <= tol):
                theta, full, norm = cand, cand_full, cand_norm
                break
            scale *= 0.5
        else:
            warnings.append("line search failed to reduce the residual")
            return theta, norm, it + 1, norm <= tol
        it += 1
    return theta, norm, it, norm <= tol


def solve(system: EstimatingSystem, data, theta0,
          tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> SolveResult:
    """Root of the empirical mean residual.

    Declared blocks are solved in order with upstream blocks held fixed,
    followed by one joint refinement pass over all parameters.
    """
    theta = np.asarray(theta0, float).copy()
    if not np.isfinite(theta).all():
        raise ValueError("theta0 must be finite")
    warnings: list[str] = []

    def mean_resid(th):
        return system.mean_residual(data, th)

    total_iters = 0
    for block in system.blocks:
        theta, _, it, conv = _newton(mean_resid, theta, block.indices, tol,
                                     max_iter, warnings)
        total_iters += it
        if not conv:
            warnings.append(f"block '{block.name}' did not converge")
    all_idx = np.arange(system.dim)
    theta, norm, it, conv = _newton(mean_resid, theta, all_idx, tol, max_iter,
                                    warnings)
    total_iters += it
    return SolveResult(theta_hat=theta, residual_norm=float(norm),
                       iterations=total_iters, converged=bool(conv),
                       warnings=warnings)


def sandwich_covariance(system: EstimatingSystem, data, theta_hat) -> np.ndarray:
    """(1/n) A^{-1} B A^{-T} with A the mean Jacobian and B = mean(G G')."""
    theta_hat = np.asarray(theta_hat, float)
    g = np.asarray(system.residual(data, theta_hat))
    n = g.shape[0]
    bmat = g.T @ g / n
    amat = fd_jacobian(lambda th: system.mean_residual(data, th), theta_hat)
    cond = np.linalg.cond(amat)
    if not np.isfinite(cond) or cond > MAX_COND:
        raise SingularJacobianError(
            f"estimating-equation Jacobian is ill conditioned (cond={cond:.3e})",
            cond=float(cond))
    bread = np.linalg.solve(amat, np.eye(system.dim))
    cov = bread @ bmat @ bread.T / n
    return 0.5 * (cov + cov.T)


def wald_ci(theta_hat, covariance, level: float = 0.95) -> np.ndarray:
    """Per-coordinate Wald intervals, shape (q, 2)."""
    theta_hat = np.atleast_1d(np.asarray(theta_hat, float))
    cov = np.atleast_2d(np.asarray(covariance, float))
    z = NormalDist().inv_cdf(0.5 * (1.0 + level))
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return np.stack([theta_hat - z * se, theta_hat + z * se], axis=1)


@dataclass
class BootstrapResult:
    replicates: np.ndarray          # (B_ok, k)
    intervals: np.ndarray           # (k, 2) percentile intervals
    n_failed: int
    level: float


def bootstrap(data, pipeline, n_boot: int, seed: int,
              level: float = 0.95, n_jobs: int = 1) -> BootstrapResult:
    """Nonparametric row-resampling bootstrap of ``pipeline(data) -> vector``.

    Replicate b draws its resample from an independent substream keyed by
    (seed, b), so results are identical for any ``n_jobs``.  Replicates
    that raise are recorded and excluded; more than 20% failures is an
    error.
    """
    if n_boot < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    n = data.n if hasattr(data, "n") else len(data)

    def one(b: int):
        rng = np.random.default_rng([seed, b])
        idx = rng.integers(0, n, n)
        try:
            return np.asarray(pipeline(data.take(idx)), float)
        except Exception:  # noqa: BLE001 - failed replicates are reported, not fatal
            return None

    if n_jobs == 1:
        results = [one(b) for b in range(n_boot)]
    else:
        results = Parallel(n_jobs=n_jobs)(delayed(one)(b) for b in range(n_boot))
    ok = [r for r in results if r is not None and np.isfinite(r).all()]
    n_failed = n_boot - len(ok)
    if n_failed > 0.2 * n_boot:
        raise BootstrapError(f"{n_failed}/{n_boot} bootstrap replicates failed")
    reps = np.stack(ok)
    lo = np.percentile(reps, 50 * (1 - level), axis=0)
    hi = np.percentile(reps, 50 * (1 + level), axis=0)
    return BootstrapResult(replicates=reps, intervals=np.stack([lo, hi], axis=1),
                           n_failed=n_failed, level=level)
