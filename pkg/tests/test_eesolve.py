import numpy as np
import pytest

from selfcensor.eesolve import (Block, BootstrapError, EstimatingSystem,
                                SingularJacobianError, bootstrap, fd_jacobian,
                                sandwich_covariance, solve, wald_ci)


class ArrayData:
    """Minimal data wrapper exposing .n and .take for the bootstrap."""

    def __init__(self, values):
        self.values = np.asarray(values, float)

    @property
    def n(self):
        return self.values.shape[0]

    def take(self, idx):
        return ArrayData(self.values[np.asarray(idx, int)])


def mean_system(dim=1):
    def residual(data, theta):
        return data.values.reshape(len(data.values), -1) - theta
    return EstimatingSystem(dim=dim, residual=residual)


def test_solve_sample_mean():
    rng = np.random.default_rng(0)
    data = ArrayData(rng.normal(2.0, 1.0, 500))
    res = solve(mean_system(), data, np.zeros(1))
    assert res.converged
    np.testing.assert_allclose(res.theta_hat[0], data.values.mean(), atol=1e-8)


def test_fd_jacobian_quadratic():
    def f(th):
        return np.array([th[0] ** 2 + th[1], 3 * th[1]])
    jac = fd_jacobian(f, np.array([2.0, 1.0]))
    np.testing.assert_allclose(jac, [[4.0, 1.0], [0.0, 3.0]], atol=1e-6)


def test_fd_jacobian_column_subset():
    def f(th):
        return np.array([th[0] + 2 * th[1] + 3 * th[2]])
    jac = fd_jacobian(f, np.zeros(3), cols=np.array([2]))
    np.testing.assert_allclose(jac, [[3.0]], atol=1e-8)


def test_blocks_must_partition():
    with pytest.raises(ValueError):
        EstimatingSystem(dim=2, residual=lambda d, t: np.zeros((1, 2)),
                         blocks=(Block("a", np.array([0])),))


def test_block_triangular_solve():
    # first block solves the x-mean, second depends on it
    rng = np.random.default_rng(1)
    vals = rng.normal(1.0, 1.0, (300, 2))

    def residual(data, theta):
        r1 = data.values[:, 0] - theta[0]
        r2 = data.values[:, 1] - theta[0] * theta[1]
        return np.stack([r1, r2], axis=1)

    system = EstimatingSystem(dim=2, residual=residual,
                              blocks=(Block("a", [0]), Block("b", [1])))
    res = solve(system, ArrayData(vals), np.array([0.5, 0.5]))
    assert res.converged
    m = vals.mean(axis=0)
    np.testing.assert_allclose(res.theta_hat, [m[0], m[1] / m[0]], atol=1e-7)


def test_logistic_solve_matches_irls():
    rng = np.random.default_rng(4)
    n = 2000
    x = np.column_stack([np.ones(n), rng.normal(0, 1, n)])
    beta_true = np.array([0.3, -0.8])
    y = (rng.random(n) < 1 / (1 + np.exp(-x @ beta_true))).astype(float)

    def residual(data, theta):
        mu = 1 / (1 + np.exp(-x @ theta))
        return x * (y - mu)[:, None]

    system = EstimatingSystem(dim=2, residual=residual)
    res = solve(system, None, np.zeros(2))
    assert res.converged
    # independent iteratively reweighted least squares fit
    beta = np.zeros(2)
    for _ in range(50):
        eta = x @ beta
        mu = 1 / (1 + np.exp(-eta))
        w = mu * (1 - mu)
        beta = np.linalg.solve(x.T @ (x * w[:, None]),
                               x.T @ (w * eta + (y - mu)))
    np.testing.assert_allclose(res.theta_hat, beta, atol=1e-6)


def test_sandwich_matches_fisher_for_logistic():
    # at the MLE of a correctly specified logistic model the sandwich
    # agrees with the inverse Fisher information within sampling error
    rng = np.random.default_rng(11)
    n = 4000
    x = np.column_stack([np.ones(n), rng.normal(0, 1, n)])
    beta_true = np.array([0.2, 0.7])
    y = (rng.random(n) < 1 / (1 + np.exp(-x @ beta_true))).astype(float)

    def residual(data, theta):
        mu = 1 / (1 + np.exp(-x @ theta))
        return x * (y - mu)[:, None]

    system = EstimatingSystem(dim=2, residual=residual)
    res = solve(system, None, np.zeros(2))
    cov = sandwich_covariance(system, None, res.theta_hat)
    mu = 1 / (1 + np.exp(-x @ res.theta_hat))
    fisher = x.T @ (x * (mu * (1 - mu))[:, None])
    inv = np.linalg.inv(fisher)
    np.testing.assert_allclose(np.diag(cov), np.diag(inv), rtol=0.05)
    np.testing.assert_allclose(cov, inv, atol=0.05 * np.diag(inv).max())


def test_sandwich_singular_jacobian_raises():
    def residual(data, theta):
        return np.zeros((10, 2))
    system = EstimatingSystem(dim=2, residual=residual)
    with pytest.raises(SingularJacobianError):
        sandwich_covariance(system, None, np.zeros(2))


def test_wald_ci_level():
    ci = wald_ci(np.array([1.0]), np.array([[4.0]]), level=0.95)
    np.testing.assert_allclose(ci, [[1 - 1.96 * 2, 1 + 1.96 * 2]], atol=1e-3)


def test_bootstrap_reproducible_and_order_free():
    rng = np.random.default_rng(3)
    data = ArrayData(rng.normal(0, 1, 200))

    def pipeline(d):
        return np.array([d.values.mean()])

    a = bootstrap(data, pipeline, n_boot=50, seed=7)
    b = bootstrap(data, pipeline, n_boot=50, seed=7)
    np.testing.assert_array_equal(a.replicates, b.replicates)
    c = bootstrap(data, pipeline, n_boot=50, seed=8)
    assert not np.array_equal(a.replicates, c.replicates)


def test_bootstrap_failure_threshold():
    data = ArrayData(np.arange(20, dtype=float))

    def pipeline(d):
        raise RuntimeError("always fails")

    with pytest.raises(BootstrapError):
        bootstrap(data, pipeline, n_boot=10, seed=0)


def test_bootstrap_percentile_interval_covers_mean():
    rng = np.random.default_rng(12)
    data = ArrayData(rng.normal(5.0, 1.0, 500))
    res = bootstrap(data, lambda d: np.array([d.values.mean()]),
                    n_boot=200, seed=1)
    lo, hi = res.intervals[0]
    assert lo < data.values.mean() < hi
    assert hi - lo < 0.5
