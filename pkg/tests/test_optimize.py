"""Levenberg-Marquardt, the sampling distribution and the intermediate box."""

import numpy as np
import pytest

from fracbayes.optimize import (IntermediateDistribution, LMConfig, LMResult,
                                SamplingDistribution, build_intermediate,
                                fd_jacobian, lm_solve, sampling_distribution,
                                save_report)


def test_jacobian_exact_on_linear_maps():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((7, 4))
    J = fd_jacobian(lambda z: A @ z, rng.standard_normal(4), 0.5)
    assert np.abs(J - A).max() <= 1e-12


def test_jacobian_constant_map_is_zero():
    J = fd_jacobian(lambda z: np.array([3.0, 4.0]), np.zeros(3), 0.5)
    assert np.all(J == 0.0)


def test_jacobian_forward_difference_bias():
    # quadratic scalar map at z=1 with h=0.5: (1.5^2 - 1) / 0.5 = 2.5
    J = fd_jacobian(lambda z: np.array([z[0] ** 2]), np.array([1.0]), 0.5)
    assert J[0, 0] == pytest.approx(2.5, abs=1e-12)


def test_jacobian_per_dimension_steps():
    f = lambda z: np.array([z[0] ** 2 + z[1] ** 2])
    J = fd_jacobian(f, np.array([1.0, 1.0]), np.array([0.5, 0.1]))
    assert J[0, 0] == pytest.approx(2.5, abs=1e-12)
    assert J[0, 1] == pytest.approx((1.1 ** 2 - 1) / 0.1, abs=1e-12)


def test_lm_converges_to_least_squares_in_small_alpha_limit():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((30, 5))
    d = A @ rng.standard_normal(5)
    cfg = LMConfig(alpha=1e-10, step=0.5, max_iters=50, tol=1e-14)
    res = lm_solve(lambda z: A @ z, d, np.zeros(5), cfg)
    # exact data: the residual projection onto the range vanishes
    r = d - A @ res.z_ols
    assert np.abs(A.T @ r).max() <= 1e-8


def test_lm_immediate_stop_at_truth():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((20, 3))
    z_true = rng.standard_normal(3)
    d = A @ z_true
    res = lm_solve(lambda z: A @ z, d, z_true, LMConfig(alpha=0.01))
    assert res.converged
    assert res.n_iters == 1
    assert np.allclose(res.z_ols, z_true, atol=1e-12)


def test_lm_nonlinear_misfit_reduction():
    rng = np.random.default_rng(3)
    z_true = np.array([0.8, -0.5, 0.3])

    def forward(z):
        t = np.linspace(0, 1, 40)
        return np.exp(z[0] * t) + np.sin(z[1] * t) + z[2] * t ** 2

    d = forward(z_true) + 0.001 * rng.standard_normal(40)
    res = lm_solve(forward, d, np.zeros(3),
                   LMConfig(alpha=0.01, step=0.05, max_iters=50))
    assert min(res.residual_norms) <= res.residual_norms[0] / 10.0


def test_lm_divergence_reported():
    # stateful mock: the base/column pair sees the same value (zero Jacobian)
    # while every accepted point reports a strictly larger residual
    calls = {"n": -1}

    def growing(z):
        calls["n"] += 1
        return np.array([-float(calls["n"] // 2 + 1)])

    with pytest.warns(UserWarning, match="5 consecutive"):
        res = lm_solve(growing, np.array([0.0]), np.array([0.1]),
                       LMConfig(alpha=1.0, step=0.3, max_iters=50))
    assert res.diverged
    assert res.residual_norms[0] == min(res.residual_norms)


def test_lm_huge_alpha_freezes_iterate():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((10, 3))
    d = rng.standard_normal(10)
    z0 = rng.standard_normal(3)
    res = lm_solve(lambda z: A @ z, d, z0, LMConfig(alpha=1e14, max_iters=1))
    r0 = d - A @ z0
    bound = np.linalg.norm(A.T @ r0) / 1e14
    assert np.linalg.norm(res.iterates[1] - z0) <= bound + 1e-15


def test_sampling_distribution_zero_residual():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((12, 3))
    z = rng.standard_normal(3)
    sd = sampling_distribution(lambda zz: A @ zz, z, A @ z, 0.5)
    assert sd.sigma2_ols == pytest.approx(0.0, abs=1e-20)
    assert np.abs(sd.covariance).max() <= 1e-18


def test_sampling_distribution_identity_jacobian():
    n_z, extra = 4, 6
    z = np.zeros(n_z)

    def forward(zz):
        return np.concatenate([zz, np.zeros(extra)])

    d = forward(z) + np.concatenate([np.zeros(n_z), 0.3 * np.ones(extra)])
    sd = sampling_distribution(forward, z, d, 0.5)
    assert np.allclose(sd.delta, 1.0, atol=1e-12)


def test_sampling_distribution_requires_overdetermined():
    with pytest.raises(ValueError, match="more observations"):
        sampling_distribution(lambda z: z, np.zeros(3), np.zeros(3), 0.5)


def test_sampling_distribution_covariance_against_monte_carlo():
    """Spread of the estimator over repeated noise draws matches V."""
    rng = np.random.default_rng(6)
    A = rng.standard_normal((200, 5))
    z_true = rng.standard_normal(5)
    sigma0 = 0.1
    cfg = LMConfig(alpha=1e-6, step=0.2, max_iters=30, tol=1e-12)
    d0 = A @ z_true + sigma0 * rng.standard_normal(200)
    base = lm_solve(lambda z: A @ z, d0, np.zeros(5), cfg)
    sd = sampling_distribution(lambda z: A @ z, base.z_ols, d0, 0.2)
    solve = np.linalg.solve
    AtA = A.T @ A
    estimates = np.empty((1000, 5))
    for m in range(1000):
        d = A @ z_true + sigma0 * rng.standard_normal(200)
        estimates[m] = solve(AtA, A.T @ d)
    spread = estimates.var(axis=0, ddof=1)
    assert np.all(np.abs(spread - sd.delta * sd.sigma2_ols)
                  <= 0.2 * spread)


@pytest.mark.parametrize("halfwidth, expected_nu", [
    (0.3, 1.0), (0.999, 1.0), (1.0, 1.0), (1.001, 1.001), (1.7, 1.7)])
def test_intermediate_adjustment_rule(halfwidth, expected_nu):
    # craft sigma and delta so 2 sigma sqrt(delta) equals halfwidth exactly
    sd = SamplingDistribution(z_ols=np.array([0.4]),
                              sigma2_ols=(halfwidth / 2.0) ** 2,
                              delta=np.array([1.0]),
                              covariance=np.array([[1.0]]), n_d=10)
    inter = build_intermediate(sd)
    assert inter.lower[0] == pytest.approx(0.4 - expected_nu, abs=1e-12)
    assert inter.upper[0] == pytest.approx(0.4 + expected_nu, abs=1e-12)
    assert inter.floored[0] == (halfwidth <= 1.0)


def test_intermediate_override_wins():
    sd = SamplingDistribution(z_ols=np.array([0.4, 2.0]), sigma2_ols=4.0,
                              delta=np.array([1.0, 1.0]),
                              covariance=np.eye(2), n_d=10)
    inter = build_intermediate(sd, overrides={0: (0.0, 1.0)})
    assert (inter.lower[0], inter.upper[0]) == (0.0, 1.0)
    assert inter.upper[1] == pytest.approx(2.0 + 4.0)


def test_intermediate_contains_estimate_strictly():
    rng = np.random.default_rng(7)
    for _ in range(50):
        z = rng.standard_normal(4)
        sd = SamplingDistribution(z, float(rng.random() * 2), rng.random(4) + 0.01,
                                  np.eye(4), 100)
        inter = build_intermediate(sd)
        assert np.all(inter.lower < z) and np.all(z < inter.upper)
        assert np.all(inter.upper - inter.lower >= 2.0 - 1e-12)


def test_report_roundtrip(tmp_path):
    res = LMResult(np.array([1.0, 2.0]), [3.0, 1.0], [np.zeros(2)], True,
                   False, 1)
    sd = SamplingDistribution(np.array([1.0, 2.0]), 0.5, np.array([1.0, 4.0]),
                              np.diag([0.5, 2.0]), 30)
    inter = build_intermediate(sd)
    path = tmp_path / "report.json"
    save_report(path, res, sd, inter, extra={"model_columns": 25})
    import json
    rep = json.loads(path.read_text())
    assert rep["z_ols"] == [1.0, 2.0]
    assert rep["model_columns"] == 25
    assert rep["intermediate"]["lower"][0] < 1.0
