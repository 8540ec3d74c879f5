import numpy as np
import pytest

from lmmselect.base import SolverOptions
from lmmselect.data import LongitudinalDataset, SubjectBlock, standardize
from lmmselect.fixed_effects import (
    FixedProblem,
    fit_fixed,
    kkt_check_fixed,
    objective_fixed,
)
from lmmselect.gls import ProxyConfig, build_proxy
from lmmselect.oracles import finite_diff_gradient
from lmmselect.penalties import PenaltySpec


def make_problem(N=6, ni=5, d=4, q=2, seed=0, beta=None, snr_noise=0.3):
    rng = np.random.default_rng(seed)
    beta = np.zeros(d) if beta is None else np.asarray(beta, dtype=float)
    subs = []
    for _ in range(N):
        X = rng.normal(size=(ni, d))
        Z = rng.normal(size=(ni, q))
        g = rng.normal(size=q)
        y = X @ beta + Z @ g + snr_noise * rng.normal(size=ni)
        subs.append(SubjectBlock(y, X, Z))
    ds = LongitudinalDataset(tuple(subs),
                             tuple(f"x{j}" for j in range(d)),
                             tuple(f"z{j}" for j in range(q)))
    ds, _ = standardize(ds)
    proxy = build_proxy(ds, ProxyConfig("logn"))
    return ds, proxy


class TestObjective:
    def test_zero_everything_gives_zero(self):
        ds, proxy = make_problem(seed=1)
        zero_subs = tuple(SubjectBlock(np.zeros(b.n_obs), b.X, b.Z) for b in ds.subjects)
        ds0 = LongitudinalDataset(zero_subs, ds.fixed_names, ds.random_names,
                                  ds.subject_ids, ds.standardization)
        val = objective_fixed(ds0, proxy, PenaltySpec("scad", 0.4), np.zeros(ds.n_fixed))
        assert val == 0.0

    def test_lam_zero_is_pure_quadratic(self):
        ds, proxy = make_problem(seed=2)
        rng = np.random.default_rng(3)
        beta = rng.normal(size=ds.n_fixed)
        resid = ds.stacked_y() - ds.stacked_X() @ beta
        expected = 0.5 * np.sum(proxy.whiten(resid) ** 2)
        assert objective_fixed(ds, proxy, PenaltySpec("l1", 0.0), beta) == pytest.approx(expected)

    def test_matches_dense_evaluation(self):
        ds, proxy = make_problem(seed=4)
        rng = np.random.default_rng(5)
        beta = rng.normal(size=ds.n_fixed)
        spec = PenaltySpec("scad", 0.3)
        resid = ds.stacked_y() - ds.stacked_X() @ beta
        dense = proxy.dense()
        from lmmselect import penalties
        expected = 0.5 * resid @ dense @ resid + ds.n_total * np.sum(
            penalties.value(spec, np.abs(beta)))
        assert objective_fixed(ds, proxy, spec, beta) == pytest.approx(expected, abs=1e-8)


class TestFit:
    def test_kill_threshold_gives_zero(self):
        ds, proxy = make_problem(seed=6, beta=[1.0, 0.5, 0, 0])
        problem = FixedProblem(ds, proxy)
        lam = problem.lambda_max() * 1.0001
        fit = problem.solve(PenaltySpec("l1", lam))
        np.testing.assert_array_equal(fit.beta, 0.0)
        fit2 = problem.solve(PenaltySpec("l1", lam * 0.98))
        assert fit2.active != ()

    def test_lam_zero_matches_gls(self):
        ds, proxy = make_problem(seed=7, beta=[1.0, -2.0, 0.5, 0])
        fit = fit_fixed(ds, proxy, PenaltySpec("scad", 0.0))
        Xw = proxy.whiten(ds.stacked_X())
        yw = proxy.whiten(ds.stacked_y())
        gls = np.linalg.solve(Xw.T @ Xw, Xw.T @ yw) / ds.standardization.scale
        np.testing.assert_allclose(fit.beta, gls, atol=1e-6)

    def test_monotone_trace(self):
        for seed in range(5):
            ds, proxy = make_problem(seed=20 + seed, beta=[1.5, 0, -1.0, 0])
            fit = fit_fixed(ds, proxy, PenaltySpec("scad", 0.2))
            tr = fit.objective_trace
            assert all(b <= a + 1e-12 * max(1, abs(a)) for a, b in zip(tr, tr[1:]))

    def test_permutation_equivariance(self):
        ds, proxy = make_problem(seed=8, beta=[2.0, 0, 1.0, 0])
        perm = [2, 0, 3, 1]
        fit = fit_fixed(ds, proxy, PenaltySpec("scad", 0.15))
        permuted = ds.with_columns(fixed_idx=perm)
        fitp = fit_fixed(permuted, proxy, PenaltySpec("scad", 0.15))
        np.testing.assert_allclose(fitp.beta, fit.beta[perm], atol=1e-8)

    def test_smooth_gradient_matches_finite_differences(self):
        ds, proxy = make_problem(seed=9, beta=[1.0, 0, 0, -1.0])
        problem = FixedProblem(ds, proxy)
        rng = np.random.default_rng(10)
        for _ in range(20):
            beta = rng.normal(size=ds.n_fixed)
            grad = problem.gram @ beta - problem.xty
            fd = finite_diff_gradient(problem.quad, beta, h=1e-5)
            np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-5)

    def test_warm_start_agrees_with_cold(self):
        ds, proxy = make_problem(seed=11, beta=[1.0, 0.7, 0, 0])
        problem = FixedProblem(ds, proxy)
        spec = PenaltySpec("scad", 0.1)
        cold = problem.solve(spec)
        warm = problem.solve(spec, beta0=cold.beta_standardized)
        np.testing.assert_allclose(warm.beta, cold.beta, atol=1e-7)

    def test_nonconvergence_flagged_not_raised(self):
        ds, proxy = make_problem(seed=12, beta=[1.0, -1.0, 0.5, 0])
        opts = SolverOptions(cd_max_sweeps=1, lla_max_iter=1, polish=False)
        fit = fit_fixed(ds, proxy, PenaltySpec("scad", 0.01), opts)
        assert fit.converged in (False, True)  # no exception; flag present

    def test_mcp_runs(self):
        ds, proxy = make_problem(seed=13, beta=[1.5, 0, 0, 0])
        fit = fit_fixed(ds, proxy, PenaltySpec("mcp", 0.2))
        assert 0 in fit.active


class TestKkt:
    def test_gls_fit_is_stationary(self):
        ds, proxy = make_problem(seed=14, beta=[1.0, -0.5, 0, 0.2])
        spec = PenaltySpec("scad", 0.0)
        fit = fit_fixed(ds, proxy, spec)
        cert = kkt_check_fixed(ds, proxy, spec, fit)
        assert cert.stationarity_residual < 1e-6

    def test_converged_fit_passes(self):
        ds, proxy = make_problem(seed=15, beta=[2.0, 1.0, 0, 0], snr_noise=0.5)
        spec = PenaltySpec("scad", 0.25)
        fit = fit_fixed(ds, proxy, spec)
        cert = kkt_check_fixed(ds, proxy, spec, fit)
        assert cert.passed, (cert.stationarity_residual, cert.dual_infeasibility,
                             cert.curvature_margin)

    def test_perturbed_solution_fails_stationarity(self):
        ds, proxy = make_problem(seed=16, beta=[2.0, 1.0, 0, 0], snr_noise=0.5)
        spec = PenaltySpec("scad", 0.25)
        fit = fit_fixed(ds, proxy, spec)
        j = fit.active[0]
        fit.beta_standardized = fit.beta_standardized.copy()
        fit.beta_standardized[j] += 0.1
        cert = kkt_check_fixed(ds, proxy, spec, fit)
        assert not cert.stationarity_ok

    def test_empty_active_set_passes_vacuously(self):
        ds, proxy = make_problem(seed=17)
        problem = FixedProblem(ds, proxy)
        spec = PenaltySpec("l1", problem.lambda_max() * 1.1)
        fit = problem.solve(spec)
        cert = problem.kkt_certificate(spec, fit)
        assert fit.active == ()
        assert cert.passed
