import numpy as np
import pytest

from lmmselect.base import DimensionError, SolverOptions
from lmmselect.data import LongitudinalDataset, SubjectBlock
from lmmselect.gls import ProxyConfig, build_projection
from lmmselect.penalties import PenaltySpec
from lmmselect.random_effects import (
    RandomProblem,
    fit_random,
    kkt_check_random,
    marginal_likelihood_score,
    objective_random,
    oracle_bayes,
)


def make_problem(N=5, ni=4, d=2, q=3, seed=0, true_groups=(0,), sd=2.0, noise=0.5,
                 beta=None):
    rng = np.random.default_rng(seed)
    beta = rng.normal(size=d) if beta is None else np.asarray(beta, dtype=float)
    subs = []
    for _ in range(N):
        X = rng.normal(size=(ni, d))
        Z = rng.normal(size=(ni, q))
        g = np.zeros(q)
        for k in true_groups:
            g[k] = sd * rng.normal()
        y = X @ beta + Z @ g + noise * rng.normal(size=ni)
        subs.append(SubjectBlock(y, X, Z))
    ds = LongitudinalDataset(tuple(subs),
                             tuple(f"x{j}" for j in range(d)),
                             tuple(f"z{j}" for j in range(q)))
    proj = build_projection(ds.stacked_X())
    return ds, proj


class TestObjective:
    def test_gamma_zero_is_projected_quadratic(self):
        ds, proj = make_problem(seed=1)
        val = objective_random(ds, proj, ProxyConfig("logn"), PenaltySpec("scad", 0.3),
                               np.zeros(ds.n_subjects * ds.n_random))
        y = ds.stacked_y()
        assert val == pytest.approx(0.5 * proj.quad_form(y))

    def test_y_in_column_space_gives_zero(self):
        ds, proj = make_problem(seed=2)
        b = np.array([1.0, -2.0])
        subs = tuple(SubjectBlock(blk.X @ b, blk.X, blk.Z) for blk in ds.subjects)
        ds2 = LongitudinalDataset(subs, ds.fixed_names, ds.random_names)
        val = objective_random(ds2, proj, ProxyConfig("logn"), PenaltySpec("l1", 0.5),
                               np.zeros(ds.n_subjects * ds.n_random))
        assert val == pytest.approx(0.0, abs=1e-16)

    def test_matches_dense_evaluation(self):
        ds, proj = make_problem(seed=3)
        cfg = ProxyConfig("logn")
        rng = np.random.default_rng(4)
        gamma = rng.normal(size=ds.n_subjects * ds.n_random)
        spec = PenaltySpec("l1", 0.0)
        Z = ds.z_blocks().dense()
        P = proj.dense()
        M = cfg.materialize(ds.n_random, ds.n_total)
        M_all_inv = np.kron(np.eye(ds.n_subjects), np.linalg.inv(M))
        r = ds.stacked_y() - Z @ gamma
        expected = 0.5 * r @ P @ r + 0.5 * gamma @ M_all_inv @ gamma
        assert objective_random(ds, proj, cfg, spec, gamma) == pytest.approx(expected, abs=1e-8)


class TestFit:
    def test_group_kill_threshold(self):
        ds, proj = make_problem(seed=5, true_groups=(0, 1), sd=1.5)
        prob = RandomProblem(ds, proj, ProxyConfig("logn"))
        lam = prob.lambda_max()
        fit = prob.solve(PenaltySpec("l1", lam * 1.0001))
        assert fit.selected == ()
        np.testing.assert_array_equal(fit.gamma, 0.0)
        fit2 = prob.solve(PenaltySpec("l1", lam * 0.98))
        assert fit2.selected != ()

    def test_lam_zero_matches_dense_ridge(self):
        ds, proj = make_problem(seed=6)
        cfg = ProxyConfig("logn")
        fit = fit_random(ds, proj, cfg, PenaltySpec("scad", 0.0))
        Z = ds.z_blocks().dense()
        P = proj.dense()
        M = cfg.materialize(ds.n_random, ds.n_total)
        M_all_inv = np.kron(np.eye(ds.n_subjects), np.linalg.inv(M))
        expected = np.linalg.solve(Z.T @ P @ Z + M_all_inv, Z.T @ P @ ds.stacked_y())
        np.testing.assert_allclose(fit.gamma, expected, atol=1e-6)

    def test_zero_groups_exactly_zero(self):
        ds, proj = make_problem(seed=7, true_groups=(0,), sd=3.0, noise=0.3)
        prob = RandomProblem(ds, proj, ProxyConfig("logn"))
        fit = prob.solve(PenaltySpec("scad", 0.6 * prob.lambda_max()))
        for k in range(ds.n_random):
            group = fit.gamma[prob.group_idx[k]]
            if k not in fit.selected:
                assert np.all(group == 0.0)
            else:
                assert np.linalg.norm(group) > 0

    def test_monotone_trace(self):
        for seed in range(4):
            ds, proj = make_problem(seed=30 + seed, true_groups=(0, 2), sd=2.0)
            prob = RandomProblem(ds, proj, ProxyConfig("logn"))
            fit = prob.solve(PenaltySpec("scad", 0.3 * prob.lambda_max()))
            tr = fit.objective_trace
            assert all(b <= a + 1e-12 * max(1, abs(a)) for a, b in zip(tr, tr[1:]))

    def test_beta_independence(self):
        ds, proj = make_problem(seed=8, true_groups=(0,), sd=2.5)
        cfg = ProxyConfig("logn")
        spec = PenaltySpec("scad", 0.4)
        base = fit_random(ds, proj, cfg, spec)
        rng = np.random.default_rng(9)
        for _ in range(3):
            b = rng.normal(size=ds.n_fixed)
            subs = tuple(SubjectBlock(blk.y + blk.X @ b, blk.X, blk.Z)
                         for blk in ds.subjects)
            shifted = LongitudinalDataset(subs, ds.fixed_names, ds.random_names)
            alt = fit_random(shifted, proj, cfg, spec)
            assert alt.selected == base.selected
            np.testing.assert_allclose(alt.gamma, base.gamma, atol=1e-8)

    def test_subject_permutation_equivariance(self):
        ds, proj = make_problem(seed=10, true_groups=(0, 1), sd=2.0)
        cfg = ProxyConfig("logn")
        spec = PenaltySpec("scad", 0.3)
        fit = fit_random(ds, proj, cfg, spec)
        perm = [2, 0, 4, 1, 3]
        subs = tuple(ds.subjects[i] for i in perm)
        permuted = LongitudinalDataset(subs, ds.fixed_names, ds.random_names)
        proj_p = build_projection(permuted.stacked_X())
        fit_p = fit_random(permuted, proj_p, cfg, spec)
        np.testing.assert_allclose(fit_p.group_norms, fit.group_norms, atol=1e-10)
        q = ds.n_random
        for new_i, old_i in enumerate(perm):
            np.testing.assert_allclose(fit_p.gamma[new_i * q:(new_i + 1) * q],
                                       fit.gamma[old_i * q:(old_i + 1) * q], atol=1e-8)

    def test_sd_estimates_are_scaled_norms(self):
        ds, proj = make_problem(seed=11, true_groups=(0,), sd=2.0)
        fit = fit_random(ds, proj, ProxyConfig("logn"), PenaltySpec("scad", 0.2))
        np.testing.assert_allclose(fit.sd_estimates,
                                   fit.group_norms / np.sqrt(ds.n_subjects))


class TestOracleBayes:
    def test_full_set_equals_unpenalized_fit(self):
        ds, proj = make_problem(seed=12)
        cfg = ProxyConfig("logn")
        est = oracle_bayes(ds, proj, cfg, range(ds.n_random))
        fit = fit_random(ds, proj, cfg, PenaltySpec("l1", 0.0))
        np.testing.assert_allclose(est, fit.gamma, atol=1e-8)

    def test_y_in_column_space_gives_zero(self):
        ds, proj = make_problem(seed=13)
        b = np.array([0.5, 1.0])
        subs = tuple(SubjectBlock(blk.X @ b, blk.X, blk.Z) for blk in ds.subjects)
        ds2 = LongitudinalDataset(subs, ds.fixed_names, ds.random_names)
        est = oracle_bayes(ds2, proj, ProxyConfig("logn"), [0, 1])
        np.testing.assert_allclose(est, 0.0, atol=1e-10)

    def test_matches_dense_restricted_solve(self):
        ds, proj = make_problem(seed=14, q=3)
        cfg = ProxyConfig("logn")
        sel = [0, 2]
        est = oracle_bayes(ds, proj, cfg, sel)
        N, q = ds.n_subjects, ds.n_random
        idx = sorted(i * q + k for i in range(N) for k in sel)
        Z = ds.z_blocks().dense()[:, idx]
        P = proj.dense()
        M = cfg.materialize(q, ds.n_total)[np.ix_(sel, sel)]
        M_inv_all = np.kron(np.eye(N), np.linalg.inv(M))
        dense = np.linalg.solve(Z.T @ P @ Z + M_inv_all, Z.T @ P @ ds.stacked_y())
        np.testing.assert_allclose(est[idx], dense, atol=1e-8)
        other = [j for j in range(N * q) if j not in idx]
        np.testing.assert_array_equal(est[other], 0.0)

    def test_empty_set_rejected(self):
        ds, proj = make_problem(seed=15)
        with pytest.raises(DimensionError):
            oracle_bayes(ds, proj, ProxyConfig("logn"), [])


class TestKkt:
    def test_unpenalized_fit_is_stationary(self):
        ds, proj = make_problem(seed=16)
        cfg = ProxyConfig("logn")
        spec = PenaltySpec("scad", 0.0)
        fit = fit_random(ds, proj, cfg, spec)
        cert = kkt_check_random(ds, proj, cfg, spec, fit)
        assert cert.stationarity_residual < 1e-6

    def test_converged_fit_passes(self):
        ds, proj = make_problem(seed=17, true_groups=(0,), sd=3.0, noise=0.4)
        cfg = ProxyConfig("logn")
        prob = RandomProblem(ds, proj, cfg)
        spec = PenaltySpec("scad", 0.5 * prob.lambda_max())
        fit = prob.solve(spec)
        cert = prob.kkt_certificate(spec, fit)
        assert cert.passed, (cert.stationarity_residual, cert.dual_infeasibility,
                             cert.curvature_margin)

    def test_hand_zeroed_group_detected(self):
        ds, proj = make_problem(seed=18, true_groups=(0, 1), sd=3.0, noise=0.4)
        cfg = ProxyConfig("logn")
        prob = RandomProblem(ds, proj, cfg)
        spec = PenaltySpec("scad", 0.3 * prob.lambda_max())
        fit = prob.solve(spec)
        assert len(fit.selected) >= 2
        k = fit.selected[0]
        gamma = fit.gamma.copy()
        gamma[prob.group_idx[k]] = 0.0
        fit.gamma = gamma
        fit.group_norms = prob.group_norms(gamma)
        fit.selected = tuple(int(j) for j in np.flatnonzero(fit.group_norms > 0))
        cert = prob.kkt_certificate(spec, fit)
        assert cert.dual_infeasibility >= 1.0

    def test_effective_df_between_zero_and_count(self):
        ds, proj = make_problem(seed=19, true_groups=(0, 1), sd=2.0)
        prob = RandomProblem(ds, proj, ProxyConfig("logn"))
        fit = prob.solve(PenaltySpec("scad", 0.2 * prob.lambda_max()))
        assert 0.0 < fit.edof <= len(fit.selected) * ds.n_subjects


class TestMarginalScore:
    def test_prefers_true_support_over_noise(self):
        ds, proj = make_problem(seed=20, true_groups=(0,), sd=3.0, noise=0.5,
                                N=8, ni=6)
        cfg = ProxyConfig("logn")
        fixed = range(ds.n_fixed)
        s_true = marginal_likelihood_score(ds, fixed, cfg, [0])
        s_empty = marginal_likelihood_score(ds, fixed, cfg, [])
        s_full = marginal_likelihood_score(ds, fixed, cfg, [0, 1, 2])
        assert s_true < s_empty
        assert s_true < s_full
