from types import SimpleNamespace

import numpy as np
import pytest

from lmmselect.base import TuningError
from lmmselect.tuning import (
    TuningSpec,
    criterion_value,
    default_criterion,
    make_grid,
    select_lambda,
    select_lambda_by_set_score,
)


def fake_fit(loss, df, edof=None):
    return SimpleNamespace(quad_loss=loss, df=df,
                           edof=df if edof is None else edof,
                           selected=tuple(range(df)), active=tuple(range(df)))


class TestDefaults:
    def test_protocol_mapping(self):
        assert default_criterion("fixed", "scad") == "bic"
        assert default_criterion("fixed", "l1") == "bic"
        assert default_criterion("random", "scad") == "aic"
        assert default_criterion("random", "l1") == "bic"

    def test_grid_is_decreasing_and_positive(self):
        g = make_grid(2.0, 20, 1e-3)
        assert len(g) == 20
        assert np.all(g > 0)
        assert np.all(np.diff(g) < 0)
        assert g[0] >= 2.0  # head sits at or above the kill threshold
        assert g[-1] == pytest.approx(2e-3)

    def test_grid_requires_positive_head(self):
        with pytest.raises(TuningError):
            make_grid(0.0)


class TestSelectLambda:
    def test_single_point_grid(self):
        spec = TuningSpec("bic", "fixed", grid=np.array([0.7]))
        res = select_lambda(lambda lam, warm: fake_fit(3.0, 1), spec, "scad", n=50)
        assert res.lam == 0.7
        assert res.n_evaluated == 1

    def test_ties_resolve_to_larger_lambda(self):
        spec = TuningSpec("bic", "fixed", grid=np.array([1.0, 0.5, 0.25]))
        res = select_lambda(lambda lam, warm: fake_fit(2.0, 2), spec, "scad", n=40)
        assert res.lam == 1.0

    def test_argmin_selected(self):
        losses = {1.0: 9.0, 0.5: 1.0, 0.25: 0.99}
        dfs = {1.0: 0, 0.5: 1, 0.25: 5}
        spec = TuningSpec("bic", "fixed", grid=np.array([1.0, 0.5, 0.25]))
        res = select_lambda(lambda lam, warm: fake_fit(losses[lam], dfs[lam]),
                            spec, "scad", n=40)
        vals = {row["lam"]: row["criterion"] for row in res.table}
        assert res.lam == min(vals, key=vals.get)

    def test_failed_points_skipped(self):
        def fit_at(lam, warm):
            if lam > 0.6:
                raise RuntimeError("boom")
            return fake_fit(1.0, 1)

        spec = TuningSpec("bic", "fixed", grid=np.array([1.0, 0.5]))
        res = select_lambda(fit_at, spec, "scad", n=40)
        assert res.lam == 0.5
        assert res.table[0]["error"] == "boom"

    def test_all_failed_is_error(self):
        def fit_at(lam, warm):
            raise RuntimeError("nope")

        spec = TuningSpec("bic", "fixed", grid=np.array([1.0, 0.5]))
        with pytest.raises(TuningError):
            select_lambda(fit_at, spec, "scad", n=40)

    def test_random_target_uses_edof(self):
        spec = TuningSpec("aic", "random", grid=np.array([1.0, 0.5]))
        seen = []

        def fit_at(lam, warm):
            fit = fake_fit(1.0, 1, edof=7.5)
            seen.append(fit)
            return fit

        res = select_lambda(fit_at, spec, "scad", n=40)
        assert res.table[0]["df"] == 7.5

    def test_criterion_finite_even_for_zero_loss(self):
        assert np.isfinite(criterion_value(0.0, 2, 100, "bic", 10))

    def test_grid_validation(self):
        with pytest.raises(TuningError):
            TuningSpec("bic", "fixed", grid=np.array([0.5, 1.0]))  # increasing
        with pytest.raises(TuningError):
            TuningSpec("bic", "fixed", grid=np.array([]))


class TestSetScore:
    def test_scores_each_support_once_and_keeps_largest_lambda(self):
        calls = []

        def fit_at(lam, warm):
            support = (0,) if lam > 0.4 else (0, 1)
            return SimpleNamespace(selected=support, gamma=None)

        def score(support):
            calls.append(support)
            return -float(len(support))  # denser is better here

        res = select_lambda_by_set_score(fit_at, np.array([1.0, 0.5, 0.3, 0.2]), score)
        assert res.best.selected == (0, 1)
        assert res.lam == 0.3  # largest lam attaining the best support
        assert sorted(set(calls)) == [(0,), (0, 1)]
        assert len(calls) == 2
