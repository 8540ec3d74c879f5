import warnings

import numpy as np
import pytest

from lmmselect.base import CsvParseError, DegenerateColumnError, DimensionError, SchemaError
from lmmselect.data import (
    CsvSchema,
    LongitudinalDataset,
    SubjectBlock,
    load_csv,
    stack,
    standardize,
    unstack,
    write_csv,
)


def make_dataset(N=3, ni=4, d=2, q=1, seed=0):
    rng = np.random.default_rng(seed)
    subs = [
        SubjectBlock(rng.normal(size=ni), rng.normal(size=(ni, d)), rng.normal(size=(ni, q)))
        for _ in range(N)
    ]
    return LongitudinalDataset(tuple(subs),
                               tuple(f"x{j}" for j in range(d)),
                               tuple(f"z{j}" for j in range(q)))


def write_demo_csv(path, rows, header="id,y,a,b,w"):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")


class TestLoadCsv:
    def test_two_subjects_three_rows(self, tmp_path):
        p = tmp_path / "d.csv"
        rows = [[s, i, 2 * i, -i, 0.5] for s in ("u", "v") for i in range(3)]
        write_demo_csv(p, rows)
        ds = load_csv(p, CsvSchema("id", "y", ("a", "b"), ("w",)))
        assert ds.n_subjects == 2
        assert ds.n_obs_per_subject == (3, 3)
        assert ds.n_fixed == 2 and ds.n_random == 1

    def test_subjects_grouped_by_first_appearance(self, tmp_path):
        p = tmp_path / "d.csv"
        rows = [["u", 1, 1, 1, 1], ["v", 2, 2, 2, 2], ["u", 3, 3, 3, 3]]
        write_demo_csv(p, rows)
        ds = load_csv(p, CsvSchema("id", "y", ("a", "b"), ("w",)))
        assert ds.subject_ids == ("u", "v")
        assert ds.n_obs_per_subject == (2, 1)
        np.testing.assert_allclose(ds.subjects[0].y, [1, 3])

    def test_missing_response_column_is_schema_error(self, tmp_path):
        p = tmp_path / "d.csv"
        write_demo_csv(p, [["u", 1, 1, 1, 1]])
        with pytest.raises(SchemaError):
            load_csv(p, CsvSchema("id", "resp", ("a",)))

    def test_non_numeric_cell_names_row(self, tmp_path):
        p = tmp_path / "d.csv"
        rows = [["u", i, 1.0, 1.0, 1.0] for i in range(10)]
        rows[6][2] = "oops"  # data row 7
        write_demo_csv(p, rows)
        with pytest.raises(CsvParseError, match="row 7"):
            load_csv(p, CsvSchema("id", "y", ("a", "b"), ("w",)))

    def test_intercept_injection(self, tmp_path):
        p = tmp_path / "d.csv"
        write_demo_csv(p, [["u", 1, 2, 3, 4], ["u", 5, 6, 7, 8]])
        ds = load_csv(p, CsvSchema("id", "y", ("a", "b"), ("w",),
                                   add_fixed_intercept=True, add_random_intercept=True))
        assert ds.n_fixed == 3 and ds.n_random == 2
        np.testing.assert_allclose(ds.subjects[0].X[:, 2], 1.0)
        np.testing.assert_allclose(ds.subjects[0].Z[:, 1], 1.0)

    def test_round_trip_preserves_values(self, tmp_path):
        ds = make_dataset(N=4, ni=3, d=3, q=2, seed=1)
        p = tmp_path / "out.csv"
        write_csv(ds, p)
        back = load_csv(p, CsvSchema("subject", "y", ds.fixed_names, ds.random_names))
        for a, b in zip(ds.subjects, back.subjects):
            np.testing.assert_allclose(a.y, b.y, atol=1e-12)
            np.testing.assert_allclose(a.X, b.X, atol=1e-12)
            np.testing.assert_allclose(a.Z, b.Z, atol=1e-12)


class TestStandardize:
    def test_columns_have_norm_sqrt_n(self):
        ds = make_dataset(N=5, ni=1, d=3, q=1, seed=3)  # stacked X is 5x3
        out, rec = standardize(ds)
        norms = np.linalg.norm(out.stacked_X(), axis=0)
        np.testing.assert_allclose(norms, np.sqrt(5), atol=1e-10)

    def test_already_standardized_column_gets_unit_factor(self):
        n = 8
        col = np.ones(n)  # norm sqrt(n) already
        ds = LongitudinalDataset(
            (SubjectBlock(np.zeros(n), col[:, None], np.zeros((n, 0))),), ("x0",), ())
        _, rec = standardize(ds)
        np.testing.assert_allclose(rec.scale, [1.0], atol=1e-12)

    def test_constant_column_scales_to_one(self):
        n, c = 6, 2.5
        ds = LongitudinalDataset(
            (SubjectBlock(np.zeros(n), np.full((n, 1), c), np.zeros((n, 0))),), ("x0",), ())
        out, rec = standardize(ds)
        np.testing.assert_allclose(out.stacked_X(), 1.0)
        np.testing.assert_allclose(rec.scale, [abs(c)])

    def test_negative_constant_keeps_sign_with_positive_factor(self):
        n, c = 6, -2.5
        ds = LongitudinalDataset(
            (SubjectBlock(np.zeros(n), np.full((n, 1), c), np.zeros((n, 0))),), ("x0",), ())
        out, rec = standardize(ds)
        np.testing.assert_allclose(out.stacked_X(), -1.0)
        np.testing.assert_allclose(rec.scale, [abs(c)])
        assert np.linalg.norm(out.stacked_X()) == pytest.approx(np.sqrt(n))

    def test_z_not_rescaled(self):
        ds = make_dataset(seed=4)
        out, _ = standardize(ds)
        for a, b in zip(ds.subjects, out.subjects):
            np.testing.assert_array_equal(a.Z, b.Z)

    def test_idempotent(self):
        ds = make_dataset(seed=5)
        once, _ = standardize(ds)
        twice, rec2 = standardize(once)
        np.testing.assert_allclose(rec2.scale, 1.0, atol=1e-12)
        np.testing.assert_allclose(once.stacked_X(), twice.stacked_X(), atol=1e-12)

    def test_zero_column_rejected_by_name(self):
        n = 4
        X = np.hstack([np.ones((n, 1)), np.zeros((n, 1))])
        ds = LongitudinalDataset(
            (SubjectBlock(np.zeros(n), X, np.zeros((n, 0))),), ("good", "bad"), ())
        with pytest.raises(DegenerateColumnError, match="bad"):
            standardize(ds)


class TestStack:
    def test_block_diagonal_matches_dense_assembly(self):
        import scipy.linalg

        ds = make_dataset(N=3, ni=2, d=2, q=2, seed=6)
        _, _, Z = stack(ds)
        expected = scipy.linalg.block_diag(*[b.Z for b in ds.subjects])
        np.testing.assert_allclose(Z.dense(), expected)

    def test_single_subject_z_equals_block(self):
        ds = make_dataset(N=1, ni=4, d=2, q=2, seed=7)
        _, _, Z = stack(ds)
        np.testing.assert_allclose(Z.dense(), ds.subjects[0].Z)

    def test_small_block_diag_shape(self):
        ds = make_dataset(N=2, ni=2, d=1, q=1, seed=8)
        _, _, Z = stack(ds)
        assert Z.dense().shape == (4, 2)

    def test_matvec_consistent_with_dense(self):
        ds = make_dataset(N=3, ni=3, d=2, q=2, seed=9)
        Z = ds.z_blocks()
        g = np.arange(Z.n_cols, dtype=float)
        np.testing.assert_allclose(Z.matvec(g), Z.dense() @ g)
        v = np.arange(Z.n_rows, dtype=float)
        np.testing.assert_allclose(Z.rmatvec(v), Z.dense().T @ v)

    def test_stack_unstack_round_trip(self):
        ds = make_dataset(N=3, ni=4, d=2, q=1, seed=10)
        y, X, Z = stack(ds)
        back = unstack(ds, y, X, Z)
        for a, b in zip(ds.subjects, back.subjects):
            np.testing.assert_array_equal(a.y, b.y)
            np.testing.assert_array_equal(a.X, b.X)


class TestInvariants:
    def test_row_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            SubjectBlock(np.zeros(3), np.zeros((2, 1)), np.zeros((3, 0)))

    def test_column_count_mismatch_rejected(self):
        good = SubjectBlock(np.zeros(2), np.zeros((2, 2)), np.zeros((2, 1)))
        bad = SubjectBlock(np.zeros(2), np.zeros((2, 3)), np.zeros((2, 1)))
        with pytest.raises(DimensionError):
            LongitudinalDataset((good, bad), ("a", "b"), ("w",))

    def test_imbalance_warns(self):
        subs = (
            SubjectBlock(np.zeros(1), np.zeros((1, 1)), np.zeros((1, 0))),
            SubjectBlock(np.zeros(20), np.zeros((20, 1)), np.zeros((20, 0))),
        )
        with pytest.warns(UserWarning, match="imbalanced"):
            LongitudinalDataset(subs, ("a",), ())

    def test_with_columns_restricts(self):
        ds = make_dataset(N=2, ni=3, d=4, q=3, seed=11)
        sub = ds.with_columns(fixed_idx=[1, 3], random_idx=[0])
        assert sub.fixed_names == ("x1", "x3")
        assert sub.random_names == ("z0",)
        np.testing.assert_array_equal(sub.subjects[0].X, ds.subjects[0].X[:, [1, 3]])
