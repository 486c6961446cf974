import numpy as np
import pytest

from hdmice.amputation import impose_mar
from hdmice.data import (
    DataError,
    Dataset,
    MissingMask,
    pairwise_correlation,
    read_csv,
    response_indicator,
    standardize,
    validate_observed,
    write_csv,
)
from hdmice.simulation import PopulationModel, default_mar_spec, gen_sample


def make_dataset(values):
    values = np.asarray(values, dtype=float)
    return Dataset(values=values, columns=tuple(f"c{i}" for i in range(values.shape[1])))


class TestDatasetInvariants:
    def test_duplicate_column_names_rejected(self):
        with pytest.raises(DataError):
            Dataset(values=np.zeros((2, 2)), columns=("a", "a"))

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            Dataset(values=np.zeros((0, 3)), columns=("a", "b", "c"))

    def test_mask_outside_targets_rejected(self):
        mask = np.zeros((3, 2), dtype=bool)
        mask[0, 1] = True
        with pytest.raises(DataError):
            MissingMask(mask=mask, target_columns=(0,))

    def test_observed_cells_must_be_finite(self):
        data = make_dataset([[1.0, np.nan], [2.0, 3.0]])
        mask = np.zeros((2, 2), dtype=bool)
        with pytest.raises(DataError):
            validate_observed(data, MissingMask(mask=mask, target_columns=()))
        mask[0, 1] = True
        validate_observed(data, MissingMask(mask=mask, target_columns=(1,)))


class TestResponseIndicator:
    def test_no_missingness_gives_zeros(self):
        data = make_dataset(np.ones((4, 2)))
        mask = MissingMask(mask=np.zeros((4, 2), dtype=bool), target_columns=(1,))
        assert np.array_equal(response_indicator(data, mask, 1), np.zeros(4))

    def test_direct_readoff(self):
        mask = np.zeros((4, 2), dtype=bool)
        mask[[1, 3], 0] = True
        data = make_dataset(np.ones((4, 2)))
        mm = MissingMask(mask=mask, target_columns=(0,))
        assert np.array_equal(response_indicator(data, mm, 0), np.array([0.0, 1.0, 0.0, 1.0]))

    def test_column_not_under_imputation_rejected(self):
        data = make_dataset(np.ones((4, 2)))
        mask = MissingMask(mask=np.zeros((4, 2), dtype=bool), target_columns=(1,))
        with pytest.raises(DataError):
            response_indicator(data, mask, 0)

    def test_amputation_rate_recovered(self, rng):
        # derived check: the indicator's mean tracks the requested rate
        data = gen_sample(PopulationModel(p=12), 1000, rng)
        mask = impose_mar(data, default_mar_spec(0.3), rng)
        ind = response_indicator(data, mask, 0)
        assert abs(ind.mean() - 0.3) < 0.05


class TestStandardize:
    def test_simple_column(self):
        out, std = standardize(np.array([[1.0], [2.0], [3.0]]))
        assert np.allclose(out[:, 0], [-1.0, 0.0, 1.0])
        assert std.centers[0] == 2.0
        assert std.scales[0] == 1.0
        assert not std.degenerate[0]

    def test_constant_column_flagged(self):
        out, std = standardize(np.array([[4.0], [4.0], [4.0]]))
        assert np.array_equal(out[:, 0], np.zeros(3))
        assert std.degenerate[0]
        assert std.scales[0] == 1.0

    def test_random_matrix_moments(self, rng):
        x = rng.normal(3.0, 2.5, size=(100, 5))
        out, _ = standardize(x)
        assert np.all(np.abs(out.mean(axis=0)) < 1e-12)
        assert np.all(np.abs(out.var(axis=0, ddof=1) - 1.0) < 1e-10)

    def test_roundtrip_identity(self, rng):
        for _ in range(20):
            x = rng.normal(rng.normal(), abs(rng.normal()) + 0.1, size=(30, 4))
            out, std = standardize(x)
            back = std.invert(out)
            assert np.all(np.abs(back - x) <= 1e-10 * np.maximum(np.abs(x), 1.0))


class TestPairwiseCorrelation:
    def test_self_correlation(self, rng):
        x = rng.normal(size=50)
        assert pairwise_correlation(x, x) == pytest.approx(1.0)

    def test_sign_flip(self, rng):
        x = rng.normal(size=50)
        assert pairwise_correlation(x, -x) == pytest.approx(-1.0)

    def test_null_correlation(self, rng):
        x = rng.normal(size=10_000)
        y = rng.normal(size=10_000)
        assert abs(pairwise_correlation(x, y)) < 0.05

    def test_undefined_cases(self):
        assert np.isnan(pairwise_correlation([1.0, 2.0], [1.0, 2.0]))
        assert np.isnan(pairwise_correlation([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]))
        x = np.array([1.0, np.nan, 2.0, np.nan])
        y = np.array([np.nan, 1.0, 2.0, np.nan])
        assert np.isnan(pairwise_correlation(x, y))

    def test_symmetry_and_affine_invariance(self, rng):
        for _ in range(20):
            x = rng.normal(size=40)
            y = rng.normal(size=40) + 0.5 * x
            x[rng.random(40) < 0.2] = np.nan
            r = pairwise_correlation(x, y)
            assert pairwise_correlation(y, x) == pytest.approx(r, abs=1e-12)
            assert pairwise_correlation(3.5 * x + 2.0, y) == pytest.approx(r, abs=1e-12)
            assert pairwise_correlation(-2.0 * x + 1.0, y) == pytest.approx(-r, abs=1e-12)


class TestCsv:
    def test_roundtrip_with_missing(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("a,b,c\n1.5,,3\n2.5,4.25,NA\n")
        data, mask = read_csv(path)
        assert data.columns == ("a", "b", "c")
        assert mask.target_columns == (1, 2)
        assert mask.mask[0, 1] and mask.mask[1, 2]
        assert data.values[0, 0] == 1.5
        out = tmp_path / "o.csv"
        write_csv(out, data, mask)
        data2, mask2 = read_csv(out)
        assert np.array_equal(mask.mask, mask2.mask)
        obs = ~mask.mask
        assert np.array_equal(data.values[obs], data2.values[obs])

    def test_bad_numeric_field(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("a,b\n1,x\n")
        with pytest.raises(DataError):
            read_csv(path)

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("a,b\n1,2\n3\n")
        with pytest.raises(DataError):
            read_csv(path)
