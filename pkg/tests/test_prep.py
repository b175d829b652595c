import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from warpfit.exceptions import DuplicateId, MissingCovariate, ParseError, SingularFit, TooFewPoints
from warpfit.prep import (
    CV_BANDWIDTHS,
    CurveSmoother,
    RawCurve,
    load_corpus,
    read_curve_file,
    screen_missing,
    select_bandwidth,
    smooth_curve,
)


def wls_oracle(u, y, at, bandwidth):
    """Independent local-linear fit: explicit weighted least squares per point."""
    out = []
    for a in at:
        w = np.sqrt(np.exp(-0.5 * ((u - a) / bandwidth) ** 2))
        design = np.column_stack([np.ones_like(u), u - a])
        coef, *_ = np.linalg.lstsq(design * w[:, None], y * w, rcond=None)
        out.append(coef[0])
    return np.array(out)


def raw(values, times=None, cid="c1"):
    values = np.asarray(values, dtype=float)
    if times is None:
        times = np.linspace(0.3, 0.5, values.size)
    return RawCurve(cid, times, values)


class TestSmoothing:
    def test_linear_input_reproduced_exactly(self):
        t = np.linspace(1.0, 1.25, 30)
        curve = smooth_curve(raw(100 + 40 * (t - 1.0), t), bandwidth=0.05, grid_size=16)
        expected = 100 + 40 * 0.25 * curve.grid
        np.testing.assert_allclose(curve.values, expected, rtol=0, atol=1e-10)

    def test_default_configuration_gives_sixteen_points(self):
        curve = smooth_curve(raw(np.linspace(1, 2, 40)))
        assert curve.values.shape == (16,)
        assert curve.grid[0] == 0.0 and curve.grid[-1] == 1.0

    def test_duration_in_tens_of_milliseconds(self):
        curve = smooth_curve(raw(np.ones(20), np.linspace(2.0, 2.2, 20)))
        assert curve.duration == pytest.approx(20.0)

    def test_matches_weighted_least_squares_oracle(self, rng):
        t = np.sort(rng.uniform(0, 0.3, 50))
        y = 200 + 30 * np.sin(2 * np.pi * t / 0.3) + rng.normal(0, 2, t.size)
        curve = smooth_curve(raw(y, t), bandwidth=0.05, grid_size=16)
        u = (t - t[0]) / (t[-1] - t[0])
        expected = wls_oracle(u, y, curve.grid, 0.05)
        np.testing.assert_allclose(curve.values, expected, rtol=1e-10)

    def test_missing_readings_are_dropped(self, rng):
        t = np.linspace(0, 0.2, 40)
        y = 150 + 20 * t
        y_missing = y.copy()
        y_missing[[5, 17]] = np.nan
        a = smooth_curve(raw(y_missing, t))
        np.testing.assert_allclose(a.values, 150 + 20 * 0.2 * a.grid, atol=1e-10)

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            smooth_curve(raw([1.0, 2.0, np.nan, 3.0, np.nan]))

    def test_tiny_bandwidth_is_singular(self):
        t = np.array([0.0, 0.01, 0.02, 0.98, 0.99, 1.0])
        with pytest.raises(SingularFit):
            smooth_curve(raw(np.arange(6.0), t), bandwidth=0.01)

    def test_bandwidth_out_of_range(self):
        with pytest.raises(ValueError):
            smooth_curve(raw(np.arange(10.0)), bandwidth=0.6)

    def test_cv_mode_picks_a_candidate(self, rng):
        t = np.linspace(0, 0.25, 60)
        y = 180 + 15 * np.sin(8 * t) + rng.normal(0, 1, t.size)
        bw = select_bandwidth(raw(y, t))
        assert bw in CV_BANDWIDTHS
        smoother = CurveSmoother(bandwidth_mode="cv").fit([raw(y, t)])
        out = smoother.transform([raw(y, t)])
        assert out[0].values.shape == (16,)

    @given(c=st.floats(-500, 500), slope=st.floats(-200, 200),
           bw=st.floats(0.02, 0.5), n=st.integers(8, 60), grid_size=st.integers(4, 40))
    def test_constant_and_linear_reproduced(self, c, slope, bw, n, grid_size):
        t = np.linspace(0.0, 0.3, n)
        curve = smooth_curve(raw(c + slope * t, t), bandwidth=bw, grid_size=grid_size)
        np.testing.assert_allclose(curve.values, c + slope * 0.3 * curve.grid,
                                   atol=1e-8 * (1 + abs(c) + abs(slope)))
        np.testing.assert_array_equal(curve.grid, np.linspace(0, 1, grid_size))


class TestScreening:
    def test_no_missing_accepted(self):
        assert screen_missing(raw(np.ones(16)), 0.05)

    def test_one_of_sixteen_rejected(self):
        v = np.ones(16)
        v[3] = np.nan
        assert not screen_missing(raw(v), 0.05)

    def test_four_of_hundred_accepted(self):
        v = np.ones(100)
        v[:4] = np.nan
        assert screen_missing(raw(v), 0.05)

    @given(n=st.integers(4, 100), k=st.integers(0, 100),
           hi=st.floats(0.0, 0.99), lo_frac=st.floats(0, 1))
    def test_lowering_threshold_never_accepts_more(self, n, k, hi, lo_frac):
        v = np.ones(n)
        v[: min(k, n)] = np.nan
        lo = hi * lo_frac
        if screen_missing(raw(v), lo):
            assert screen_missing(raw(v), hi)


class TestCorpusFiles:
    def test_empty_curve_file(self, tmp_path):
        curves = tmp_path / "curves.csv"
        curves.write_text("")
        cov = tmp_path / "cov.csv"
        cov.write_text("id,speaker,sentence,class\n")
        assert load_corpus(curves, cov) == []

    def test_missing_covariates_name_the_id(self, tmp_path):
        curves = tmp_path / "curves.csv"
        curves.write_text("id,t,f0\na,0.0,100\nb,0.0,110\nc,0.0,120\n")
        cov = tmp_path / "cov.csv"
        cov.write_text("id,speaker,sentence,class\na,F01,1,1\nc,F01,2,1\n")
        with pytest.raises(MissingCovariate, match="b"):
            load_corpus(curves, cov)

    def test_covariate_labels_carried(self, tmp_path):
        curves = tmp_path / "curves.csv"
        curves.write_text("id,t,f0\nx1,0.00,210\nx1,0.01,\nx1,0.02,205\n")
        cov = tmp_path / "cov.csv"
        cov.write_text("id,speaker,sentence,class,tone,rhyme,B2\nx1,F02,17,4,4,oN,2\n")
        (curve,) = load_corpus(curves, cov)
        assert curve.covariates["speaker"] == "F02"
        assert curve.covariates["tone"] == "4"
        assert curve.covariates["rhyme"] == "oN"
        assert curve.covariates["B2"] == "2"
        assert curve.n_missing == 1

    def test_parse_error_reports_line(self, tmp_path):
        curves = tmp_path / "curves.csv"
        curves.write_text("id,t,f0\na,0.0,100\na,0.1,abc\n")
        with pytest.raises(ParseError) as info:
            read_curve_file(curves)
        assert info.value.line == 3

    def test_non_contiguous_id_is_duplicate(self, tmp_path):
        curves = tmp_path / "curves.csv"
        curves.write_text("id,t,f0\na,0.0,100\nb,0.0,100\na,0.1,100\n")
        with pytest.raises(DuplicateId):
            read_curve_file(curves)
