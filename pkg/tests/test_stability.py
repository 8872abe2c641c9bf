import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2

from oracles import brute_adev
from qmtwin.stability import (
    ONE_SIGMA, StabilityError, StabilitySeries, adev_at, adev_confidence, adev_curve, averaging_factors,
    edf_white_fm, max_factor, overlapping_adev, read_series_csv, write_curve_csv,
)


def test_brute_force_all_sizes():
    rng = np.random.default_rng(0)
    for M in range(3, 65):
        y = rng.standard_normal(M) * 1e-3 + 0.05
        for m in range(1, max_factor(M) + 1):
            assert overlapping_adev(y, m) == pytest.approx(brute_adev(y.tolist(), m), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=64), st.data())
def test_brute_force_property(values, data):
    m = data.draw(st.integers(1, max_factor(len(values))))
    expected = brute_adev(values, m)
    assert overlapping_adev(values, m) == pytest.approx(expected, rel=1e-12, abs=1e-9)


@given(c=st.floats(-1e6, 1e6), M=st.integers(3, 200))
def test_constant_series_zero(c, M):
    y = np.full(M, c)
    for m in averaging_factors(M, "dense"):
        assert overlapping_adev(y, m) == 0.0


def test_three_point_example():
    assert overlapping_adev([1, 2, 3], 1) == pytest.approx(math.sqrt(0.5), rel=1e-15)


def test_white_noise_slope():
    y = np.random.default_rng(11).standard_normal(2000)
    a1, a10 = overlapping_adev(y, 10), overlapping_adev(y, 100)
    slope = math.log10(a10 / a1)
    assert slope == pytest.approx(-0.5, abs=0.1)


def test_linear_drift_slope_plus_one():
    y = 1e-3 * np.arange(1000.0)
    assert overlapping_adev(y, 100) / overlapping_adev(y, 10) == pytest.approx(10.0, rel=1e-9)


def test_normalize():
    y = 0.05 + 1e-3 * np.random.default_rng(1).standard_normal(100)
    assert overlapping_adev(y, 3, normalize=True) == pytest.approx(overlapping_adev(y, 3) / y.mean())
    with pytest.raises(StabilityError):
        overlapping_adev(np.array([1.0, -1.0, 0.0]), 1, normalize=True)


def test_m_out_of_range():
    with pytest.raises(StabilityError):
        overlapping_adev(np.arange(10.0), 5)
    with pytest.raises(StabilityError):
        overlapping_adev(np.arange(10.0), 0)


def test_edf_formula():
    M, m = 100, 4
    expected = (3 * 99 / 8 - 2 * 98 / 100) * 64 / 69
    assert edf_white_fm(m, M) == pytest.approx(expected, rel=1e-14)
    assert edf_white_fm(1, 100) == pytest.approx((3 * 99 / 2 - 2 * 98 / 100) * 4 / 9)


def test_confidence_interval_quantiles():
    a, m, M = 2e-4, 4, 100
    lo, hi = adev_confidence(a, m, M)
    edf = edf_white_fm(m, M)
    assert lo == pytest.approx(a * math.sqrt(edf / chi2.ppf(0.5 + ONE_SIGMA / 2, edf)), rel=1e-12)
    assert hi == pytest.approx(a * math.sqrt(edf / chi2.ppf(0.5 - ONE_SIGMA / 2, edf)), rel=1e-12)
    # asymmetric: upper excursion larger than lower
    assert lo < a < hi
    assert hi - a > a - lo


def test_confidence_coverage():
    """About 68 % of white-noise realisations bracket the true deviation."""
    true = 1 / math.sqrt(4)  # white noise with unit variance, m = 4
    hits = 0
    rng = np.random.default_rng(5)
    for _ in range(400):
        y = rng.standard_normal(256)
        lo, hi = adev_confidence(overlapping_adev(y, 4), 4, 256)
        hits += lo <= true <= hi
    assert 0.6 < hits / 400 < 0.76


def test_confidence_errors():
    with pytest.raises(StabilityError):
        adev_confidence(1.0, 1, 10, confidence=1.0)
    with pytest.raises(StabilityError, match="insufficient data"):
        adev_confidence(1.0, 10, 12)


def test_averaging_factors():
    assert averaging_factors(8) == [1, 2, 3]
    assert averaging_factors(8, include_endpoint=False) == [1, 2]
    assert averaging_factors(1898) == [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 948]
    assert averaging_factors(9, "dense") == [1, 2, 3, 4]
    with pytest.raises(StabilityError):
        averaging_factors(10, "decade")


def test_curve():
    s = StabilitySeries(np.random.default_rng(2).standard_normal(64), 53.1)
    curve = adev_curve(s)
    assert [p.m for p in curve] == [1, 2, 4, 8, 16, 31]
    assert curve[0].tau == 53.1
    assert all(p.lower < p.adev < p.upper for p in curve)
    with pytest.raises(StabilityError, match="at least 8"):
        adev_curve(StabilitySeries(np.ones(7), 1.0))


def test_adev_at_one_hour():
    s = StabilitySeries(np.random.default_rng(3).standard_normal(1898), 53.1)
    p = adev_at(s, 3600.0)
    assert p.m == 68
    assert p.adev == overlapping_adev(s.values, 68)


def test_gaps_rejected_by_default():
    t = np.array([0, 1, 2, 3, 5, 6, 7, 8, 9], float)
    s = StabilitySeries(np.arange(9.0), 1.0, timestamps=t)
    assert s.gaps().tolist() == [3]
    with pytest.raises(StabilityError, match="gaps"):
        adev_curve(s)
    filled = s.regularized(interpolate_gaps=True)
    assert filled.size == 10
    assert filled.values[4] == pytest.approx(3.5)


def test_nan_rejected_by_default():
    s = StabilitySeries(np.array([1.0, 2.0, math.nan, 4.0] * 3), 1.0)
    with pytest.raises(StabilityError, match="missing"):
        adev_curve(s)
    filled = s.regularized(interpolate_gaps=True)
    assert filled.values[2] == pytest.approx(3.0)


def test_series_csv_round_trip():
    text = "timestamp_s,eta_e2e,F\n0,0.05,0.97\n53.1,0.051,0.98\n106.2,0.049,0.975\n"
    s = read_series_csv(io.StringIO(text), column="F")
    assert s.values.tolist() == [0.97, 0.98, 0.975]
    assert s.tau0 == pytest.approx(53.1)
    s = read_series_csv(io.StringIO(text))
    assert s.values.tolist() == [0.05, 0.051, 0.049]
    with pytest.raises(StabilityError):
        read_series_csv(io.StringIO(text), column="nope")
    buf = io.StringIO()
    write_curve_csv(adev_curve(StabilitySeries(np.arange(10.0), 1.0)), buf)
    assert buf.getvalue().splitlines()[0] == "tau_s,adev,ci_low,ci_high"
