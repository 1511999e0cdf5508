import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nmpgp import metrics

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False, allow_subnormal=False)


def test_basic_values():
    e = np.array([3.0, -4.0])
    assert metrics.rmse(e) == pytest.approx(np.sqrt(12.5))
    assert metrics.mae(e) == 3.5
    assert metrics.nmape(e, 7.0) == pytest.approx(50.0)


def test_error_sign_convention():
    np.testing.assert_array_equal(metrics.error_series([1.0, 2.0], [0.5, 3.0]), [0.5, -1.0])


def test_input_validation():
    with pytest.raises(ValueError):
        metrics.error_series([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        metrics.rmse([])
    with pytest.raises(ValueError):
        metrics.nmape([1.0], 0.0)
    with pytest.raises(ValueError):
        metrics.rmse([np.nan])


def test_default_normalizer_is_max_abs_actual():
    assert metrics.default_normalizer([0.2, -0.9, 0.5]) == 0.9


def test_buckets_and_gate():
    actual = np.ones(12)
    fc = actual.copy()
    fc[8:] += 0.5  # errors only at long leads
    rep = metrics.evaluate(actual, fc, lead=np.arange(1, 13), short_horizon_bars=6)
    assert rep.buckets["short"].n == 6 and rep.buckets["short"].rmse == 0
    assert rep.buckets["day"].n == 12
    assert rep.gate_pass
    bad = metrics.evaluate(actual, actual + 0.5)
    assert not bad.gate_pass


def test_identical_series_score_zero():
    rep = metrics.evaluate([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert rep.rmse == rep.mae == rep.nmape == 0.0 and rep.gate_pass


def test_report_outputs():
    rep = metrics.evaluate([0.3, 0.4], [0.25, 0.5], lead=[1, 2])
    text = metrics.summary_text(rep)
    assert "MAE=0.075000 (7.50%)" in text and "PASS" in text or "FAIL" in text
    doc = json.loads(metrics.summary_json(rep))
    assert doc["buckets"]["day"]["n"] == 2
    lines = metrics.report_csv(rep).splitlines()
    assert lines[0] == "step,lead,actual,forecast,error" and len(lines) == 3


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 50), elements=finite))
def test_rmse_dominates_mae(e):
    assert metrics.rmse(e) >= metrics.mae(e) * (1 - 1e-12)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e3, 1e3, allow_subnormal=False)),
       st.floats(0.01, 100), st.floats(0.1, 10))
def test_scaling(e, c, M):
    assert metrics.rmse(c * e) == pytest.approx(c * metrics.rmse(e), rel=1e-12, abs=1e-300)
    assert metrics.mae(c * e) == pytest.approx(c * metrics.mae(e), rel=1e-12, abs=1e-300)
    assert metrics.nmape(c * e, c * M) == pytest.approx(metrics.nmape(e, M), rel=1e-12, abs=1e-300)
