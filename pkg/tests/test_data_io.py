import numpy as np
import pytest

from nmpgp.data_io import (
    DataError,
    MarketSeries,
    format_timestamp,
    impute_knn,
    load_csv,
    log_returns,
    parse_timestamp,
    realized_volatility,
    write_csv,
)

HEADER = "timestamp,price,volume,nmp_price,interest_rate,inflation,insider_news\n"


def _write(tmp_path, rows, header=HEADER):
    p = tmp_path / "bars.csv"
    p.write_text(header + "".join(r + "\n" for r in rows))
    return p


def test_roundtrip(tmp_path, small_market):
    series, _ = small_market
    path = tmp_path / "x.csv"
    write_csv(series, path, float_format="{!r}")
    back = load_csv(path)
    assert np.array_equal(back.timestamps, series.timestamps)
    np.testing.assert_array_equal(back.price, series.price)
    np.testing.assert_array_equal(back.features["inflation"], series.features["inflation"])


def test_missing_cells_are_nan(tmp_path):
    p = _write(tmp_path, [
        "2010-01-04T06:00:00Z,100,5,101,0.07,0.05,0.1",
        "2010-01-04T06:30:00Z,,5,101,0.07,0.05,0.1",
        "2010-01-04T07:00:00Z,102,5,103,0.07,0.05,0.1",
    ])
    s = load_csv(p)
    assert np.isnan(s.price[1])
    assert s.missing_fraction == pytest.approx(1 / 18)


def test_non_monotone_timestamps_name_the_line(tmp_path):
    p = _write(tmp_path, [
        "2010-01-04T06:30:00Z,100,5,101,0,0,0",
        "2010-01-04T06:00:00Z,100,5,101,0,0,0",
    ])
    with pytest.raises(DataError, match="line 3"):
        load_csv(p)


def test_malformed_row(tmp_path):
    p = _write(tmp_path, ["2010-01-04T06:00:00Z,100,5"])
    with pytest.raises(DataError, match="line 2"):
        load_csv(p)
    p = _write(tmp_path, ["2010-01-04T06:00:00Z,abc,5,101,0,0,0"])
    with pytest.raises(DataError, match="non-numeric"):
        load_csv(p)


def test_too_many_missing(tmp_path):
    rows = [f"2010-01-04T{6 + i:02d}:00:00Z,,,,,," if i % 2 else f"2010-01-04T{6 + i:02d}:00:00Z,1,1,1,0,0,0"
            for i in range(6)]
    with pytest.raises(DataError, match="missing fraction exceeds threshold"):
        load_csv(_write(tmp_path, rows))


def test_missing_header_column(tmp_path):
    p = _write(tmp_path, ["2010-01-04T06:00:00Z,1,1"], header="timestamp,price,volume\n")
    with pytest.raises(DataError, match="nmp_price"):
        load_csv(p)


def test_censor_column(tmp_path):
    p = _write(tmp_path, [
        "2010-01-04T06:00:00Z,100,5,101,above",
        "2010-01-04T06:30:00Z,100,5,101,none",
        "2010-01-04T07:00:00Z,100,5,101,below",
    ], header="timestamp,price,volume,nmp_price,censor\n")
    assert load_csv(p).censor.tolist() == [1, 0, -1]


def test_timestamp_roundtrip():
    ts = parse_timestamp("2019-06-03T13:30:00Z")
    assert format_timestamp(ts) == "2019-06-03T13:30:00Z"


def test_series_rejects_bad_prices():
    with pytest.raises(ValueError):
        MarketSeries(np.array([0, 1800]), np.array([1.0, -2.0]), np.ones(2), np.ones(2))
    with pytest.raises(ValueError):
        MarketSeries(np.array([1800, 0]), np.ones(2), np.ones(2), np.ones(2))


def test_knn_fills_from_nearest_bars():
    price = np.array([1.0, 2.0, np.nan, 4.0, 100.0])
    s = MarketSeries(np.arange(5) * 1800, price, np.ones(5), np.ones(5))
    out = impute_knn(s, k=2)
    assert out.price[2] == pytest.approx(3.0)
    # ties at equal distance prefer the earlier bar
    out3 = impute_knn(s, k=3)
    assert out3.price[2] == pytest.approx((2.0 + 4.0 + 1.0) / 3)
    assert not np.isnan(out.price).any()
    np.testing.assert_array_equal(out.price[[0, 1, 3, 4]], price[[0, 1, 3, 4]])


def test_log_returns_and_realized_vol():
    p = np.array([100.0, 101.0, 100.0, 102.0])
    r = log_returns(p)
    np.testing.assert_allclose(r, np.log(p[1:] / p[:-1]))
    rv = realized_volatility(r, window=2)
    np.testing.assert_allclose(rv, np.sqrt([(r[0] ** 2 + r[1] ** 2) / 2, (r[1] ** 2 + r[2] ** 2) / 2]))
