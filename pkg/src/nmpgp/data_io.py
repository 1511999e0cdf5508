"""Bar-data ingestion, KNN gap filling and return/volatility targets.

A :class:`MarketSeries` stores its bars column-wise (numpy arrays, NaN for a
missing cell) so that long intraday histories stay cheap; ``series.bars``
gives the row view as :class:`MarketBar` objects.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence

import numpy as np

MISSING_THRESHOLD = 0.30
DEFAULT_FEATURES = ("interest_rate", "inflation", "insider_news")
DEFAULT_SCHEMA = {
    "timestamp": "timestamp",
    "price": "price",
    "volume": "volume",
    "nmp_price": "nmp_price",
    "features": DEFAULT_FEATURES,
    "censor": "censor",
}
CENSOR_CODES = {"none": 0, "": 0, "above": 1, "below": -1}
CENSOR_NAMES = {0: "none", 1: "above", -1: "below"}


class DataError(ValueError):
    """Raised for malformed or unusable market data."""


@dataclass(frozen=True)
class MarketBar:
    timestamp: datetime
    price: Optional[float]
    volume: Optional[float]
    nmp_price: Optional[float]
    features: Dict[str, Optional[float]] = field(default_factory=dict)


def _opt(v: float) -> Optional[float]:
    return None if np.isnan(v) else float(v)


@dataclass(frozen=True, eq=False)
class MarketSeries:
    """Aligned, timestamped bars.

    ``timestamps`` holds integer seconds since the Unix epoch (UTC).
    ``censor`` is ``None`` when every target is exact, otherwise an int array
    with 0 = exact, 1 = censored above, -1 = censored below.
    """

    timestamps: np.ndarray
    price: np.ndarray
    volume: np.ndarray
    nmp_price: np.ndarray
    features: Dict[str, np.ndarray] = field(default_factory=dict)
    bar_interval: int = 1800
    censor: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.timestamps)
        for name in ("price", "volume", "nmp_price"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name!r} has {len(getattr(self, name))} rows, expected {n}")
        for name, col in self.features.items():
            if len(col) != n:
                raise DataError(f"feature {name!r} has {len(col)} rows, expected {n}")
        if n > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise DataError("timestamps must be strictly increasing")
        for name in ("price", "nmp_price"):
            col = getattr(self, name)
            if np.any(col[~np.isnan(col)] <= 0):
                raise DataError(f"{name} must be strictly positive where present")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def columns(self) -> Dict[str, np.ndarray]:
        cols = {"price": self.price, "volume": self.volume, "nmp_price": self.nmp_price}
        cols.update(self.features)
        return cols

    @property
    def missing_fraction(self) -> float:
        cols = list(self.columns.values())
        total = len(self) * len(cols)
        if total == 0:
            return 0.0
        return sum(int(np.isnan(c).sum()) for c in cols) / total

    @property
    def bars(self) -> List[MarketBar]:
        return list(self.iter_bars())

    def iter_bars(self) -> Iterator[MarketBar]:
        for i, ts in enumerate(self.timestamps):
            yield MarketBar(
                timestamp=datetime.fromtimestamp(int(ts), tz=timezone.utc),
                price=_opt(self.price[i]),
                volume=_opt(self.volume[i]),
                nmp_price=_opt(self.nmp_price[i]),
                features={k: _opt(v[i]) for k, v in self.features.items()},
            )

    def slice(self, start: int, stop: Optional[int] = None) -> "MarketSeries":
        sl = slice(start, stop)
        return replace(
            self,
            timestamps=self.timestamps[sl],
            price=self.price[sl],
            volume=self.volume[sl],
            nmp_price=self.nmp_price[sl],
            features={k: v[sl] for k, v in self.features.items()},
            censor=None if self.censor is None else self.censor[sl],
        )

    def with_columns(self, **cols) -> "MarketSeries":
        return replace(self, **cols)


def parse_timestamp(text: str) -> int:
    """ISO-8601 -> integer UTC epoch seconds. Naive stamps are taken as UTC."""
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(ts: int) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _cell(text: str, line: int, column: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise DataError(f"line {line}: column {column!r} has non-numeric value {text!r}") from None


def load_csv(
    path,
    schema: Optional[Mapping] = None,
    *,
    bar_interval: int = 1800,
    max_missing: float = MISSING_THRESHOLD,
) -> MarketSeries:
    """Load a bar file.

    ``schema`` maps the logical names ``timestamp``, ``price``, ``volume``,
    ``nmp_price`` to header names, ``features`` to a sequence of feature
    header names and ``censor`` to the optional censor-status column.
    Empty cells are kept as missing (NaN). Rows must already be in strictly
    increasing time order; duplicates and reversals are errors.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        required = [schema["timestamp"], schema["price"], schema["volume"], schema["nmp_price"]]
        missing_cols = [c for c in required if c not in header]
        features = [f for f in schema["features"] if f in header]
        if missing_cols:
            raise DataError(f"{path}: header lacks columns {missing_cols}")
        idx = {h: i for i, h in enumerate(header)}
        censor_col = schema.get("censor")
        has_censor = censor_col in idx

        stamps: List[int] = []
        rows: List[List[float]] = []
        censor: List[int] = []
        value_cols = [schema["price"], schema["volume"], schema["nmp_price"], *features]
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"line {line}: expected {len(header)} fields, got {len(rec)}")
            try:
                stamps.append(parse_timestamp(rec[idx[schema["timestamp"]]]))
            except ValueError:
                raise DataError(f"line {line}: bad timestamp {rec[idx[schema['timestamp']]]!r}") from None
            if len(stamps) > 1 and stamps[-1] <= stamps[-2]:
                raise DataError(f"line {line}: timestamps not strictly increasing")
            rows.append([_cell(rec[idx[c]], line, c) for c in value_cols])
            if has_censor:
                code = rec[idx[censor_col]].strip().lower()
                if code not in CENSOR_CODES:
                    raise DataError(f"line {line}: censor value {code!r} not in none|above|below")
                censor.append(CENSOR_CODES[code])

    arr = np.array(rows, dtype=float).reshape(len(rows), len(value_cols))
    series = MarketSeries(
        timestamps=np.array(stamps, dtype=np.int64),
        price=arr[:, 0],
        volume=arr[:, 1],
        nmp_price=arr[:, 2],
        features={f: arr[:, 3 + j] for j, f in enumerate(features)},
        bar_interval=bar_interval,
        censor=np.array(censor, dtype=int) if has_censor else None,
    )
    if series.missing_fraction >= max_missing:
        raise DataError(
            f"{path}: missing fraction exceeds threshold "
            f"({series.missing_fraction:.4f} >= {max_missing:.2f})"
        )
    return series


def write_csv(series: MarketSeries, path, *, float_format: str = "{:.10g}") -> None:
    """Write ``series`` in the default schema (empty string = missing)."""

    def fmt(v: float) -> str:
        return "" if np.isnan(v) else float_format.format(float(v))

    names = list(series.features)
    header = ["timestamp", "price", "volume", "nmp_price", *names]
    if series.censor is not None:
        header.append("censor")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, ts in enumerate(series.timestamps):
            row = [format_timestamp(ts), fmt(series.price[i]), fmt(series.volume[i]), fmt(series.nmp_price[i])]
            row += [fmt(series.features[n][i]) for n in names]
            if series.censor is not None:
                row.append(CENSOR_NAMES[int(series.censor[i])])
            w.writerow(row)


def _knn_fill(col: np.ndarray, k: int, name: str) -> np.ndarray:
    present = np.flatnonzero(~np.isnan(col))
    gaps = np.flatnonzero(np.isnan(col))
    if gaps.size == 0:
        return col
    if present.size < k:
        raise DataError(f"column {name!r}: k={k} exceeds the {present.size} available values")
    out = col.copy()
    for i in gaps:
        # two-pointer walk outward from the gap; ties go to the earlier bar
        right = int(np.searchsorted(present, i))
        left = right - 1
        picked = []
        while len(picked) < k:
            dl = i - present[left] if left >= 0 else np.inf
            dr = present[right] - i if right < present.size else np.inf
            if dl <= dr:
                picked.append(present[left])
                left -= 1
            else:
                picked.append(present[right])
                right += 1
        out[i] = col[picked].mean()
    return out


def impute_knn(series: MarketSeries, k: int = 5) -> MarketSeries:
    """Fill each missing cell with the mean of its ``k`` nearest present values.

    Nearness is distance in bar index within the same column.
    """
    if k < 1:
        raise ValueError("k must be a positive integer")
    return series.with_columns(
        price=_knn_fill(series.price, k, "price"),
        volume=_knn_fill(series.volume, k, "volume"),
        nmp_price=_knn_fill(series.nmp_price, k, "nmp_price"),
        features={n: _knn_fill(c, k, n) for n, c in series.features.items()},
    )


def log_returns(series_or_prices) -> np.ndarray:
    prices = series_or_prices.price if isinstance(series_or_prices, MarketSeries) else series_or_prices
    prices = np.asarray(prices, dtype=float)
    if np.any(np.isnan(prices)):
        raise DataError("log_returns needs every price present; impute first")
    if np.any(prices <= 0):
        raise DataError("log_returns needs strictly positive prices")
    return np.log(prices[1:] / prices[:-1])


def realized_volatility(returns: Sequence[float], window: int = 48) -> np.ndarray:
    """Rolling root-mean-square of ``returns`` over ``window`` bars.

    Element ``j`` covers ``returns[j : j + window]``.
    """
    r = np.asarray(returns, dtype=float)
    if window < 1:
        raise ValueError("window must be positive")
    if window > r.size:
        raise ValueError(f"window {window} exceeds data length {r.size}")
    sq = np.lib.stride_tricks.sliding_window_view(r * r, window)
    return np.sqrt(sq.mean(axis=1))
