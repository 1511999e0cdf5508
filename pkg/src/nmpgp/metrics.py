"""Forecast error measures and evaluation reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

ACCURACY_GATE_PCT = 10.0


def _vec(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains missing or non-finite values")
    return arr


def error_series(actual, forecast) -> np.ndarray:
    """e_t = y_t - yhat_t."""
    a = _vec(actual, "actual")
    f = _vec(forecast, "forecast")
    if a.shape != f.shape:
        raise ValueError(f"length mismatch: {a.size} actual vs {f.size} forecast values")
    return a - f


def rmse(errors) -> float:
    e = np.abs(_vec(errors, "errors"))
    # scale first so tiny or huge errors neither underflow nor overflow when squared
    top = float(e.max())
    if top == 0.0:
        return 0.0
    return top * float(np.sqrt(np.mean((e / top) ** 2)))


def mae(errors) -> float:
    return float(np.mean(np.abs(_vec(errors, "errors"))))


def nmape(errors, normalizer: float) -> float:
    """Mean absolute error over a fixed normaliser, in percent."""
    if not normalizer > 0:
        raise ValueError("normalizer must be positive")
    return float(np.mean(np.abs(_vec(errors, "errors"))) / normalizer * 100.0)


def default_normalizer(actual) -> float:
    """Largest |actual| in the evaluation window (capacity-style scaling)."""
    m = float(np.max(np.abs(_vec(actual, "actual"))))
    return m if m > 0 else 1.0


@dataclass(frozen=True)
class BucketScores:
    n: int
    rmse: float
    mae: float
    nmape: float

    def as_dict(self) -> dict:
        return {"n": self.n, "rmse": self.rmse, "mae": self.mae, "nmape": self.nmape}


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Per-step errors with summary scores per horizon bucket.

    Buckets are ``"short"`` (lead <= short_horizon_bars) and ``"day"`` (all
    steps). ``normalizer_used`` is shared by every bucket.
    """

    actual: np.ndarray
    forecast: np.ndarray
    errors: np.ndarray
    lead: np.ndarray
    normalizer_used: float
    buckets: Dict[str, BucketScores]
    short_horizon_bars: int = 6

    @property
    def rmse(self) -> float:
        return self.buckets["day"].rmse

    @property
    def mae(self) -> float:
        return self.buckets["day"].mae

    @property
    def nmape(self) -> float:
        return self.buckets["day"].nmape

    @property
    def gate_pass(self) -> bool:
        b = self.buckets.get("short") or self.buckets["day"]
        return b.nmape <= ACCURACY_GATE_PCT

    def summary_dict(self) -> dict:
        return {
            "normalizer": self.normalizer_used,
            "buckets": {k: v.as_dict() for k, v in self.buckets.items()},
            "gate_pct": ACCURACY_GATE_PCT,
            "gate": "PASS" if self.gate_pass else "FAIL",
        }


def evaluate(
    actual,
    forecast,
    lead: Optional[Sequence[int]] = None,
    *,
    short_horizon_bars: int = 6,
    normalizer: Optional[float] = None,
) -> EvalReport:
    a = _vec(actual, "actual")
    f = _vec(forecast, "forecast")
    e = error_series(a, f)
    lead_arr = np.ones(a.size, dtype=int) if lead is None else np.asarray(lead, dtype=int)
    if lead_arr.shape != a.shape:
        raise ValueError("lead must match the number of forecasts")
    M = default_normalizer(a) if normalizer is None else float(normalizer)

    def scores(mask) -> BucketScores:
        ee = e[mask]
        if ee.size == 0:
            return BucketScores(0, float("nan"), float("nan"), float("nan"))
        return BucketScores(int(ee.size), rmse(ee), mae(ee), nmape(ee, M))

    buckets = {"short": scores(lead_arr <= short_horizon_bars), "day": scores(np.ones(a.size, bool))}
    return EvalReport(a, f, e, lead_arr, M, buckets, short_horizon_bars)


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "lead", "actual", "forecast", "error"])
    for i in range(report.errors.size):
        w.writerow([i, int(report.lead[i]), repr(float(report.actual[i])),
                    repr(float(report.forecast[i])), repr(float(report.errors[i]))])
    return buf.getvalue()


def summary_text(report: EvalReport, title: str = "") -> str:
    lines = [title] if title else []
    for name, b in report.buckets.items():
        if b.n == 0:
            continue
        lines.append(
            f"{name:>5}: n={b.n} RMSE={b.rmse:.6f} MAE={b.mae:.6f} ({b.mae * 100:.2f}%) "
            f"NMAPE={b.nmape:.2f}%"
        )
    lines.append(f"normalizer M={report.normalizer_used:.6g}")
    lines.append(f"accuracy gate (NMAPE <= {ACCURACY_GATE_PCT:.0f}%): {'PASS' if report.gate_pass else 'FAIL'}")
    return "\n".join(lines) + "\n"


def summary_json(report: EvalReport) -> str:
    return json.dumps(report.summary_dict(), indent=2, sort_keys=True) + "\n"
