"""Chronological-split backtests and comparison tables."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import metrics
from .data_io import MarketSeries, format_timestamp, impute_knn, parse_timestamp
from .pipeline import (
    VARIANTS,
    FittedPipeline,
    ForecastReport,
    PipelineConfig,
    build_frame,
    fit_pipeline,
    predict_rows,
)

log = logging.getLogger(__name__)


class VariantFitError(RuntimeError):
    def __init__(self, variant: str, cause: Exception):
        super().__init__(f"{variant}: {cause}")
        self.variant = variant
        self.cause = cause


def data_fingerprint(series: MarketSeries) -> str:
    """sha256 over the raw column bytes (NaNs included)."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(series.timestamps, dtype="<i8").tobytes())
    for col in (series.price, series.volume, series.nmp_price):
        h.update(np.ascontiguousarray(col, dtype="<f8").tobytes())
    for name in sorted(series.features):
        h.update(name.encode())
        h.update(np.ascontiguousarray(series.features[name], dtype="<f8").tobytes())
    if series.censor is not None:
        h.update(np.ascontiguousarray(series.censor, dtype="<i8").tobytes())
    return h.hexdigest()


def split_index(series: MarketSeries, config: PipelineConfig) -> int:
    """Index of the first test bar."""
    n = len(series)
    if config.train_end is not None:
        cut = parse_timestamp(config.train_end)
        idx = int(np.searchsorted(series.timestamps, cut, side="left"))
    else:
        idx = int(n * config.train_fraction)
    if not 2 <= idx <= n - 1:
        raise ValueError(f"train/test split at bar {idx} leaves an empty side (n={n})")
    return idx


@dataclass(frozen=True, eq=False)
class VariantResult:
    variant: str
    target: str
    report: metrics.EvalReport
    forecast: ForecastReport
    pipeline: FittedPipeline
    seconds: float = 0.0


@dataclass(frozen=True, eq=False)
class BacktestRun:
    config: PipelineConfig
    data_hash: str
    split: int
    n_bars: int
    results: List[VariantResult] = field(default_factory=list)

    def result(self, variant: str, target: Optional[str] = None) -> VariantResult:
        for r in self.results:
            if r.variant == variant and (target is None or r.target == target):
                return r
        raise KeyError(variant)

    @property
    def timings(self) -> Dict[str, float]:
        return {f"{r.variant}/{r.target}": r.seconds for r in self.results}


def run_backtest(
    data: MarketSeries,
    config: PipelineConfig,
    variants: Sequence[str] = VARIANTS,
    targets: Optional[Sequence[str]] = None,
    *,
    impute: bool = True,
) -> BacktestRun:
    """Fit each variant on the training bars and score the held-out bars.

    Test rows are cut into consecutive windows of ``horizon_bars``; the lead
    time of a bar is its position in its window.
    """
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    digest = data_fingerprint(data)
    series = impute_knn(data, k=config.knn_k) if impute else data
    split = split_index(series, config)
    targets = tuple(targets or (config.target,))
    results = []
    for target in targets:
        for variant in variants:
            cfg = replace(config, variant=variant, target=target)
            t0 = time.perf_counter()
            try:
                fitted = fit_pipeline(series, cfg, train_rows=split - 1)
            except Exception as exc:  # noqa: BLE001 - reported with the variant name
                raise VariantFitError(variant, exc) from exc
            frame = build_frame(series, cfg)
            rows = np.arange(split - 1, frame.n)
            rows = rows[np.isfinite(frame.target[rows])]
            lead = (rows - (split - 1)) % cfg.horizon_bars + 1
            fc = predict_rows(fitted, series, rows, lead)
            report = metrics.evaluate(
                frame.target[rows], fc.mean, lead, short_horizon_bars=cfg.short_horizon_bars
            )
            results.append(VariantResult(variant, target, report, fc, fitted, time.perf_counter() - t0))
            log.info("%s/%s fitted and scored in %.1fs", variant, target, results[-1].seconds)
    return BacktestRun(config, digest, split, len(series), results)


# ------------------------------------------------------------------ reports

_BUCKETS = ("short", "day")


def comparison_rows(run: BacktestRun) -> List[dict]:
    rows = []
    for r in run.results:
        for bucket in _BUCKETS:
            b = r.report.buckets[bucket]
            rows.append({
                "target": r.target, "variant": r.variant, "bucket": bucket, "n": b.n,
                "rmse": b.rmse, "mae": b.mae, "nmape": b.nmape,
            })
    return rows


def report_text(run: BacktestRun) -> str:
    """Fixed-width comparison table plus the config snapshot and data hash."""
    short = run.config.short_horizon_bars
    lines = [
        f"data_sha256 {run.data_hash}",
        f"bars {run.n_bars}  train {run.split}  test {run.n_bars - run.split}",
        "config " + json.dumps(run.config.to_dict(), sort_keys=True),
        "",
        f"buckets: short = lead 1..{short} bars, day = all leads",
    ]
    for target in dict.fromkeys(r.target for r in run.results):
        lines.append("")
        lines.append(f"target: {target}")
        lines.append(f"{'model':<12} {'bucket':<6} {'n':>6} {'RMSE':>12} {'MAE':>12} {'NMAPE%':>9}")
        for row in comparison_rows(run):
            if row["target"] != target:
                continue
            lines.append(
                f"{row['variant']:<12} {row['bucket']:<6} {row['n']:>6d} "
                f"{row['rmse']:>12.6g} {row['mae']:>12.6g} {row['nmape']:>9.4f}"
            )
    notes = [f"{r.variant}/{r.target}: {r.forecast.floored} forecasts floored at 0"
             for r in run.results if r.forecast.floored]
    notes += [f"{r.variant}/{r.target}: {note}" for r in run.results for note in r.pipeline.notes]
    if notes:
        lines += ["", *notes]
    return "\n".join(lines) + "\n"


def report_json(run: BacktestRun) -> str:
    doc = {
        "data_sha256": run.data_hash,
        "n_bars": run.n_bars,
        "split": run.split,
        "config": run.config.to_dict(),
        "results": comparison_rows(run),
        "selected_inputs": {
            f"{r.variant}/{r.target}": [[n, s] for n, s in r.pipeline.selected]
            for r in run.results if r.pipeline.selected
        },
        "floored": {f"{r.variant}/{r.target}": r.forecast.floored for r in run.results},
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def forecasts_csv(run: BacktestRun, series: MarketSeries) -> str:
    """Tidy per-bar series for plotting: one row per (variant, target, bar)."""
    out = ["timestamp,target,variant,lead,actual,forecast,std"]
    for r in run.results:
        fc = r.forecast
        for i, row in enumerate(fc.rows):
            out.append(
                f"{format_timestamp(series.timestamps[row + 1])},{r.target},{r.variant},{fc.lead[i]},"
                f"{float(r.report.actual[i])!r},{float(fc.mean[i])!r},{float(fc.std[i])!r}"
            )
    return "\n".join(out) + "\n"
