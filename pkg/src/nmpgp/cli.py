"""Command-line entry point: simulate, fit, forecast, backtest, metrics.

Exit codes: 0 success, 2 usage, 3 data, 4 model.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import metrics
from .backtest import VariantFitError, forecasts_csv, report_json, report_text, run_backtest, split_index
from .data_io import DataError, format_timestamp, impute_knn, load_csv
from .pipeline import (
    VARIANTS,
    PipelineConfig,
    PipelineError,
    fit_pipeline,
    forecast,
    load_pipeline,
    read_config_file,
    save_pipeline,
)
from .synth import PRESETS, SynthConfig, simulate_to_files, with_preset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 2, 3, 4

log = logging.getLogger("nmpgp")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config flags

_CONFIG_FLAGS = [f.name for f in fields(PipelineConfig)]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value config file (flags override it)")
    for name in _CONFIG_FLAGS:
        p.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name, default=None, metavar="V")


def _pipeline_config(args) -> PipelineConfig:
    values: Dict[str, str] = {}
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file {args.config} not found")
        values.update(read_config_file(args.config))
    for name in _CONFIG_FLAGS:
        v = getattr(args, "cfg_" + name)
        if v is not None:
            values[name] = v
    try:
        return PipelineConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _load(path: Path):
    return load_csv(path)


# ------------------------------------------------------------------ commands


def cmd_simulate(args) -> int:
    values = {}
    for f in fields(SynthConfig):
        v = getattr(args, "syn_" + f.name, None)
        if v is not None:
            values[f.name] = v
    try:
        cfg = SynthConfig(**values)
        if args.preset:
            cfg = with_preset(cfg, args.preset)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    series, data_path, truth_path = simulate_to_files(cfg, args.out)
    prices = series.price[~np.isnan(series.price)]
    print(f"wrote {data_path} ({len(series)} bars) and {truth_path}")
    print(f"price range {prices.min():.4f} .. {prices.max():.4f}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _pipeline_config(args)
    data = impute_knn(_load(args.data), k=cfg.knn_k)
    train_rows = split_index(data, cfg) - 1 if cfg.train_end is not None else None
    try:
        fitted = fit_pipeline(data, cfg, train_rows=train_rows)
    except Exception as exc:  # noqa: BLE001
        raise VariantFitError(cfg.variant, exc) from exc
    save_pipeline(fitted, args.out)
    print(f"wrote {args.out} ({fitted.variant}, target {cfg.target})")
    if fitted.selected:
        print("selected inputs: " + ", ".join(f"{n} ({s:.3f})" for n, s in fitted.selected))
    return EXIT_OK


def cmd_forecast(args) -> int:
    try:
        fitted = load_pipeline(args.model)
    except (OSError, ValueError, KeyError) as exc:
        raise PipelineError(f"cannot load model {args.model}: {exc}") from exc
    latest = _load(args.data)
    # only the history is imputed; future closes stay missing
    H = args.horizon_bars or fitted.config.horizon_bars
    if H < 1 or H >= len(latest):
        raise UsageError(f"horizon_bars must lie in [1, {len(latest) - 1}]")
    hist = impute_knn(latest.slice(0, len(latest) - H), k=fitted.config.knn_k)
    full = latest.with_columns(
        price=np.concatenate([hist.price, latest.price[-H:]]),
        volume=np.concatenate([hist.volume, latest.volume[-H:]]),
        nmp_price=np.concatenate([hist.nmp_price, latest.nmp_price[-H:]]),
        features={k: np.concatenate([hist.features[k], v[-H:]]) for k, v in latest.features.items()},
    )
    rep = forecast(fitted, full, H)
    lines = ["timestamp,lead,forecast,std"]
    for i in range(len(rep)):
        lines.append(f"{format_timestamp(full.timestamps[rep.rows[i] + 1])},{rep.lead[i]},{float(rep.mean[i])!r},{float(rep.std[i])!r}")
    text = "\n".join(lines) + "\n"
    _emit(text, args.out)
    if rep.floored:
        print(f"{rep.floored} forecasts floored at 0", file=sys.stderr)
    return EXIT_OK


def cmd_backtest(args) -> int:
    # --target also accepts "both" here
    both = args.cfg_target == "both"
    if both:
        args.cfg_target = None
    cfg = _pipeline_config(args)
    variants = _variants(args.variants)
    targets = ("returns", "volatility") if both else (cfg.target,)
    data = _load(args.data)
    try:
        split_index(data, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    run = run_backtest(data, cfg, variants, targets)
    text = report_json(run) if args.json else report_text(run)
    _emit(text, args.out)
    if args.forecasts:
        Path(args.forecasts).write_text(forecasts_csv(run, data))
    for key, sec in run.timings.items():
        print(f"{key}: {sec:.1f}s", file=sys.stderr)
    return EXIT_OK


def _variants(text: Optional[str]) -> List[str]:
    if not text:
        return list(VARIANTS)
    out = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in out if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variants {bad}; choose from {', '.join(VARIANTS)}")
    return out


def _read_table(path: Path):
    """Columns of a CSV file plus any ``# stated: key=value`` comment values."""
    if not Path(path).exists():
        raise DataError(f"{path}: no such file")
    stated: Dict[str, float] = {}
    body = []
    for line in Path(path).read_text().splitlines():
        s = line.strip()
        if s.startswith("#"):
            if s[1:].strip().startswith("stated:"):
                for item in s.split(":", 1)[1].split(","):
                    k, _, v = item.partition("=")
                    stated[k.strip()] = float(v)
            continue
        if s:
            body.append(line)
    reader = csv.DictReader(body)
    cols: Dict[str, list] = {h: [] for h in reader.fieldnames or []}
    for lineno, rec in enumerate(reader, start=2):
        for k, v in rec.items():
            try:
                cols[k].append(float(v))
            except (TypeError, ValueError):
                raise DataError(f"{path}: row {lineno}: column {k!r} value {v!r} is not numeric") from None
    return {k: np.array(v) for k, v in cols.items()}, stated


def _pick(cols: Dict[str, np.ndarray], name: Optional[str], fallback_index: int, path) -> np.ndarray:
    if name is not None:
        if name not in cols:
            raise DataError(f"{path}: no column {name!r}")
        return cols[name]
    names = [k for k in cols if k not in ("month", "step", "lead", "timestamp", "error")]
    if not names:
        raise DataError(f"{path}: no value column")
    return cols[names[min(fallback_index, len(names) - 1)]]


def cmd_metrics(args) -> int:
    notes = []
    stated: Dict[str, float] = {}
    if args.table:
        cols, stated = _read_table(args.table)
        actual = _pick(cols, args.actual_col, 0, args.table)
        fc = _pick(cols, args.forecast_col, 1, args.table)
        errors_printed = cols.get("error")
    else:
        if not (args.actual and args.forecast):
            raise UsageError("give --table FILE or both --actual FILE and --forecast FILE")
        ca, sa = _read_table(args.actual)
        cf, sf = _read_table(args.forecast)
        stated = {**sa, **sf}
        actual = _pick(ca, args.actual_col, 0, args.actual)
        fc = _pick(cf, args.forecast_col, 0, args.forecast)
        errors_printed = None
    if actual.size != fc.size:
        raise DataError(f"length mismatch: {actual.size} actual vs {fc.size} forecast values")

    recomputed = metrics.evaluate(actual, fc)
    report = recomputed
    if errors_printed is not None and not args.recompute:
        # score the error column as written; the normalizer still comes from the actuals
        report = metrics.evaluate(errors_printed, np.zeros_like(errors_printed),
                                  normalizer=metrics.default_normalizer(actual))
        differ = int(np.sum(~np.isclose(errors_printed, actual - fc, atol=5e-10)))
        if differ:
            notes.append(
                f"note: the error column disagrees with actual - forecast in {differ} row(s); "
                f"recomputed RMSE={recomputed.rmse:.6f} MAE={recomputed.mae:.6f} (use --recompute)"
            )
    for key, value in sorted(stated.items()):
        got = getattr(report, key, None)
        if got is not None and abs(got - value) > 0.5 * 10 ** -_decimals(value):
            notes.append(f"note: the file states {key.upper()}={value}, computed {got:.6f} (diff {got - value:+.6f})")

    if args.json:
        doc = report.summary_dict()
        doc["notes"] = notes
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        sys.stdout.write(metrics.summary_text(report))
        for n in notes:
            print(n)
    return EXIT_OK


def _decimals(x: float) -> int:
    text = repr(float(x))
    return len(text.split(".")[1]) if "." in text and "e" not in text else 6


def _emit(text: str, out: Optional[Path]) -> None:
    if out:
        Path(out).write_text(text)
    sys.stdout.write(text)


def fixture_path(name: str) -> Path:
    """Path of a bundled fixture table."""
    return Path(str(resources.files("nmpgp") / "fixtures" / name))


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # keep argparse's exit code 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nmpgp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="write a synthetic bar file and its latent path")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--preset", choices=sorted(PRESETS))
    for f in fields(SynthConfig):
        kind = {"int": int, "float": float}.get(str(f.type).replace("Optional[", "").rstrip("]"), float)
        s.add_argument("--" + f.name.replace("_", "-"), dest="syn_" + f.name, type=kind, default=None)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit one pipeline variant and save it as JSON")
    f.add_argument("--data", type=Path, required=True)
    f.add_argument("--out", type=Path, required=True)
    _add_config_flags(f)
    f.set_defaults(func=cmd_fit)

    fc = sub.add_parser("forecast", help="forecast the last horizon bars of a file with a saved model")
    fc.add_argument("--model", type=Path, required=True)
    fc.add_argument("--data", type=Path, required=True)
    fc.add_argument("--horizon-bars", type=int, default=None)
    fc.add_argument("--out", type=Path)
    fc.set_defaults(func=cmd_forecast)

    b = sub.add_parser("backtest", help="chronological-split comparison of the variants")
    b.add_argument("--data", type=Path, required=True)
    b.add_argument("--variants", help=f"comma list from {','.join(VARIANTS)} (default all)")
    b.add_argument("--out", type=Path, help="also write the report here")
    b.add_argument("--forecasts", type=Path, help="write per-bar forecasts (CSV) here")
    b.add_argument("--json", action="store_true")
    _add_config_flags(b)
    b.set_defaults(func=cmd_backtest)

    m = sub.add_parser("metrics", help="RMSE / MAE / NMAPE of a forecast against actuals")
    m.add_argument("--table", type=Path, help="one CSV holding both columns")
    m.add_argument("--fixture", choices=("table1", "table2"), help="use a bundled table")
    m.add_argument("--actual", type=Path)
    m.add_argument("--forecast", type=Path)
    m.add_argument("--actual-col")
    m.add_argument("--forecast-col")
    m.add_argument("--recompute", action="store_true", help="ignore an error column, use actual - forecast")
    m.add_argument("--json", action="store_true")
    m.set_defaults(func=cmd_metrics)
    return p


FIXTURES = {"table1": "table1_volatility.csv", "table2": "table2_returns.csv"}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "fixture", None):
        args.table = fixture_path(FIXTURES[args.fixture])
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"nmpgp: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"nmpgp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VariantFitError as exc:
        print(f"nmpgp: model error in variant {exc.variant}: {exc.cause}", file=sys.stderr)
        return EXIT_MODEL
    except PipelineError as exc:
        print(f"nmpgp: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
