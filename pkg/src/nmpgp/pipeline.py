"""Forecasting architectures built from the GP, censored-GP and MLP pieces.

Row ``j`` of a feature frame forecasts the target at bar ``j + 1`` from what
is known at bar ``j``: the latest observed close ``p[j]`` (the *anchor*), the
NMP forecast ``nmp[j]`` of the next close, the bar's volume and exogenous
features, and for short leads the last few observed target values.

Variants
--------
gp_direct
    ARD-selected NMP inputs (NMP-implied log return ``log(nmp/anchor)``,
    log volume, exogenous features) -> censored GP -> target.
gp_cprice
    Stage 1: GP on (NMP price, log volume) for the NMP error
    ``p[j+1] - nmp[j]``; the corrected price is ``nmp + posterior mean``.
    Stage 2: censored GP from (``log(corrected/anchor)``, log volume) to the
    target.
mlp_cprice
    Same two-stage layout with MLPs (11 then 8 hidden units); stage 2 sees
    the corrected price only.
persistence
    Latest observed target value, held over the forecast window.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import gp_core
from .baselines import MlpSpec, mlp_fit, mlp_from_dict, mlp_to_dict
from .censored_gp import (
    CensoredGp,
    CensoredTarget,
    CensorStatus,
    censored_mean,
    ep_fit,
    predict_latent,
)
from .data_io import MarketSeries

log = logging.getLogger(__name__)

VARIANTS = ("persistence", "mlp_cprice", "gp_direct", "gp_cprice")
TARGETS = ("returns", "volatility")
MIN_TRAIN_ROWS = 10
MIN_SPLIT_ROWS = 10
FORMAT_NAME = "nmpgp.FittedPipeline"
FORMAT_VERSION = 1


class PipelineError(RuntimeError):
    pass


class InsufficientDataError(PipelineError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "gp_cprice"
    target: str = "returns"
    ard_threshold: float = 0.1
    high_price_quantile: Optional[float] = None
    s_upper: Optional[float] = None
    horizon_bars: int = 48
    short_horizon_bars: int = 6
    augment: bool = True
    lags: int = 4
    seed: int = 0
    max_train: int = 400
    max_condition: int = 3000
    # smallest lengthscale a forecasting stage may learn, in input standard deviations
    min_lengthscale: float = 0.1
    restarts: int = 3
    train_fraction: float = 0.5
    train_end: Optional[str] = None
    vol_window: int = 48
    knn_k: int = 5
    mlp_hidden1: int = 11
    mlp_hidden2: int = 8
    mlp_max_epochs: int = 2000
    mlp_learning_rate: float = 0.05
    mlp_patience: int = 50

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.horizon_bars < 1:
            raise ValueError("horizon_bars must be >= 1")
        if not 0 <= self.short_horizon_bars <= self.horizon_bars:
            raise ValueError("short_horizon_bars must lie in [0, horizon_bars]")
        if not 0 <= self.ard_threshold < 1:
            raise ValueError("ard_threshold must lie in [0, 1)")
        if self.high_price_quantile is not None and not 0 < self.high_price_quantile < 1:
            raise ValueError("high_price_quantile must lie in (0, 1)")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.lags < 0 or self.max_train < MIN_TRAIN_ROWS or self.vol_window < 1:
            raise ValueError("lags >= 0, max_train >= 10 and vol_window >= 1 required")
        if not 0 < self.min_lengthscale < 1:
            raise ValueError("min_lengthscale must lie in (0, 1)")
        if self.max_condition < self.max_train:
            raise ValueError("max_condition must be >= max_train")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object], base: Optional["PipelineConfig"] = None):
        """Build from string or typed values; keys may use '-', '_' or 'mlp.'."""
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        updates = {}
        for raw_key, raw in values.items():
            key = raw_key.replace("-", "_").replace("mlp.", "mlp_")
            if key not in types:
                raise ValueError(f"unknown config key {raw_key!r}")
            updates[key] = _coerce(raw, getattr(base, key), types[key])
        return replace(base, **updates)


def _coerce(raw, current, annotation: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    optional = "Optional" in str(annotation)
    if optional and text.lower() in ("", "none", "null", "off"):
        return None
    kind = str(annotation).replace("Optional[", "").rstrip("]")
    if kind == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def read_config_file(path) -> Dict[str, str]:
    """Flat ``key = value`` file; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ------------------------------------------------------------------ frames


@dataclass(frozen=True, eq=False)
class Frame:
    """Per-row model inputs and targets for a series (row j -> bar j+1)."""

    price: np.ndarray        # p[j], NaN when not observed
    next_price: np.ndarray   # p[j+1]
    nmp: np.ndarray
    log_volume: np.ndarray
    features: Dict[str, np.ndarray]
    target: np.ndarray       # y at bar j+1 (NaN when undefined)
    observed_target: np.ndarray  # y at bar j (the latest known value)
    lag_matrix: np.ndarray   # [y(j), y(j-1), ...] observed target lags
    rv_last: np.ndarray
    status: np.ndarray       # censor status of the target
    first_valid: int

    @property
    def n(self) -> int:
        return self.price.size


def _target_series(price: np.ndarray, target: str, vol_window: int) -> np.ndarray:
    """Target value at every bar (NaN where it cannot be formed)."""
    n = price.size
    out = np.full(n, np.nan)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.log(price[1:] / price[:-1])
    if target == "returns":
        out[1:] = r
        return out
    sq = np.where(np.isnan(r), np.nan, r * r)
    if r.size >= vol_window:
        win = np.lib.stride_tricks.sliding_window_view(sq, vol_window).mean(axis=1)
        out[vol_window:] = np.sqrt(win)
    return out


def build_frame(series: MarketSeries, config: PipelineConfig) -> Frame:
    n = len(series)
    if n < 2:
        raise InsufficientDataError("need at least two bars")
    y_bar = _target_series(series.price, config.target, config.vol_window)
    rv_bar = _target_series(series.price, "volatility", config.vol_window) \
        if config.target == "returns" else y_bar
    rows = n - 1
    p = max(config.lags, 1)
    lag = np.full((rows, p), np.nan)
    for k in range(p):
        lag[k:, k] = y_bar[: rows - k]
    status = np.zeros(rows, dtype=int)
    if series.censor is not None and config.target == "returns":
        status = series.censor[1:].astype(int)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_volume = np.log(series.volume[:rows])
    first = (config.vol_window if config.target == "volatility" else 1) + config.lags
    if config.target == "returns":
        first = max(first, config.vol_window)  # rv_last must exist
    return Frame(
        price=series.price[:rows].astype(float),
        next_price=series.price[1:].astype(float),
        nmp=series.nmp_price[:rows].astype(float),
        log_volume=log_volume,
        features={k: v[:rows].astype(float) for k, v in series.features.items()},
        target=y_bar[1:],
        observed_target=y_bar[:rows],
        lag_matrix=lag[:, : config.lags] if config.lags else lag[:, :0],
        rv_last=rv_bar[:rows],
        status=status,
        first_valid=min(first, rows),
    )


def _columns(frame: Frame, names: Sequence[str], extra: Mapping[str, np.ndarray], rows) -> np.ndarray:
    cols = []
    for name in names:
        if name in extra:
            cols.append(extra[name][rows])
        elif name == "volume":
            cols.append(frame.log_volume[rows])
        elif name == "rv_last":
            cols.append(frame.rv_last[rows])
        elif name == "nmp_price":
            cols.append(frame.nmp[rows])
        elif name.startswith("lag_"):
            cols.append(frame.lag_matrix[rows, int(name[4:]) - 1])
        elif name in frame.features:
            cols.append(frame.features[name][rows])
        else:
            raise PipelineError(f"unknown input {name!r}")
    return np.column_stack(cols) if cols else np.zeros((np.size(rows), 0))


def lag_names(count: int) -> List[str]:
    return [f"lag_{k}" for k in range(1, count + 1)]


# ------------------------------------------------------------------ stages


@dataclass(frozen=True, eq=False)
class Stage:
    """One fitted regression stage with named inputs."""

    kind: str  # "gp" | "cgp" | "mlp"
    inputs: Tuple[str, ...]
    model: object
    s_upper: Optional[float] = None
    spec: dict = field(default_factory=dict)

    def predict(self, X) -> Tuple[np.ndarray, np.ndarray]:
        """Point forecast and predictive variance."""
        if self.kind == "gp":
            return gp_core.predict(self.model, X)
        if self.kind == "cgp":
            mean, var = predict_latent(self.model, X)
            noise = self.model.hyper.noise_var
            if self.s_upper is not None:
                mean = censored_mean(mean, var, noise, upper=self.s_upper)
            return mean, var + noise
        out = self.model.predict(X)
        return out, np.full(out.shape, float(self.model.history.get("val_var", np.nan)))


def _fit_options(config: PipelineConfig) -> gp_core.FitOptions:
    return gp_core.FitOptions(
        restarts=config.restarts, seed=config.seed,
        log_lengthscale_range=(math.log(config.min_lengthscale), 9.0),
    )


def _subsample(rows: np.ndarray, cap: int) -> np.ndarray:
    if rows.size <= cap:
        return rows
    pick = np.unique(np.round(np.linspace(0, rows.size - 1, cap)).astype(int))
    return rows[pick]


def fit_censored_stage(X, values, status, config: PipelineConfig, s_upper: Optional[float]):
    """Hyperparameters from an exact-only GP fit, then EP with all rows.

    The hyperparameter search sees at most ``config.max_train`` evenly spaced
    exact rows. Targets at or above ``s_upper`` and rows flagged censored in
    the data become censored-above observations at their bound.
    """
    values = np.asarray(values, dtype=float)
    status = np.asarray(status, dtype=int).copy()
    if s_upper is not None:
        status[values >= s_upper] = int(CensorStatus.ABOVE)
        values = np.where(values >= s_upper, s_upper, values)
    exact = status == 0
    if exact.sum() < 2:
        raise PipelineError("fewer than two exact observations for the censored stage")
    idx = _subsample(np.flatnonzero(exact), config.max_train)
    gp = gp_core.fit(X[idx], values[idx], opts=_fit_options(config))
    model, state = ep_fit(X, _targets(values, status), gp.hyper, x_mean=gp.x_mean, x_scale=gp.x_scale)
    if not state.converged:
        log.warning("EP stopped after %d sweeps without converging (max change %.3g)", state.sweeps, state.max_change)
    return model, values, status


def _targets(values: np.ndarray, status: np.ndarray) -> List[CensoredTarget]:
    return [CensoredTarget(float(v), CensorStatus(int(s)), float(v) if s else None) for v, s in zip(values, status)]


def select_inputs_ard(
    candidates: Mapping[str, np.ndarray],
    target,
    threshold: float = 0.1,
    opts: gp_core.FitOptions = gp_core.FitOptions(),
) -> List[Tuple[str, float]]:
    """Fit an ARD GP on every candidate and keep the relevant ones.

    Returns ``(name, relevance)`` pairs with relevance >= threshold * max,
    most relevant first. Never empty.
    """
    names = list(candidates)
    if not names:
        raise ValueError("no candidate inputs")
    y = np.asarray(target, dtype=float)
    if len(names) == 1:
        return [(names[0], 1.0)]
    X = np.column_stack([np.asarray(candidates[k], dtype=float) for k in names])
    model = gp_core.fit(X, y, opts=opts)
    rel = gp_core.ard_relevance(model)
    order = sorted(range(len(names)), key=lambda i: (-rel[i], i))
    keep = [(names[i], float(rel[i])) for i in order if rel[i] >= threshold * rel.max()]
    return keep or [(names[order[0]], float(rel[order[0]]))]


# ------------------------------------------------------------------ pipeline


@dataclass(frozen=True, eq=False)
class RouteModels:
    stage1: Optional[Stage]
    stage2: Optional[Stage]
    stage2_short: Optional[Stage]


@dataclass(frozen=True, eq=False)
class FittedPipeline:
    variant: str
    config: PipelineConfig
    routes: Dict[str, RouteModels]
    threshold: Optional[float]
    selected: Tuple[Tuple[str, float], ...] = ()
    notes: Tuple[str, ...] = ()

    @property
    def stage1(self) -> Optional[Stage]:
        return next(iter(self.routes.values())).stage1

    @property
    def stage2(self) -> Optional[Stage]:
        return next(iter(self.routes.values())).stage2

    @property
    def selected_inputs(self) -> List[str]:
        return [n for n, _ in self.selected]


def high_price_split(data: MarketSeries, quantile: float, min_rows: int = MIN_SPLIT_ROWS):
    """Partition bars at an empirical price quantile.

    Returns ``(normal, high, threshold)``; ``high`` holds bars with
    ``price >= threshold``. When either side would hold fewer than
    ``min_rows`` bars the split is disabled: ``high`` is ``None`` and
    ``normal`` is the whole series.
    """
    if not 0 < quantile < 1:
        raise ValueError("quantile must lie in (0, 1)")
    prices = data.price[~np.isnan(data.price)]
    threshold = float(np.quantile(prices, quantile))
    is_high = data.price >= threshold
    if is_high.sum() < min_rows or (~is_high).sum() < min_rows or np.ptp(prices) == 0:
        log.warning("high-price split disabled: partition sizes %d / %d", (~is_high).sum(), is_high.sum())
        return data, None, threshold
    hi_idx = np.flatnonzero(is_high)
    lo_idx = np.flatnonzero(~is_high)
    return _take(data, lo_idx), _take(data, hi_idx), threshold


def _take(data: MarketSeries, idx: np.ndarray) -> MarketSeries:
    return replace(
        data,
        timestamps=data.timestamps[idx],
        price=data.price[idx],
        volume=data.volume[idx],
        nmp_price=data.nmp_price[idx],
        features={k: v[idx] for k, v in data.features.items()},
        censor=None if data.censor is None else data.censor[idx],
    )


def _train_rows(frame: Frame, train_rows: Optional[int] = None) -> np.ndarray:
    stop = frame.n if train_rows is None else min(train_rows, frame.n)
    rows = np.arange(frame.first_valid, stop)
    ok = np.isfinite(frame.target[rows]) & np.isfinite(frame.price[rows]) & np.isfinite(frame.nmp[rows])
    ok &= np.isfinite(frame.log_volume[rows])
    return rows[ok]


def _direct_candidates(frame: Frame, config: PipelineConfig) -> List[str]:
    names = ["nmp_return", "nmp_price", "volume", *frame.features]
    if config.target == "volatility":
        names.append("rv_last")
    return names


def _base_cprice_inputs(config: PipelineConfig) -> List[str]:
    base = ["corrected_return", "volume"]
    if config.target == "volatility":
        base.append("rv_last")
    return base


def _stage1_inputs(frame: Frame) -> List[str]:
    names = ["nmp_price", "volume"]
    if "exchange_rate" in frame.features:
        names.append("exchange_rate")
    return names


def _nmp_return(frame: Frame, anchor: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(frame.nmp / anchor)


def _fit_route(frame: Frame, rows: np.ndarray, config: PipelineConfig, selected: Sequence[str]) -> RouteModels:
    if rows.size < MIN_TRAIN_ROWS:
        raise InsufficientDataError(f"only {rows.size} usable training rows (need {MIN_TRAIN_ROWS})")
    y = frame.target
    variant = config.variant
    lags = lag_names(config.lags) if config.augment else []
    extra = {"nmp_return": _nmp_return(frame, frame.price)}
    stage1 = None

    if variant in ("gp_cprice", "mlp_cprice"):
        in1 = _stage1_inputs(frame)
        resid = frame.next_price - frame.nmp
        if variant == "gp_cprice":
            sub = _subsample(rows, config.max_train)
            hyp = gp_core.fit(_columns(frame, in1, extra, sub), resid[sub], opts=_fit_options(config))
            cond = _subsample(rows, config.max_condition)
            m1 = gp_core.condition(_columns(frame, in1, extra, cond), resid[cond], hyp.hyper,
                                   x_mean=hyp.x_mean, x_scale=hyp.x_scale)
            m1 = replace(m1, fit_info=hyp.fit_info)
            stage1 = Stage("gp", tuple(in1), m1)
        else:
            spec = _mlp_spec(config, config.mlp_hidden1)
            net = mlp_fit(_columns(frame, in1, extra, rows), resid[rows], spec)
            stage1 = Stage("mlp", tuple(in1), net, spec=asdict(spec))
        corrected, _ = _corrected(frame, stage1, extra)
        with np.errstate(divide="ignore", invalid="ignore"):
            extra["corrected_return"] = np.log(corrected / frame.price)

    if variant == "gp_direct":
        in2 = list(selected)
    elif variant == "gp_cprice":
        in2 = _base_cprice_inputs(config)
    else:
        in2 = ["corrected_return"] + (["rv_last"] if config.target == "volatility" else [])

    def fit_stage(names: List[str]) -> Stage:
        if variant == "mlp_cprice":
            spec = _mlp_spec(config, config.mlp_hidden2)
            X = _columns(frame, names, extra, rows)
            net = mlp_fit(X, y[rows], spec)
            resid2 = net.predict(X[-max(1, int(0.2 * rows.size)):]) - y[rows][-max(1, int(0.2 * rows.size)):]
            net.history["val_var"] = float(np.mean(resid2 ** 2))
            return Stage("mlp", tuple(names), net, spec=asdict(spec))
        cond = _subsample(rows, config.max_condition)
        model, vals, stat = fit_censored_stage(
            _columns(frame, names, extra, cond), y[cond], frame.status[cond], config, config.s_upper
        )
        spec = {"values": vals.tolist(), "status": stat.tolist()}
        return Stage("cgp", tuple(names), model, s_upper=config.s_upper, spec=spec)

    stage2 = fit_stage(in2)
    short = fit_stage(in2 + lags) if (lags and config.short_horizon_bars > 0 and variant != "mlp_cprice") else None
    return RouteModels(stage1, stage2, short)


def _mlp_spec(config: PipelineConfig, hidden: int) -> MlpSpec:
    return MlpSpec(
        hidden=hidden, seed=config.seed, max_epochs=config.mlp_max_epochs,
        learning_rate=config.mlp_learning_rate, patience=config.mlp_patience,
    )


def _corrected(frame: Frame, stage1: Stage, extra) -> Tuple[np.ndarray, np.ndarray]:
    rows = np.arange(frame.n)
    X = _columns(frame, stage1.inputs, extra, rows)
    good = np.all(np.isfinite(X), axis=1)
    mean = np.full(frame.n, np.nan)
    var = np.full(frame.n, np.nan)
    if good.any():
        m, v = stage1.predict(X[good])
        mean[good], var[good] = m, v
    return frame.nmp + mean, var


def fit_pipeline(data: MarketSeries, config: PipelineConfig, train_rows: Optional[int] = None) -> FittedPipeline:
    """Fit ``config.variant`` on ``data`` (rows before ``train_rows`` only)."""
    if config.variant in ("gp_cprice", "mlp_cprice") and np.all(np.isnan(data.nmp_price)):
        raise PipelineError("nmp_price column is missing")
    frame = build_frame(data, config)
    rows = _train_rows(frame, train_rows)
    if config.variant == "persistence":
        return FittedPipeline("persistence", config, {"all": RouteModels(None, None, None)}, None)
    if rows.size < MIN_TRAIN_ROWS:
        raise InsufficientDataError(f"only {rows.size} usable training rows (need {MIN_TRAIN_ROWS})")

    selected: List[Tuple[str, float]] = []
    if config.variant == "gp_direct":
        sub = _subsample(rows, config.max_train)
        extra = {"nmp_return": _nmp_return(frame, frame.price)}
        names = _direct_candidates(frame, config)
        cands = {k: _columns(frame, [k], extra, sub)[:, 0] for k in names}
        selected = select_inputs_ard(cands, frame.target[sub], config.ard_threshold, _fit_options(config))

    threshold = None
    notes: List[str] = []
    routes: Dict[str, RouteModels] = {}
    if config.high_price_quantile is not None:
        threshold = float(np.quantile(frame.price[rows], config.high_price_quantile))
        hi = rows[frame.price[rows] >= threshold]
        lo = rows[frame.price[rows] < threshold]
        if min(hi.size, lo.size) < MIN_SPLIT_ROWS or np.ptp(frame.price[rows]) == 0:
            log.warning("high-price split disabled: partitions of %d and %d rows", lo.size, hi.size)
            notes.append("high-price split disabled")
            threshold = None
        else:
            routes["normal"] = _fit_route(frame, lo, config, [n for n, _ in selected])
            routes["high"] = _fit_route(frame, hi, config, [n for n, _ in selected])
    if not routes:
        routes["all"] = _fit_route(frame, rows, config, [n for n, _ in selected])
    return FittedPipeline(config.variant, config, routes, threshold, tuple(selected), tuple(notes))


def build_gp_direct(data: MarketSeries, config: PipelineConfig, train_rows: Optional[int] = None) -> FittedPipeline:
    return fit_pipeline(data, replace(config, variant="gp_direct"), train_rows)


def build_gp_cprice(data: MarketSeries, config: PipelineConfig, train_rows: Optional[int] = None) -> FittedPipeline:
    return fit_pipeline(data, replace(config, variant="gp_cprice"), train_rows)


def mlp_cprice(data: MarketSeries, config: PipelineConfig, train_rows: Optional[int] = None) -> FittedPipeline:
    if "exchange_rate" not in data.features:
        log.warning("no exchange_rate column; MLP stage 1 uses NMP price and volume only")
    return fit_pipeline(data, replace(config, variant="mlp_cprice"), train_rows)


# ------------------------------------------------------------------ prediction


@dataclass(frozen=True, eq=False)
class ForecastReport:
    """Per-bar forecasts. ``rows`` index the frame, ``lead`` counts 1..horizon."""

    rows: np.ndarray
    lead: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    route: np.ndarray
    floored: int = 0
    timestamps: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.mean.size


def predict_rows(pipeline: FittedPipeline, data: MarketSeries, rows: Sequence[int], lead: Sequence[int]) -> ForecastReport:
    """Forecast the target at bars ``rows + 1`` with the given lead times.

    The anchor for row j is the observed close at j; where that close is
    missing the previous row's corrected (or raw NMP) price stands in.
    Observed target lags are carried forward over missing closes.
    """
    cfg = pipeline.config
    frame = build_frame(data, cfg)
    rows = np.asarray(rows, dtype=int)
    lead = np.asarray(lead, dtype=int)
    m = rows.size
    mean = np.full(m, np.nan)
    var = np.zeros(m)
    route_names = np.array(["all"] * m, dtype=object)

    if pipeline.variant == "persistence":
        # hold the value observed at each window's issue bar
        last = np.nan
        for i, (j, k) in enumerate(zip(rows, lead)):
            if k == 1 or np.isnan(last):
                last = _last_observed(frame.observed_target, j)
            mean[i] = last
        return _finish(pipeline, frame, rows, lead, mean, var, route_names, data)

    if pipeline.threshold is not None:
        is_high = frame.nmp >= pipeline.threshold
        route_of = np.where(is_high, "high", "normal")
    else:
        route_of = np.full(frame.n, "all", dtype=object)

    lag_ffill = _ffill_rows(frame.lag_matrix)
    frame = replace(frame, lag_matrix=lag_ffill, log_volume=_ffill(frame.log_volume),
                    rv_last=_ffill(frame.rv_last), features={k: _ffill(v) for k, v in frame.features.items()})

    for name, models in pipeline.routes.items():
        extra: Dict[str, np.ndarray] = {}
        anchor = frame.price.copy()
        if models.stage1 is not None:
            corrected, _ = _corrected(frame, models.stage1, extra)
            fallback = corrected
        else:
            fallback = frame.nmp
        missing = np.isnan(anchor)
        anchor[1:][missing[1:]] = fallback[:-1][missing[1:]]
        anchor = _ffill(anchor)
        extra["nmp_return"] = _nmp_return(frame, anchor)
        if models.stage1 is not None:
            with np.errstate(divide="ignore", invalid="ignore"):
                extra["corrected_return"] = np.log(corrected / anchor)
        sel = route_of[rows] == name
        use_short = (lead <= cfg.short_horizon_bars) & (models.stage2_short is not None)
        for stage, mask in ((models.stage2, sel & ~use_short), (models.stage2_short, sel & use_short)):
            if stage is None or not mask.any():
                continue
            X = _columns(frame, stage.inputs, extra, rows[mask])
            if not np.all(np.isfinite(X)):
                raise PipelineError("non-finite model inputs; are NMP values present for every forecast bar?")
            mu, v = stage.predict(X)
            mean[mask], var[mask] = mu, v
        route_names[sel] = name
    return _finish(pipeline, frame, rows, lead, mean, var, route_names, data)


def _finish(pipeline, frame, rows, lead, mean, var, route_names, data) -> ForecastReport:
    floored = 0
    if pipeline.config.target == "volatility":
        neg = mean < 0
        floored = int(neg.sum())
        mean = np.where(neg, 0.0, mean)
    stamps = data.timestamps[rows + 1] if rows.size and rows.max() + 1 < len(data) else None
    return ForecastReport(rows, lead, mean, np.sqrt(np.maximum(var, 0.0)), route_names, floored, stamps)


def _last_observed(values: np.ndarray, j: int) -> float:
    k = j
    while k >= 0 and np.isnan(values[k]):
        k -= 1
    return float(values[k]) if k >= 0 else 0.0


def _ffill(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    idx = np.where(np.isnan(x), 0, np.arange(x.size))
    np.maximum.accumulate(idx, out=idx)
    out = x[idx]
    return out


def _ffill_rows(M: np.ndarray) -> np.ndarray:
    if M.shape[1] == 0:
        return M
    bad = np.any(np.isnan(M), axis=1)
    idx = np.where(bad, 0, np.arange(M.shape[0]))
    np.maximum.accumulate(idx, out=idx)
    return M[idx]


def forecast(pipeline: FittedPipeline, latest: MarketSeries, horizon_bars: Optional[int] = None) -> ForecastReport:
    """Forecast the last ``horizon_bars`` bars of ``latest``.

    Bars before them are history (anchors, lags). The forecast bars need NMP
    prices; their observed closes may be missing.
    """
    H = pipeline.config.horizon_bars if horizon_bars is None else int(horizon_bars)
    if H < 1:
        raise ValueError("horizon_bars must be >= 1")
    n = len(latest)
    if n < H + 1:
        raise InsufficientDataError(f"need at least {H + 1} bars for a {H}-bar forecast")
    rows = np.arange(n - H - 1, n - 1)
    if np.any(np.isnan(latest.nmp_price[rows])) and pipeline.variant != "persistence":
        raise PipelineError("NMP inputs absent for part of the requested horizon")
    return predict_rows(pipeline, latest, rows, np.arange(1, H + 1))


# ------------------------------------------------------------------ io


def _stage_to_dict(stage: Optional[Stage]) -> Optional[dict]:
    if stage is None:
        return None
    doc = {"kind": stage.kind, "inputs": list(stage.inputs), "s_upper": stage.s_upper}
    if stage.kind == "gp":
        doc["model"] = gp_core.model_to_dict(stage.model)
    elif stage.kind == "cgp":
        m: CensoredGp = stage.model
        st = m.state
        doc["model"] = {
            "hyper": _hyper_doc(m.hyper),
            "x_mean": m.x_mean.tolist(),
            "x_scale": m.x_scale.tolist(),
            "inputs": m.inputs.tolist(),
            "values": list(stage.spec["values"]),
            "status": list(stage.spec["status"]),
            "damping": st.damping,
        }
    else:
        doc["model"] = mlp_to_dict(stage.model)
        doc["model"]["history"] = {k: v for k, v in stage.model.history.items() if k != "checkpoints"}
        doc["spec"] = stage.spec
    return doc


def _hyper_doc(h: gp_core.GpHyperparams) -> dict:
    return {"log_signal_var": h.log_signal_var, "log_noise_var": h.log_noise_var,
            "log_lengthscales": list(h.log_lengthscales)}


def _stage_from_dict(doc: Optional[dict]) -> Optional[Stage]:
    if doc is None:
        return None
    kind = doc["kind"]
    if kind == "gp":
        model = gp_core.model_from_dict(doc["model"])
        return Stage(kind, tuple(doc["inputs"]), model, doc.get("s_upper"))
    if kind == "cgp":
        d = doc["model"]
        h = d["hyper"]
        hyper = gp_core.GpHyperparams(h["log_signal_var"], h["log_noise_var"], tuple(h["log_lengthscales"]))
        Z = np.array(d["inputs"], dtype=float).reshape(-1, hyper.dim)
        targets = _targets(np.array(d["values"], dtype=float), np.array(d["status"], dtype=int))
        # EP is deterministic, so re-running it on the stored (standardised) rows
        # reproduces the fitted posterior exactly
        model, _ = ep_fit(Z, targets, hyper, damping=d["damping"])
        model = replace(model, x_mean=np.array(d["x_mean"], dtype=float), x_scale=np.array(d["x_scale"], dtype=float))
        spec = {"values": d["values"], "status": d["status"]}
        return Stage(kind, tuple(doc["inputs"]), model, doc.get("s_upper"), spec)
    if kind == "mlp":
        net = mlp_from_dict(doc["model"])
        net.history.update(doc["model"].get("history", {}))
        return Stage(kind, tuple(doc["inputs"]), net, None, doc.get("spec", {}))
    raise ValueError(f"unknown stage kind {kind!r}")


def pipeline_to_dict(pipeline: FittedPipeline) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "variant": pipeline.variant,
        "config": pipeline.config.to_dict(),
        "threshold": pipeline.threshold,
        "selected": [list(p) for p in pipeline.selected],
        "notes": list(pipeline.notes),
        "routes": {
            name: {
                "stage1": _stage_to_dict(r.stage1),
                "stage2": _stage_to_dict(r.stage2),
                "stage2_short": _stage_to_dict(r.stage2_short),
            }
            for name, r in pipeline.routes.items()
        },
    }


def pipeline_from_dict(doc: dict) -> FittedPipeline:
    if doc.get("format") != FORMAT_NAME:
        raise ValueError(f"not a {FORMAT_NAME} document")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported pipeline version {doc.get('version')}")
    config = PipelineConfig(**doc["config"])
    routes = {
        name: RouteModels(_stage_from_dict(r["stage1"]), _stage_from_dict(r["stage2"]),
                          _stage_from_dict(r["stage2_short"]))
        for name, r in doc["routes"].items()
    }
    return FittedPipeline(
        doc["variant"], config, routes, doc["threshold"],
        tuple((n, float(s)) for n, s in doc["selected"]), tuple(doc["notes"]),
    )


def save_pipeline(pipeline: FittedPipeline, path) -> None:
    Path(path).write_text(json.dumps(pipeline_to_dict(pipeline)) + "\n")


def load_pipeline(path) -> FittedPipeline:
    return pipeline_from_dict(json.loads(Path(path).read_text()))
