"""Seeded synthetic intraday market with an imperfect numerical forecaster.

Randomness comes from numpy's ``Generator`` over the PCG64 bit generator,
seeded with ``SynthConfig.seed``; draws are taken in a fixed order so a seed
pins the whole output.

Per bar j (log-volatility OU, AR(1) returns, jumps signed like the bar's move)::

    h[j+1] = h[j] + kappa * (log(vol_level) - h[j]) + vol_of_vol * z1
    r[j+1] = ar * r[j] + sqrt(1 - ar^2) * exp(h[j+1]) * z2 + J[j+1]
    p[j+1] = p[j] * exp(r[j+1])

The "NMP" column at bar j is the forecaster's view of the next close::

    nmp[j] = (p[j+1] * (1 + bias_prop) + bias_const) * exp(noise * z3)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .data_io import MarketSeries, format_timestamp, write_csv

EPOCH_2010 = 1262584800  # 2010-01-04T06:00:00Z


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    days: int = 250
    bars_per_day: int = 48
    bar_seconds: int = 1800
    start: int = EPOCH_2010
    base_price: float = 100.0
    # stationary per-bar return volatility and its log-OU dynamics
    vol_level: float = 0.002
    vol_mean_reversion: float = 0.02
    vol_of_vol: float = 0.03
    return_ar: float = 0.3
    jumps_per_day: float = 0.2
    jump_scale: float = 0.01
    nmp_bias_const: float = 0.5
    nmp_bias_prop: float = 0.0
    nmp_noise: float = 0.001
    volume_base: float = 1e5
    volume_coupling: float = 0.5
    volume_noise: float = 0.3
    missing_rate: float = 0.0
    # per-bar return limit; moves beyond it are recorded at the limit and flagged
    return_cap: Optional[float] = None

    def __post_init__(self):
        if self.days < 1 or self.bars_per_day < 1:
            raise ValueError("days and bars_per_day must be >= 1")
        positive = ("base_price", "vol_level", "volume_base", "bar_seconds")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        non_negative = ("vol_of_vol", "jumps_per_day", "jump_scale", "nmp_noise",
                        "volume_coupling", "volume_noise", "vol_mean_reversion")
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not -1 < self.return_ar < 1:
            raise ValueError("return_ar must lie in (-1, 1)")
        if not 0 <= self.missing_rate < 0.3:
            raise ValueError("missing_rate must lie in [0, 0.3)")
        if self.return_cap is not None and not self.return_cap > 0:
            raise ValueError("return_cap must be positive")

    @property
    def n_bars(self) -> int:
        return self.days * self.bars_per_day

    def to_dict(self) -> dict:
        return asdict(self)


# jump2019: a shock regime with frequent, large jumps and livelier volatility.
PRESETS = {
    "default": {},
    "jump2019": {"jumps_per_day": 1.0, "jump_scale": 0.03, "vol_of_vol": 0.06},
    "calm": {"jumps_per_day": 0.0, "vol_of_vol": 0.0},
}


@dataclass(frozen=True, eq=False)
class SynthTruth:
    timestamps: np.ndarray
    volatility: np.ndarray
    jumps: np.ndarray
    uncapped_returns: np.ndarray


def generate(config: SynthConfig) -> Tuple[MarketSeries, SynthTruth]:
    """Simulate ``config.n_bars`` bars. Returns the observable series and the latent path."""
    c = config
    rng = np.random.default_rng(c.seed)
    n = c.n_bars
    # one extra bar so the last row's NMP has a target
    m = n + 1
    z_vol = rng.standard_normal(m)
    z_ret = rng.standard_normal(m)
    u_jump = rng.random(m)
    z_jump = rng.standard_normal(m)
    z_nmp = rng.standard_normal(m)
    z_volu = rng.standard_normal(m)
    u_missing = rng.random((m, 6))
    z_feat = rng.standard_normal((m, 3))

    log_level = np.log(c.vol_level)
    h = np.empty(m)
    h[0] = log_level
    for j in range(1, m):
        h[j] = h[j - 1] + c.vol_mean_reversion * (log_level - h[j - 1]) + c.vol_of_vol * z_vol[j]
    sigma = np.exp(h)
    innov = np.sqrt(1.0 - c.return_ar ** 2) * sigma * z_ret
    # at most one jump per bar (thinned Poisson clock); a jump extends the bar's
    # diffusive move, so raising the intensity only ever adds jump bars
    p_jump = 1.0 - np.exp(-c.jumps_per_day / c.bars_per_day)
    jumps = np.where(u_jump < p_jump, c.jump_scale * np.abs(z_jump) * np.sign(innov), 0.0)
    jumps[0] = 0.0
    r = np.empty(m)
    r[0] = 0.0
    for j in range(1, m):
        r[j] = c.return_ar * r[j - 1] + innov[j] + jumps[j]

    recorded = r.copy()
    censor = None
    if c.return_cap is not None:
        recorded = np.clip(r, -c.return_cap, c.return_cap)
        censor = np.where(r > c.return_cap, 1, np.where(r < -c.return_cap, -1, 0))
    price = c.base_price * np.exp(np.cumsum(recorded))

    nmp = (price[1:] * (1.0 + c.nmp_bias_prop) + c.nmp_bias_const) * np.exp(c.nmp_noise * z_nmp[1:])
    volume = c.volume_base * np.exp(c.volume_coupling * np.abs(r) / c.vol_level + c.volume_noise * z_volu
                                    - c.volume_noise ** 2 / 2)

    # slow macro drivers and a news score; none of them drive prices
    interest = 0.07 + np.cumsum(1e-4 * z_feat[:, 0])
    inflation = 0.05 + np.cumsum(5e-5 * z_feat[:, 1])
    news = z_feat[:, 2]

    cols = [price[:n].copy(), volume[:n].copy(), nmp[:n].copy(),
            interest[:n].copy(), inflation[:n].copy(), news[:n].copy()]
    if c.missing_rate > 0:
        for k, col in enumerate(cols):
            col[u_missing[:n, k] < c.missing_rate] = np.nan

    stamps = c.start + c.bar_seconds * np.arange(n, dtype=np.int64)
    series = MarketSeries(
        timestamps=stamps,
        price=cols[0],
        volume=cols[1],
        nmp_price=cols[2],
        features={"interest_rate": cols[3], "inflation": cols[4], "insider_news": cols[5]},
        bar_interval=c.bar_seconds,
        censor=None if censor is None else censor[:n],
    )
    truth = SynthTruth(stamps, sigma[:n], jumps[:n], r[:n])
    return series, truth


def write_truth_csv(truth: SynthTruth, path) -> None:
    with Path(path).open("w") as fh:
        fh.write("timestamp,volatility,jump,return\n")
        for ts, v, jmp, r in zip(truth.timestamps, truth.volatility, truth.jumps, truth.uncapped_returns):
            fh.write(f"{format_timestamp(ts)},{v:.10g},{jmp:.10g},{r:.10g}\n")


def truth_path_for(data_path) -> Path:
    p = Path(data_path)
    return p.with_name(p.stem + "_truth.csv")


def simulate_to_files(config: SynthConfig, out) -> Tuple[MarketSeries, Path, Path]:
    series, truth = generate(config)
    out = Path(out)
    write_csv(series, out)
    tpath = truth_path_for(out)
    write_truth_csv(truth, tpath)
    return series, out, tpath


def with_preset(config: SynthConfig, name: str) -> SynthConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(config, **PRESETS[name])
