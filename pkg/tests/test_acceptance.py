"""Acceptance criteria 1-12.

Each check returns ``(passed, detail)``; the pytest wrappers record a one-line
verdict (printed in the terminal summary) and assert. Run this file directly
to print the verdicts without pytest.
"""

import csv
import math
import time

import numpy as np
import pytest

from nmpgp import gp_core, metrics
from nmpgp.backtest import run_backtest, split_index
from nmpgp.censored_gp import CensoredTarget, ep_fit, predict_censored, predict_latent
from nmpgp.cli import fixture_path, main
from nmpgp.gp_core import FitOptions, GpHyperparams
from nmpgp.pipeline import PipelineConfig, _corrected, build_frame, fit_pipeline, select_inputs_ard
from nmpgp.synth import SynthConfig, generate

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # run as a script
    ACCEPTANCE_LINES = []

SEEDS = range(10)


def _column(name, col):
    with open(fixture_path(name)) as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    return np.array([float(r[col]) for r in rows])


# ---------------------------------------------------------------- 1, 2: printed tables


def check_table2_mae():
    err = _column("table2_returns.csv", "error")
    value = metrics.mae(err)
    rep = metrics.evaluate(err, np.zeros_like(err))
    shown = "(3.58%)" in metrics.summary_text(rep)
    return abs(value - 0.035842) <= 1e-6 and shown, f"MAE={value:.6f}, shown as 3.58%: {shown}"


def check_table1_rmse():
    err = _column("table1_volatility.csv", "error")
    value = metrics.rmse(err)
    return abs(value - 0.012107) <= 1e-6, f"RMSE={value:.6f} (table states 0.012168)"


# ---------------------------------------------------------------- 3, 4, 5: GP algebra


def check_lml_gradient():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        n, d = int(rng.integers(3, 16)), int(rng.integers(1, 5))
        X, y = rng.normal(size=(n, d)), rng.normal(size=n)
        theta = np.concatenate([[rng.uniform(-1, 1), rng.uniform(-3, 0)], rng.uniform(-1, 1, size=d)])
        _, g = gp_core.log_marginal_likelihood(X, y, GpHyperparams.from_vector(theta))
        fd = np.empty_like(theta)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = 1e-5
            up, _ = gp_core.log_marginal_likelihood(X, y, GpHyperparams.from_vector(theta + e))
            dn, _ = gp_core.log_marginal_likelihood(X, y, GpHyperparams.from_vector(theta - e))
            fd[i] = (up - dn) / 2e-5
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)))
    return worst < 1e-4, f"worst relative error {worst:.2e} over 20 instances"


def check_noiseless_interpolation():
    rng = np.random.default_rng(7)
    X = rng.uniform(-2, 2, size=(12, 2))
    y = np.sin(X[:, 0]) + X[:, 1] ** 2
    model = gp_core.condition(X, y, GpHyperparams.from_natural(1.5, 0.0, [0.9, 1.2]))
    mean, _ = gp_core.predict(model, X, include_noise=False)
    err = float(np.max(np.abs(mean - y)))
    return err <= 1e-8, f"max |mean - y| = {err:.2e} (jitter {model.jitter_used:g})"


def check_ep_reduction():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(10):
        n, d = int(rng.integers(4, 20)), int(rng.integers(1, 4))
        X, y = rng.normal(size=(n, d)), rng.normal(size=n)
        h = GpHyperparams.from_natural(rng.uniform(0.5, 2), rng.uniform(0.01, 0.5), rng.uniform(0.5, 2, size=d))
        model, _ = ep_fit(X, [CensoredTarget.exact(v) for v in y], h)
        ref = gp_core.condition(X, y, h)
        Xs = np.vstack([X, rng.normal(size=(5, d))])
        m1, v1 = predict_latent(model, Xs)
        m2, v2 = gp_core.predict(ref, Xs, include_noise=False)
        worst = max(worst, float(np.max(np.abs(m1 - m2))), float(np.max(np.abs(v1 - v2))))
    return worst <= 1e-6, f"largest elementwise gap {worst:.2e}"


# ---------------------------------------------------------------- 6: EP vs Monte Carlo


def _se(a, b, sf2, ell):
    return sf2 * np.exp(-0.5 * ((np.asarray(a)[:, None] - np.asarray(b)[None, :]) / ell) ** 2)


def _mc_tobit(x, exact, cens, x_star, bound, m0, sf2, ell, sn2, n, rng):
    """Rejection sampler for the latent posterior of a 1-D Tobit GP with prior mean ``m0``.

    ``exact`` maps index -> observed value (conditioned on analytically);
    ``cens`` maps index -> (bound, +1 above / -1 below), enforced by rejection.
    Returns the posterior latent mean at ``x`` and P(y* >= bound) at ``x_star``.
    """
    x = np.asarray(x, float)
    K = _se(x, x, sf2, ell)
    mean, cov = np.full(x.size, m0), K.copy()
    if exact:
        e = np.array(sorted(exact))
        S = K[np.ix_(e, e)] + sn2 * np.eye(e.size)
        G = np.linalg.solve(S, K[e]).T
        mean = m0 + G @ (np.array([exact[i] for i in e]) - m0)
        cov = K - G @ K[e]
    L = np.linalg.cholesky(cov + 1e-12 * np.eye(x.size))
    f = mean + rng.standard_normal((n, x.size)) @ L.T
    keep = np.ones(n, bool)
    for i, (b, side) in cens.items():
        y = f[:, i] + math.sqrt(sn2) * rng.standard_normal(n)
        keep &= (y >= b) if side > 0 else (y <= b)
    f = f[keep]
    # f* | f from the prior
    ks = _se(x, [x_star], sf2, ell)[:, 0]
    w = np.linalg.solve(K + 1e-12 * np.eye(x.size), ks)
    s2 = sf2 - ks @ w
    fs = m0 + (f - m0) @ w + math.sqrt(max(s2, 0.0)) * rng.standard_normal(f.shape[0])
    ys = fs + math.sqrt(sn2) * rng.standard_normal(f.shape[0])
    return f.mean(axis=0), float(np.mean(ys >= bound)), int(keep.sum())


def check_ep_monte_carlo():
    rng = np.random.default_rng(99)
    sf2, ell, sn2 = 1.0, 0.6, 0.1
    problems = [
        ([0.0], {}, {0: (0.5, 1)}),
        ([0.0, 0.7], {0: 0.2}, {1: (1.0, 1)}),
        # constraints must be jointly plausible or too few draws survive rejection
        ([-0.4, 0.2, 0.9], {}, {0: (0.0, -1), 1: (0.5, 1), 2: (0.2, 1)}),
    ]
    worst_m = worst_p = 0.0
    fewest = None
    for x, exact, cens in problems:
        targets = []
        for i in range(len(x)):
            if i in exact:
                targets.append(CensoredTarget.exact(exact[i]))
            else:
                b, side = cens[i]
                targets.append(CensoredTarget.above(b) if side > 0 else CensoredTarget.below(b))
        x_star, bound = 0.3, 0.6
        h = GpHyperparams.from_natural(sf2, sn2, [ell])
        model, state = ep_fit(np.array(x)[:, None], targets, h)
        m_ep = model.latent_mean
        _, _, p_ep = predict_censored(model, np.array([[x_star]]), bound=bound)
        # both models use the same constant prior mean; the oracle reads it off the fit
        m_mc, p_mc, kept = _mc_tobit(x, exact, cens, x_star, bound, model.center, sf2, ell, sn2, 1_000_000, rng)
        worst_m = max(worst_m, float(np.max(np.abs(m_ep - m_mc))))
        worst_p = max(worst_p, abs(float(p_ep[0]) - p_mc))
        fewest = kept if fewest is None else min(fewest, kept)
    ok = worst_m <= 0.01 and worst_p <= 0.02
    return ok, f"max mean gap {worst_m:.4f} (tol 0.01), max exceedance gap {worst_p:.4f} (tol 0.02), >= {fewest} accepted draws"


# ---------------------------------------------------------------- 7: ARD


def check_ard_selection():
    hits = 0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(150, 5))
        y = np.sin(1.5 * X[:, 1]) + 0.8 * X[:, 3] + 0.1 * rng.normal(size=150)
        cands = {f"x{i}": X[:, i] for i in range(5)}
        chosen = select_inputs_ard(cands, y, 0.1, FitOptions(seed=seed))
        hits += {n for n, _ in chosen} == {"x1", "x3"}
    return hits >= 8, f"exact pair selected in {hits}/10 seeds (need 8)"


# ---------------------------------------------------------------- 8, 9, 10: synthetic benchmarks


def check_model_ordering():
    wins, lines = 0, []
    for seed in SEEDS:
        data, _ = generate(SynthConfig(seed=seed))
        run = run_backtest(data, PipelineConfig(seed=seed))
        r = {x.variant: x.report for x in run.results}
        ok = all(
            getattr(r["gp_cprice"], m) < getattr(r["gp_direct"], m) < getattr(r["mlp_cprice"], m)
            and getattr(r["gp_cprice"], m) < getattr(r["persistence"], m)
            for m in ("rmse", "mae")
        )
        wins += ok
        lines.append(f"seed {seed}: " + " ".join(f"{k}={r[k].rmse:.3e}" for k in r) + (" ok" if ok else ""))
    print("\n".join(lines))
    return wins >= 7, f"ordering held in {wins}/10 seeds (need 7)"


def check_bias_removal():
    good, worst = 0, 1.0
    for seed in SEEDS:
        data, _ = generate(SynthConfig(seed=seed, days=60, nmp_bias_const=2.0))
        cfg = PipelineConfig(seed=seed, variant="gp_cprice", augment=False)
        split = split_index(data, cfg)
        fitted = fit_pipeline(data, cfg, train_rows=split - 1)
        frame = build_frame(data, cfg)
        corrected, _ = _corrected(frame, fitted.stage1, {})
        rows = np.arange(split - 1, frame.n)
        raw = np.mean(frame.nmp[rows] - frame.next_price[rows])
        left = np.mean(corrected[rows] - frame.next_price[rows])
        removed = 1.0 - abs(left) / abs(raw)
        worst = min(worst, removed)
        good += removed >= 0.9
    return good >= 6, f">= 90% of the bias removed in {good}/10 seeds (worst {worst:.3f})"


def check_short_horizon_augmentation():
    wins = 0
    for seed in SEEDS:
        data, _ = generate(SynthConfig(seed=seed, days=60, return_ar=0.5))
        short = []
        for augment in (True, False):
            run = run_backtest(data, PipelineConfig(seed=seed, augment=augment), variants=["gp_cprice"])
            short.append(run.results[0].report.buckets["short"].rmse)
        wins += short[0] < short[1]
    return wins >= 7, f"augmented 1-3h RMSE lower in {wins}/10 seeds (need 7)"


# ---------------------------------------------------------------- 11, 12


def check_metric_properties():
    rng = np.random.default_rng(5)
    ok, worst = True, 0.0
    for _ in range(1000):
        e = rng.normal(size=int(rng.integers(1, 60))) * rng.uniform(1e-3, 1e3)
        c, M = rng.uniform(0.01, 100), rng.uniform(0.1, 10)
        ok &= metrics.rmse(e) >= metrics.mae(e)
        gaps = [
            abs(metrics.rmse(c * e) / (c * metrics.rmse(e)) - 1),
            abs(metrics.mae(c * e) / (c * metrics.mae(e)) - 1),
            abs(metrics.nmape(c * e, c * M) / metrics.nmape(e, M) - 1),
            abs(metrics.rmse(-e) / metrics.rmse(e) - 1),
        ]
        worst = max(worst, *gaps)
    return bool(ok) and worst <= 1e-12, f"rmse >= mae on 1000 vectors: {bool(ok)}; worst scaling gap {worst:.1e}"


def check_backtest_determinism(tmp_path):
    data = tmp_path / "bench.csv"
    main(["simulate", "--seed", "5", "--days", "30", "--out", str(data)])
    outputs = []
    for k in range(2):
        text, js, fc = tmp_path / f"r{k}.txt", tmp_path / f"r{k}.json", tmp_path / f"f{k}.csv"
        assert main(["backtest", "--data", str(data), "--seed", "5", "--out", str(text), "--forecasts", str(fc)]) == 0
        assert main(["backtest", "--data", str(data), "--seed", "5", "--json", "--out", str(js)]) == 0
        outputs.append((text.read_bytes(), js.read_bytes(), fc.read_bytes()))
    same = outputs[0] == outputs[1]
    return same, f"text, JSON and forecast files byte-identical across reruns: {same}"


# ---------------------------------------------------------------- runner

CRITERIA = {
    1: ("returns-table MAE golden value", check_table2_mae, 1),
    2: ("volatility-table RMSE golden value", check_table1_rmse, 1),
    3: ("LML gradient vs finite differences", check_lml_gradient, 10),
    4: ("noiseless interpolation", check_noiseless_interpolation, 1),
    5: ("EP reduces to the exact GP", check_ep_reduction, 5),
    6: ("EP vs rejection-sampling oracle", check_ep_monte_carlo, 60),
    7: ("ARD picks the two live inputs", check_ard_selection, 120),
    8: ("model ordering on the synthetic benchmark", check_model_ordering, 600),
    9: ("stage-1 bias removal", check_bias_removal, 120),
    10: ("short-horizon augmentation", check_short_horizon_augmentation, 300),
    11: ("metric properties", check_metric_properties, 1),
    12: ("backtest determinism", check_backtest_determinism, None),
}


def _run(number, *args):
    title, fn, budget = CRITERIA[number]
    t0 = time.perf_counter()
    ok, detail = fn(*args)
    secs = time.perf_counter() - t0
    in_time = budget is None or secs < budget
    verdict = "PASS" if ok and in_time else "FAIL"
    limit = f" (limit {budget}s)" if budget else ""
    line = f"criterion {number}: {verdict} {title}: {detail}; {secs:.1f}s{limit}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok and in_time, line


@pytest.mark.parametrize("number", [n for n in CRITERIA if n != 12])
def test_criterion(number):
    ok, line = _run(number)
    assert ok, line


def test_criterion_12(tmp_path):
    ok, line = _run(12, tmp_path)
    assert ok, line


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    for n in CRITERIA:
        if n == 12:
            with tempfile.TemporaryDirectory() as d:
                _run(n, Path(d))
        else:
            _run(n)
