"""Exact GP regression with a squared-exponential ARD kernel.

Hyperparameters live in log space: ``log_signal_var`` (ln sf2),
``log_noise_var`` (ln sn2) and one ``log_lengthscales`` entry per input
column. Gradients of the log marginal likelihood are taken with respect to
the flat vector ``[log_signal_var, log_noise_var, *log_lengthscales]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize

LOG_2PI = math.log(2.0 * math.pi)
FORMAT_NAME = "nmpgp.TrainedGp"
FORMAT_VERSION = 1

JITTER_START = 1e-10
JITTER_GROWTH = 10.0
JITTER_TRIES = 6


class GpError(RuntimeError):
    """Fit or factorisation failure."""


@dataclass(frozen=True)
class GpHyperparams:
    log_signal_var: float
    log_noise_var: float
    log_lengthscales: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "log_lengthscales", tuple(float(v) for v in np.ravel(self.log_lengthscales)))
        object.__setattr__(self, "log_signal_var", float(self.log_signal_var))
        object.__setattr__(self, "log_noise_var", float(self.log_noise_var))

    @property
    def signal_var(self) -> float:
        return math.exp(self.log_signal_var)

    @property
    def noise_var(self) -> float:
        return math.exp(self.log_noise_var)

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(np.array(self.log_lengthscales))

    @property
    def dim(self) -> int:
        return len(self.log_lengthscales)

    def to_vector(self) -> np.ndarray:
        return np.array([self.log_signal_var, self.log_noise_var, *self.log_lengthscales])

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "GpHyperparams":
        v = np.asarray(v, dtype=float)
        return cls(v[0], v[1], tuple(v[2:]))

    @classmethod
    def from_natural(cls, signal_var: float, noise_var: float, lengthscales) -> "GpHyperparams":
        """Build from variances and lengthscales (not logs). ``noise_var`` may be 0."""
        log_noise = math.log(noise_var) if noise_var > 0 else -math.inf
        return cls(math.log(signal_var), log_noise, tuple(np.log(np.atleast_1d(lengthscales))))


def _check_dim(x: np.ndarray, hyper: GpHyperparams) -> None:
    if x.shape[-1] != hyper.dim:
        raise ValueError(f"input has {x.shape[-1]} columns but hyperparameters carry {hyper.dim} lengthscales")


def kernel_ard(x1, x2, hyper: GpHyperparams) -> float:
    """sf2 * exp(-0.5 * sum(((x1 - x2) / l)^2)) for two single points."""
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x1.shape != x2.shape:
        raise ValueError(f"dimension mismatch: {x1.shape} vs {x2.shape}")
    _check_dim(x1, hyper)
    z = (x1 - x2) / hyper.lengthscales
    return hyper.signal_var * math.exp(-0.5 * float(z @ z))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def kernel_matrix(X1: np.ndarray, X2: np.ndarray, hyper: GpHyperparams) -> np.ndarray:
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    _check_dim(X1, hyper)
    _check_dim(X2, hyper)
    ell = hyper.lengthscales
    return hyper.signal_var * np.exp(-0.5 * _sq_dists(X1 / ell, X2 / ell))


def stable_cholesky(A: np.ndarray) -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A``, adding diagonal jitter on failure.

    Jitter starts at 1e-10 * trace(A)/n and grows tenfold, six times at most.
    Returns ``(L, jitter_used)``.
    """
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    try:
        return linalg.cholesky(A, lower=True, check_finite=True), 0.0
    except (linalg.LinAlgError, ValueError):
        pass
    base = JITTER_START * max(float(np.trace(A)) / n, np.finfo(float).tiny)
    jitter = base
    for _ in range(JITTER_TRIES):
        try:
            return linalg.cholesky(A + jitter * np.eye(n), lower=True, check_finite=True), jitter
        except (linalg.LinAlgError, ValueError):
            jitter *= JITTER_GROWTH
    raise GpError(f"kernel matrix not positive definite after jitter {jitter / JITTER_GROWTH:.3g}")


def log_marginal_likelihood(X, y, hyper: GpHyperparams) -> Tuple[float, np.ndarray]:
    """Log evidence of ``y`` under the zero-mean GP and its gradient.

    The gradient is with respect to ``hyper.to_vector()``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    if n < 1 or X.shape[0] != n:
        raise ValueError("X and y must have the same, non-zero number of rows")
    _check_dim(X, hyper)
    Kf = kernel_matrix(X, X, hyper)
    L, _ = stable_cholesky(Kf + hyper.noise_var * np.eye(n))
    alpha = linalg.cho_solve((L, True), y)
    value = -0.5 * float(y @ alpha) - float(np.log(np.diag(L)).sum()) - 0.5 * n * LOG_2PI

    # d/dtheta = 0.5 * tr((alpha alpha^T - K^-1) dK/dtheta)
    W = np.outer(alpha, alpha) - linalg.cho_solve((L, True), np.eye(n))
    grad = np.empty(2 + hyper.dim)
    WK = W * Kf
    grad[0] = 0.5 * WK.sum()
    grad[1] = 0.5 * hyper.noise_var * np.trace(W)
    ell = hyper.lengthscales
    for d in range(hyper.dim):
        diff = (X[:, d, None] - X[None, :, d]) / ell[d]
        grad[2 + d] = 0.5 * float((WK * diff * diff).sum())
    return value, grad


@dataclass(frozen=True)
class FitOptions:
    restarts: int = 5
    seed: int = 0
    tol: float = 1e-5
    max_iter: int = 300
    standardize: bool = True
    # log-lengthscale box relative to each column's log std
    log_lengthscale_range: Tuple[float, float] = (-7.0, 9.0)


@dataclass(frozen=True, eq=False)
class TrainedGp:
    """Immutable conditioned GP.

    ``inputs`` are stored in the model's own (standardised) coordinates;
    ``x_mean`` / ``x_scale`` map raw inputs there. ``targets`` are centred,
    ``center`` is added back at prediction time.
    """

    inputs: np.ndarray
    targets: np.ndarray
    center: float
    hyper: GpHyperparams
    chol: np.ndarray
    alpha: np.ndarray
    jitter_used: float
    x_mean: np.ndarray
    x_scale: np.ndarray
    log_likelihood: float = float("nan")
    fit_info: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, self.dim) if X.size else np.zeros((0, self.dim))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} input columns, got {X.shape[1]}")
        return (X - self.x_mean) / self.x_scale


def condition(
    X,
    y,
    hyper: GpHyperparams,
    *,
    standardize: bool = False,
    center: bool = True,
    x_mean: Optional[np.ndarray] = None,
    x_scale: Optional[np.ndarray] = None,
) -> TrainedGp:
    """Condition the GP on ``(X, y)`` with fixed hyperparameters."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ValueError("X and y row counts differ")
    _check_dim(X, hyper)
    if x_mean is None:
        if standardize:
            x_mean, x_scale = standardization(X)
        else:
            x_mean, x_scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    Z = (X - x_mean) / x_scale
    c = float(y.mean()) if (center and y.size) else 0.0
    yc = y - c
    n = y.size
    L, jitter = stable_cholesky(kernel_matrix(Z, Z, hyper) + hyper.noise_var * np.eye(n))
    alpha = linalg.cho_solve((L, True), yc) if n else np.zeros(0)
    lml = -0.5 * float(yc @ alpha) - float(np.log(np.diag(L)).sum()) - 0.5 * n * LOG_2PI
    return TrainedGp(Z, yc, c, hyper, L, alpha, jitter, np.asarray(x_mean, float), np.asarray(x_scale, float), lml)


def standardization(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


def default_init(X: np.ndarray, y: np.ndarray) -> GpHyperparams:
    """Lengthscales = column std, sf2 = var(y), sn2 = 0.1 var(y)."""
    var = _target_var(y)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return GpHyperparams(math.log(var), math.log(0.1 * var), tuple(np.log(sd)))


def _target_var(y: np.ndarray) -> float:
    var = float(np.var(y))
    floor = 1e-12 * max(1.0, float(np.mean(y)) ** 2)
    return max(var, floor)


def _bounds(X: np.ndarray, y: np.ndarray, opts: FitOptions):
    var = _target_var(y)
    lo, hi = opts.log_lengthscale_range
    sd = X.std(axis=0)
    sd = np.log(np.where(sd > 0, sd, 1.0))
    lv = math.log(var)
    return [(lv - 14.0, lv + 9.0), (lv - 28.0, lv + 2.5)] + [(s + lo, s + hi) for s in sd]


def fit(X, y, init: Optional[GpHyperparams] = None, opts: FitOptions = FitOptions()) -> TrainedGp:
    """Maximise the log marginal likelihood by L-BFGS-B with restarts.

    Restart 0 starts from ``init`` (default: :func:`default_init` in the
    model's coordinates); the others perturb it with unit-normal noise in log
    space drawn from ``opts.seed``. The best final value wins, the earliest
    restart on ties.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if y.size < 2:
        raise ValueError("fit needs at least two observations")
    if X.shape[0] != y.size:
        raise ValueError("X and y row counts differ")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("fit inputs contain missing or non-finite values")
    if opts.standardize:
        x_mean, x_scale = standardization(X)
    else:
        x_mean, x_scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    Z = (X - x_mean) / x_scale
    yc = y - y.mean()
    if init is None:
        init = default_init(Z, yc)
    elif init.dim != X.shape[1]:
        raise ValueError("init lengthscale count does not match input columns")
    bounds = _bounds(Z, yc, opts)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def objective(theta):
        try:
            v, g = log_marginal_likelihood(Z, yc, GpHyperparams.from_vector(theta))
        except GpError:
            return 1e25, np.zeros_like(theta)
        if not np.isfinite(v):
            return 1e25, np.zeros_like(theta)
        return -v, -g

    rng = np.random.default_rng(opts.seed)
    theta0 = np.clip(init.to_vector(), lo, hi)
    best = None
    runs = []
    for r in range(max(1, opts.restarts)):
        start = theta0 if r == 0 else np.clip(theta0 + rng.standard_normal(theta0.size), lo, hi)
        res = optimize.minimize(
            objective, start, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": opts.max_iter, "gtol": opts.tol},
        )
        value = -float(res.fun)
        runs.append(value)
        if np.isfinite(value) and value > -1e24 and (best is None or value > best[0]):
            best = (value, res.x, r, res)
    if best is None:
        raise GpError("no restart produced a finite log marginal likelihood")
    hyper = GpHyperparams.from_vector(best[1])
    model = condition(X, y, hyper, x_mean=x_mean, x_scale=x_scale)
    _, g = log_marginal_likelihood(Z, yc, hyper)
    # projected gradient: components pinned at a bound and pointing outward are zeroed
    at_lo = np.isclose(best[1], lo) & (g < 0)
    at_hi = np.isclose(best[1], hi) & (g > 0)
    pg = np.where(at_lo | at_hi, 0.0, g)
    info = {
        "restart": best[2],
        "restart_values": runs,
        "grad_norm": float(np.linalg.norm(pg)),
        "iterations": int(best[3].nit),
    }
    return TrainedGp(
        model.inputs, model.targets, model.center, hyper, model.chol, model.alpha,
        model.jitter_used, model.x_mean, model.x_scale, model.log_likelihood, info,
    )


def predict(model: TrainedGp, Xstar, *, include_noise: bool = True, full_cov: bool = False):
    """Posterior predictive mean and variance at raw inputs ``Xstar``.

    With ``include_noise`` the observation noise sn2 is added to the latent
    variance. Variances are clipped at zero.
    """
    Zs = model.transform(Xstar)
    m = Zs.shape[0]
    if m == 0:
        return np.zeros(0), np.zeros(0)
    Ks = kernel_matrix(model.inputs, Zs, model.hyper) if model.inputs.shape[0] else np.zeros((0, m))
    mean = Ks.T @ model.alpha + model.center
    v = linalg.solve_triangular(model.chol, Ks, lower=True) if Ks.shape[0] else Ks
    if full_cov:
        cov = kernel_matrix(Zs, Zs, model.hyper) - v.T @ v
        if include_noise:
            cov = cov + model.hyper.noise_var * np.eye(m)
        return mean, cov
    var = model.hyper.signal_var - np.einsum("ij,ij->j", v, v)
    var = np.clip(var, 0.0, model.hyper.signal_var)
    if include_noise:
        var = var + model.hyper.noise_var
    return mean, var


def ard_relevance(model_or_hyper) -> np.ndarray:
    """Inverse-lengthscale shares, in the model's own input coordinates."""
    hyper = model_or_hyper.hyper if isinstance(model_or_hyper, TrainedGp) else model_or_hyper
    inv = 1.0 / hyper.lengthscales
    return inv / inv.sum()


# --------------------------------------------------------------------- io


def model_to_dict(model: TrainedGp) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "hyper": {
            "log_signal_var": model.hyper.log_signal_var,
            "log_noise_var": model.hyper.log_noise_var,
            "log_lengthscales": list(model.hyper.log_lengthscales),
        },
        "x_mean": model.x_mean.tolist(),
        "x_scale": model.x_scale.tolist(),
        "center": model.center,
        "inputs": model.inputs.tolist(),
        "targets": model.targets.tolist(),
        "alpha": model.alpha.tolist(),
        "jitter_used": model.jitter_used,
        "log_likelihood": model.log_likelihood,
    }


def model_from_dict(doc: dict) -> TrainedGp:
    if doc.get("format") != FORMAT_NAME:
        raise ValueError(f"not a {FORMAT_NAME} document")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')}")
    h = doc["hyper"]
    hyper = GpHyperparams(h["log_signal_var"], h["log_noise_var"], tuple(h["log_lengthscales"]))
    Z = np.array(doc["inputs"], dtype=float).reshape(-1, hyper.dim)
    yc = np.array(doc["targets"], dtype=float)
    n = yc.size
    # same operation order as condition() so the factor is bit-identical
    K = kernel_matrix(Z, Z, hyper) + hyper.noise_var * np.eye(n)
    if doc["jitter_used"] > 0:
        K = K + doc["jitter_used"] * np.eye(n)
    L = linalg.cholesky(K, lower=True) if n else np.zeros((0, 0))
    return TrainedGp(
        Z, yc, float(doc["center"]), hyper, L, np.array(doc["alpha"], dtype=float),
        float(doc["jitter_used"]), np.array(doc["x_mean"]), np.array(doc["x_scale"]),
        float(doc["log_likelihood"]),
    )


def save_model(model: TrainedGp, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path) -> TrainedGp:
    return model_from_dict(json.loads(Path(path).read_text()))
