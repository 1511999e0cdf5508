"""Comparison models: persistence and a small numpy multi-layer perceptron."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

log = logging.getLogger(__name__)


def persistence_forecast(last_value: float, horizon: int) -> np.ndarray:
    """Repeat the latest observation over the whole horizon."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return np.full(horizon, float(last_value))


@dataclass(frozen=True)
class MlpSpec:
    """One-hidden-layer regression network settings.

    Hidden units use tanh; the output is linear. Training is full-batch
    gradient descent with momentum on mean squared error, early-stopped on
    the last ``val_fraction`` of the (chronological) training rows.
    """

    hidden: int = 11
    seed: int = 0
    max_epochs: int = 2000
    learning_rate: float = 0.05
    momentum: float = 0.9
    patience: int = 50
    val_fraction: float = 0.2
    min_rows: int = 20


class MlpTrainingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Mlp:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: float
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float
    history: dict = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        Z = (np.atleast_2d(np.asarray(X, dtype=float)) - self.x_mean) / self.x_scale
        out = np.tanh(Z @ self.W1 + self.b1) @ self.W2 + self.b2
        return out * self.y_scale + self.y_mean


def _forward(Z, W1, b1, W2, b2):
    H = np.tanh(Z @ W1 + b1)
    return H, H @ W2 + b2


def mlp_fit(X, y, spec: MlpSpec = MlpSpec()) -> Mlp:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ValueError("X and y row counts differ")
    if y.size < spec.min_rows:
        raise ValueError(f"mlp_fit needs at least {spec.min_rows} rows, got {y.size}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("mlp_fit inputs contain missing or non-finite values")

    x_mean = X.mean(axis=0)
    x_scale = X.std(axis=0)
    x_scale = np.where(x_scale > 0, x_scale, 1.0)
    y_mean = float(y.mean())
    y_scale = float(y.std()) or 1.0
    Z = (X - x_mean) / x_scale
    t = (y - y_mean) / y_scale

    rng = np.random.default_rng(spec.seed)
    d, h = X.shape[1], spec.hidden
    W1 = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, h))
    if np.ptp(y) == 0:
        # nothing to learn: the output weights stay at zero
        return Mlp(W1, np.zeros(h), np.zeros(h), 0.0, x_mean, x_scale, y_mean, y_scale,
                   {"checkpoints": [], "epochs": 0, "best_val": 0.0})

    n_val = max(1, int(round(spec.val_fraction * y.size)))
    Zt, tt = Z[:-n_val], t[:-n_val]
    Zv, tv = Z[-n_val:], t[-n_val:]

    b1 = np.zeros(h)
    W2 = rng.normal(0.0, 1.0 / np.sqrt(h), size=h)
    b2 = 0.0
    vel = [np.zeros_like(W1), np.zeros_like(b1), np.zeros_like(W2), 0.0]

    best = (np.inf, W1.copy(), b1.copy(), W2.copy(), b2)
    checkpoints: List[Tuple[int, float, float]] = []
    since_best = 0
    m = tt.size
    lr, mom = spec.learning_rate, spec.momentum
    for epoch in range(spec.max_epochs):
        with np.errstate(over="ignore", invalid="ignore"):
            H, out = _forward(Zt, W1, b1, W2, b2)
            resid = out - tt
            train_loss = float(np.mean(resid * resid))
        if not np.isfinite(train_loss):
            raise MlpTrainingError(f"non-finite training loss at epoch {epoch}")
        _, vout = _forward(Zv, W1, b1, W2, b2)
        val_loss = float(np.mean((vout - tv) ** 2))
        if val_loss < best[0]:
            best = (val_loss, W1.copy(), b1.copy(), W2.copy(), b2)
            checkpoints.append((epoch, train_loss, val_loss))
            since_best = 0
        else:
            since_best += 1
            if since_best >= spec.patience:
                break
        g_out = 2.0 * resid / m
        gW2 = H.T @ g_out
        gb2 = float(g_out.sum())
        gH = np.outer(g_out, W2) * (1.0 - H * H)
        gW1 = Zt.T @ gH
        gb1 = gH.sum(axis=0)
        vel[0] = mom * vel[0] - lr * gW1
        vel[1] = mom * vel[1] - lr * gb1
        vel[2] = mom * vel[2] - lr * gW2
        vel[3] = mom * vel[3] - lr * gb2
        W1 = W1 + vel[0]
        b1 = b1 + vel[1]
        W2 = W2 + vel[2]
        b2 = b2 + vel[3]

    _, W1, b1, W2, b2 = best
    history = {"checkpoints": checkpoints, "epochs": epoch + 1, "best_val": best[0]}
    return Mlp(W1, b1, W2, float(b2), x_mean, x_scale, y_mean, y_scale, history)


def mlp_to_dict(net: Mlp) -> dict:
    return {
        "W1": net.W1.tolist(), "b1": net.b1.tolist(), "W2": net.W2.tolist(), "b2": net.b2,
        "x_mean": net.x_mean.tolist(), "x_scale": net.x_scale.tolist(),
        "y_mean": net.y_mean, "y_scale": net.y_scale,
    }


def mlp_from_dict(doc: dict) -> Mlp:
    return Mlp(
        np.array(doc["W1"], dtype=float), np.array(doc["b1"], dtype=float),
        np.array(doc["W2"], dtype=float), float(doc["b2"]),
        np.array(doc["x_mean"], dtype=float), np.array(doc["x_scale"], dtype=float),
        float(doc["y_mean"]), float(doc["y_scale"]),
    )


def mlp_cprice(data, config=None, train_rows=None):
    """Two-stage MLP pipeline (11 then 8 hidden units); see ``pipeline``."""
    from .pipeline import PipelineConfig, mlp_cprice as build

    return build(data, config or PipelineConfig(variant="mlp_cprice"), train_rows)
