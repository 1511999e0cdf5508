"""GP regression with Tobit (censored Gaussian) observations, fitted by EP.

Exact observations keep their Gaussian likelihood N(y | f, sn2) and enter as
fixed sites. An observation censored above at ``b`` says only that
``f + eps >= b``; its likelihood Phi((f - b) / sn) is approximated by a
Gaussian site refined with damped, sequential expectation propagation.
Tilted moments come from a Gaussian truncated in observation space and are
mapped back to the latent value by linear-Gaussian conditioning.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, special

from .gp_core import GpHyperparams, kernel_matrix, stable_cholesky

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_ASYMPTOTIC_Z = 38.0


class CensorStatus(enum.IntEnum):
    EXACT = 0
    ABOVE = 1
    BELOW = -1


@dataclass(frozen=True)
class CensoredTarget:
    value: float
    status: CensorStatus = CensorStatus.EXACT
    bound: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "status", CensorStatus(self.status))
        if self.status is not CensorStatus.EXACT and self.bound is None:
            object.__setattr__(self, "bound", float(self.value))

    @classmethod
    def exact(cls, value: float) -> "CensoredTarget":
        return cls(float(value))

    @classmethod
    def above(cls, bound: float) -> "CensoredTarget":
        return cls(float(bound), CensorStatus.ABOVE, float(bound))

    @classmethod
    def below(cls, bound: float) -> "CensoredTarget":
        return cls(float(bound), CensorStatus.BELOW, float(bound))


def censor_targets(y: Sequence[float], upper: Optional[float] = None, lower: Optional[float] = None):
    """Threshold raw targets: values at or beyond a bound become censored."""
    out = []
    for v in np.asarray(y, dtype=float):
        if upper is not None and v >= upper:
            out.append(CensoredTarget.above(upper))
        elif lower is not None and v <= lower:
            out.append(CensoredTarget.below(lower))
        else:
            out.append(CensoredTarget.exact(v))
    return out


class EpDivergenceError(RuntimeError):
    def __init__(self, sweep: int, site: int, detail: str = ""):
        self.sweep = sweep
        self.site = site
        super().__init__(f"EP diverged at sweep {sweep}, site {site}{': ' + detail if detail else ''}")


def _inv_mills(alpha: float) -> float:
    """phi(a) / (1 - Phi(a)), via the scaled complementary error function."""
    return _SQRT_2_OVER_PI / special.erfcx(alpha / math.sqrt(2.0))


def truncated_gaussian_moments(mu: float, sigma: float, lower: float) -> Tuple[float, float, float]:
    """Mass, mean and variance of N(mu, sigma^2) restricted to [lower, inf).

    Standardised bounds above 38 use the asymptotic series of the inverse Mills
    ratio; below -38 the truncation is numerically void.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if lower == -math.inf:
        return 1.0, float(mu), float(sigma) ** 2
    a = (lower - mu) / sigma
    if a < -_ASYMPTOTIC_Z:
        return 1.0, float(mu), float(sigma) ** 2
    mass = 0.5 * special.erfc(a / math.sqrt(2.0))
    if a > _ASYMPTOTIC_Z:
        ia2 = 1.0 / (a * a)
        # lambda = a + 1/a - 2/a^3 + 10/a^5 - 74/a^7 + 706/a^9 - 8162/a^11
        lam = a + (1.0 / a) * (1.0 + ia2 * (-2.0 + ia2 * (10.0 + ia2 * (-74.0 + ia2 * (706.0 - 8162.0 * ia2)))))
        # var/sigma^2 = 1/a^2 - 6/a^4 + 50/a^6 - 518/a^8 + 6354/a^10
        rel_var = ia2 * (1.0 + ia2 * (-6.0 + ia2 * (50.0 + ia2 * (-518.0 + 6354.0 * ia2))))
    else:
        lam = _inv_mills(a)
        rel_var = 1.0 + a * lam - lam * lam
    rel_var = min(max(rel_var, 0.0), 1.0)
    # the mass underflows long before the moments lose accuracy
    mass = max(mass, np.nextafter(0.0, 1.0))
    return float(mass), float(mu + sigma * lam), float(sigma * sigma * rel_var)


def tilted_moments(cav_mean: float, cav_var: float, noise_var: float, bound: float, status: CensorStatus):
    """Moments of N(f | cav_mean, cav_var) * P(f + eps beyond bound).

    The observation y = f + eps is Gaussian with variance cav_var + noise_var;
    truncating y and pulling the moments back through E[f | y] gives the
    latent moments exactly.
    """
    s2 = cav_var + noise_var
    s = math.sqrt(s2)
    if status is CensorStatus.ABOVE:
        mass, ym, yv = truncated_gaussian_moments(cav_mean, s, bound)
    else:
        # mirror: y <= b  <=>  -y >= -b
        mass, ym, yv = truncated_gaussian_moments(-cav_mean, s, -bound)
        ym = -ym
    gain = cav_var / s2
    mean = cav_mean + gain * (ym - cav_mean)
    var = cav_var - gain * cav_var + gain * gain * yv
    return mass, mean, max(var, 0.0)


@dataclass(frozen=True, eq=False)
class EpState:
    site_means: np.ndarray
    site_precisions: np.ndarray
    converged: bool
    sweeps: int
    damping: float
    max_change: float


@dataclass(frozen=True, eq=False)
class CensoredGp:
    """EP posterior. Sites are held in the internal target scale.

    Internally targets are shifted by ``center`` and divided by ``scale``;
    ``hyper`` stays in caller units and the scaled copy is rebuilt on demand.
    """

    inputs: np.ndarray
    hyper: GpHyperparams
    center: float
    scale: float
    site_nu: np.ndarray
    site_tau: np.ndarray
    chol_b: np.ndarray
    weights: np.ndarray
    post_mean: np.ndarray
    post_cov: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray
    state: EpState

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

    @property
    def latent_mean(self) -> np.ndarray:
        """Posterior latent mean at the training inputs (caller units)."""
        return self.post_mean * self.scale + self.center

    @property
    def latent_var(self) -> np.ndarray:
        return np.diag(self.post_cov) * self.scale ** 2


def _scaled_hyper(hyper: GpHyperparams, scale: float) -> GpHyperparams:
    ls2 = 2.0 * math.log(scale)
    return GpHyperparams(hyper.log_signal_var - ls2, hyper.log_noise_var - ls2, hyper.log_lengthscales)


def _posterior(K: np.ndarray, tau: np.ndarray, nu: np.ndarray):
    """Sigma = (K^-1 + S)^-1 and mu = Sigma nu via B = I + S^1/2 K S^1/2."""
    n = K.shape[0]
    sq = np.sqrt(tau)
    B = np.eye(n) + sq[:, None] * K * sq[None, :]
    L, _ = stable_cholesky(B)
    V = linalg.solve_triangular(L, sq[:, None] * K, lower=True)
    Sigma = K - V.T @ V
    return Sigma, Sigma @ nu, L


def ep_fit(
    X,
    y: Sequence[CensoredTarget],
    hyper: GpHyperparams,
    *,
    damping: float = 0.5,
    max_sweeps: int = 100,
    tol: float = 1e-6,
    x_mean: Optional[np.ndarray] = None,
    x_scale: Optional[np.ndarray] = None,
) -> Tuple[CensoredGp, EpState]:
    """Fit the EP approximation with fixed hyperparameters.

    Sites are visited in input order once per sweep. ``x_mean``/``x_scale``
    are the standardisation constants that map raw inputs onto the
    coordinates ``hyper`` was learned in (identity when omitted).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    if n < 1 or len(y) != n:
        raise ValueError("need one CensoredTarget per input row, at least one row")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    x_mean = np.zeros(X.shape[1]) if x_mean is None else np.asarray(x_mean, float)
    x_scale = np.ones(X.shape[1]) if x_scale is None else np.asarray(x_scale, float)
    Z = (X - x_mean) / x_scale

    status = np.array([int(t.status) for t in y])
    vals = np.array([t.value if t.status is CensorStatus.EXACT else t.bound for t in y], dtype=float)
    exact = status == 0
    ref = vals[exact] if exact.any() else vals
    center = float(ref.mean())
    spread = float(np.std(vals))
    scale = spread if spread > 0 else max(1.0, abs(center))
    v = (vals - center) / scale

    h = _scaled_hyper(hyper, scale)
    K = kernel_matrix(Z, Z, h)
    # exact sites need a finite precision; the jitter floor only matters at sn2 = 0
    noise = max(h.noise_var, 1e-10 * h.signal_var)

    tau = np.where(exact, 1.0 / noise, 0.0)
    nu = np.where(exact, v / noise, 0.0)
    Sigma, mu, L = _posterior(K, tau, nu)
    censored = np.flatnonzero(~exact)
    sweeps, converged, change = 0, censored.size == 0, 0.0

    while not converged and sweeps < max_sweeps:
        sweeps += 1
        change = 0.0
        for i in censored:
            sii = Sigma[i, i]
            cav_tau = 1.0 / sii - tau[i]
            cav_nu = mu[i] / sii - nu[i]
            if not (np.isfinite(cav_tau) and np.isfinite(cav_nu)):
                raise EpDivergenceError(sweeps, int(i), "non-finite cavity")
            cav_tau = max(cav_tau, 1e-12)
            cav_m, cav_v = cav_nu / cav_tau, 1.0 / cav_tau
            _, m_hat, v_hat = tilted_moments(cav_m, cav_v, h.noise_var, v[i], CensorStatus(status[i]))
            v_hat = max(v_hat, 1e-300)
            tau_full = 1.0 / v_hat - cav_tau
            nu_full = m_hat / v_hat - cav_nu
            new_tau = (1.0 - damping) * tau[i] + damping * tau_full
            new_nu = (1.0 - damping) * nu[i] + damping * nu_full
            if new_tau < 0.0:
                new_tau = 0.0
            if not (np.isfinite(new_tau) and np.isfinite(new_nu)):
                raise EpDivergenceError(sweeps, int(i), f"site ({new_tau}, {new_nu})")
            d_tau = new_tau - tau[i]
            change = max(change, abs(d_tau), abs(new_nu - nu[i]))
            tau[i], nu[i] = new_tau, new_nu
            # rank-one refresh of Sigma, then mu
            si = Sigma[:, i].copy()
            Sigma -= (d_tau / (1.0 + d_tau * si[i])) * np.outer(si, si)
            mu = Sigma @ nu
        # recompute from scratch to stop round-off drift
        Sigma, mu, L = _posterior(K, tau, nu)
        if not np.all(np.isfinite(mu)):
            raise EpDivergenceError(sweeps, -1, "non-finite posterior mean")
        converged = change < tol

    sq = np.sqrt(tau)
    # predictive weights: k_*^T (nu - S^1/2 B^-1 S^1/2 K nu)
    weights = nu - sq * linalg.cho_solve((L, True), sq * (K @ nu))
    state = EpState(
        site_means=np.divide(nu, tau, out=np.zeros_like(nu), where=tau > 0),
        site_precisions=tau.copy(),
        converged=bool(converged),
        sweeps=sweeps,
        damping=damping,
        max_change=float(change),
    )
    model = CensoredGp(Z, hyper, center, scale, nu, tau, L, weights, mu, Sigma, x_mean, x_scale, state)
    return model, state


def predict_latent(model: CensoredGp, Xstar) -> Tuple[np.ndarray, np.ndarray]:
    Zs = model.transform(Xstar)
    if Zs.shape[0] == 0:
        return np.zeros(0), np.zeros(0)
    h = _scaled_hyper(model.hyper, model.scale)
    Ks = kernel_matrix(model.inputs, Zs, h)
    mean = Ks.T @ model.weights
    sq = np.sqrt(model.site_tau)
    V = linalg.solve_triangular(model.chol_b, sq[:, None] * Ks, lower=True)
    var = np.clip(h.signal_var - np.einsum("ij,ij->j", V, V), 0.0, h.signal_var)
    return mean * model.scale + model.center, var * model.scale ** 2


def predict_censored(model: CensoredGp, Xstar, bound: float = math.inf):
    """Latent predictive mean/variance and P(observation >= bound).

    The exceedance probability is for a new noisy observation y* = f* + eps.
    """
    mean, var = predict_latent(model, Xstar)
    if bound == math.inf:
        return mean, var, np.zeros_like(mean)
    sd = np.sqrt(var + model.hyper.noise_var)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (mean - bound) / sd
    prob = special.ndtr(z)
    prob = np.where(sd > 0, prob, (mean >= bound).astype(float))
    return mean, var, prob


def censored_mean(mean, var, noise_var: float, upper: Optional[float] = None, lower: Optional[float] = None):
    """E[min(max(y, lower), upper)] for y ~ N(mean, var + noise_var).

    The point forecast of a recorded (clipped) quantity.
    """
    mean = np.asarray(mean, dtype=float)
    s = np.sqrt(np.asarray(var, dtype=float) + noise_var)
    out = mean.copy()
    if upper is not None:
        a = (upper - mean) / s
        # E[min(y, u)] = E[y] - s * (phi(a) - a * (1 - Phi(a)))
        out = out - s * (special.ndtr(-a) * (-a) + np.exp(-0.5 * a * a) / math.sqrt(2 * math.pi))
    if lower is not None:
        b = (lower - mean) / s
        out = out + s * (special.ndtr(b) * b + np.exp(-0.5 * b * b) / math.sqrt(2 * math.pi))
    return out
