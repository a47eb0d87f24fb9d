"""Probability-path schedule.

The log-homotopy between the prior N(0, omega^2 I) and the Gaussian data
likelihood is controlled by two increasing coefficients alpha(t), beta(t).
They induce a Gaussian kernel N(mu(t) x_bar, sigma(t)^2 I) and, through
mu and sigma, the drift f(t) and diffusion g(t) of the equivalent SDE.

Only the OT flow-matching instantiation is provided:

    alpha(t) = omega^2 / (1 - t),   beta(t) = nu^2 t / (1 - t)^2

for which mu(t) = t, sigma(t) = 1 - t, f(t) = -1/t and
g(t)^2 = 2 (1 - t) / t.  Everything downstream is computed from the
generic kernel formulas, so the closed forms above act as test oracles.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "ScheduleParams",
    "ScheduleEval",
    "clamp_time",
    "eval_schedule",
    "stationary_coefficients",
    "homotopy_coefficients",
]


@dataclass(frozen=True)
class ScheduleParams:
    """Hyperparameters of the probability path.

    ``t_floor`` is the smallest time drawn during training; the kernel
    itself is defined down to t = 0 through its analytic limit.
    """

    omega: float = 1.0
    nu: float = 1.0
    t_max: float = 1.0 - 1e-5
    t_end: float = 1.0
    kappa: float = 1.5
    eta: float = 1e-4
    t_floor: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.t_max < 1.0:
            raise ValueError(f"t_max must lie in (0, 1), got {self.t_max}")
        if self.t_end < self.t_max:
            raise ValueError(f"t_end={self.t_end} must be >= t_max={self.t_max}")
        if self.omega <= 0 or self.nu <= 0:
            raise ValueError("omega and nu must be positive")
        if self.kappa <= 1:
            raise ValueError(f"kappa must exceed 1, got {self.kappa}")
        if self.eta < 0:
            raise ValueError(f"eta must be non-negative, got {self.eta}")
        if not 0.0 <= self.t_floor < self.t_max:
            raise ValueError("t_floor must lie in [0, t_max)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ScheduleEval:
    t: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    alpha_dot: np.ndarray
    beta_dot: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    mu_dot: np.ndarray
    sigma_dot: np.ndarray
    f: np.ndarray
    g_sq: np.ndarray
    w: np.ndarray

    @property
    def g(self) -> np.ndarray:
        return np.sqrt(self.g_sq)


def clamp_time(t, p: ScheduleParams):
    """Clamp time at the stationarity cutoff ``t_max``."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(np.isnan(t_arr)):
        raise ValueError("time must be non-negative")
    out = np.minimum(t_arr, p.t_max)
    return float(out) if out.ndim == 0 else out


def homotopy_coefficients(t, p: ScheduleParams):
    """alpha, beta and their time derivatives for the OT-FM path."""
    t = np.asarray(t, dtype=np.float64)
    s = 1.0 - t
    alpha = p.omega**2 / s
    beta = p.nu**2 * t / s**2
    alpha_dot = p.omega**2 / s**2
    beta_dot = p.nu**2 * (1.0 + t) / s**3
    return alpha, beta, alpha_dot, beta_dot


def eval_schedule(t, p: ScheduleParams) -> ScheduleEval:
    """Evaluate every time-dependent scalar of the path at (clamped) ``t``.

    Works elementwise on arrays. At t = 0 the kernel takes its analytic
    limit (mu = 0, sigma^2 = omega^2 / alpha(0)); f and g diverge there and
    are reported as -inf and +inf.
    """
    t = np.asarray(clamp_time(t, p), dtype=np.float64)
    alpha, beta, alpha_dot, beta_dot = homotopy_coefficients(t, p)
    # precision-scaled coefficients: kernel precision is a + b
    a = alpha / p.omega**2
    b = beta / p.nu**2
    a_dot = alpha_dot / p.omega**2
    b_dot = beta_dot / p.nu**2

    at_zero = t == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.log(beta / alpha * p.omega**2 / p.nu**2)
        mu = expit(z)
        one_minus_mu = expit(-z)
        sigma = np.sqrt(p.nu**2 * mu / beta)
        # d/dt sigmoid(z) = sigmoid(z) sigmoid(-z) dz/dt; avoids 1 - mu cancellation
        mu_dot = mu * one_minus_mu * (b_dot / b - a_dot / a)
        f = -mu_dot / mu

    sigma = np.where(at_zero, 1.0 / np.sqrt(a), sigma)
    mu = np.where(at_zero, 0.0, mu)
    mu_dot = np.where(at_zero, b_dot / a, mu_dot)
    f = np.where(at_zero, -np.inf, f)

    sigma_dot = -0.5 * (a_dot + b_dot) * sigma**3
    with np.errstate(invalid="ignore"):
        g_sq = -2.0 * sigma * (sigma_dot + f * sigma)
    g_sq = np.where(at_zero, np.inf, g_sq)
    w = (1.0 - t) ** p.kappa

    return ScheduleEval(
        t=t,
        alpha=alpha,
        beta=beta,
        alpha_dot=alpha_dot,
        beta_dot=beta_dot,
        mu=mu,
        sigma=sigma,
        mu_dot=mu_dot,
        sigma_dot=sigma_dot,
        f=f,
        g_sq=g_sq,
        w=w,
    )


def stationary_coefficients(p: ScheduleParams) -> tuple[float, float]:
    """Return (f_inf, g_inf^2), the drift and squared diffusion at t_max."""
    ev = eval_schedule(p.t_max, p)
    f_inf, g_inf_sq = float(ev.f), float(ev.g_sq)
    if not (np.isfinite(f_inf) and np.isfinite(g_inf_sq) and g_inf_sq > 0):
        raise ValueError(f"degenerate stationary coefficients f={f_inf}, g^2={g_inf_sq}")
    return f_inf, g_inf_sq
