"""Conditional homotopy kernel, innovation statistics and the mixture oracle.

All functions broadcast over a leading batch axis: points have shape
``(..., n)`` and times broadcast against ``(...)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .schedule import ScheduleParams, eval_schedule

__all__ = [
    "PerturbedBatch",
    "perturb",
    "innovation",
    "innovation_mean",
    "conditional_field",
    "conditional_score",
    "MixtureOracle",
]


@dataclass(frozen=True)
class PerturbedBatch:
    """Reparameterized draws x = mu(t) x_bar + sigma(t) eps with their statistics.

    ``gamma_mean`` is the closed-form kernel expectation of ``gamma`` for each
    sample's own x_bar and t. ``labels`` carries optional class indices.
    """

    x_bar: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    x: np.ndarray
    gamma: np.ndarray
    gamma_mean: np.ndarray
    v_cond: np.ndarray
    w: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return int(np.atleast_2d(self.x).shape[0])


def _sq_norm(v: np.ndarray) -> np.ndarray:
    return np.sum(np.square(v), axis=-1)


def perturb(x_bar, eps, t, p: ScheduleParams, labels=None) -> PerturbedBatch:
    """Draw from the conditional kernel by reparameterization.

    ``t`` is expected to be already clamped; it is clamped again here, which
    is a no-op for valid input.
    """
    x_bar = np.asarray(x_bar, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x_bar.shape != eps.shape:
        raise ValueError(f"x_bar shape {x_bar.shape} does not match eps shape {eps.shape}")
    ev = eval_schedule(t, p)
    mu = np.asarray(ev.mu)[..., None]
    sigma = np.asarray(ev.sigma)[..., None]
    x = mu * x_bar + sigma * eps
    return PerturbedBatch(
        x_bar=x_bar,
        eps=eps,
        t=np.asarray(ev.t),
        x=x,
        gamma=innovation(x, x_bar, ev.t, p),
        gamma_mean=innovation_mean(x_bar, ev.t, p, x_bar.shape[-1]),
        v_cond=conditional_field(x_bar, eps, ev.t, p),
        w=np.asarray(ev.w),
        labels=None if labels is None else np.asarray(labels),
    )


def innovation(x, x_bar, t, p: ScheduleParams):
    """gamma = (alpha'/omega^2) |x|^2 + (beta'/nu^2) |x - x_bar|^2."""
    x = np.asarray(x, dtype=np.float64)
    x_bar = np.asarray(x_bar, dtype=np.float64)
    ev = eval_schedule(t, p)
    return (ev.alpha_dot / p.omega**2) * _sq_norm(x) + (ev.beta_dot / p.nu**2) * _sq_norm(x - x_bar)


def innovation_mean(x_bar, t, p: ScheduleParams, n: int | None = None):
    """Closed-form expectation of ``innovation`` under N(mu x_bar, sigma^2 I)."""
    x_bar = np.asarray(x_bar, dtype=np.float64)
    n = x_bar.shape[-1] if n is None else n
    ev = eval_schedule(t, p)
    nvar = n * ev.sigma**2
    xb2 = _sq_norm(x_bar)
    return (ev.alpha_dot / p.omega**2) * (ev.mu**2 * xb2 + nvar) + (ev.beta_dot / p.nu**2) * (
        (ev.mu - 1.0) ** 2 * xb2 + nvar
    )


def conditional_field(x_bar, eps, t, p: ScheduleParams):
    """Flow-matching conditional velocity mu'(t) x_bar + sigma'(t) eps."""
    ev = eval_schedule(t, p)
    return np.asarray(ev.mu_dot)[..., None] * np.asarray(x_bar, dtype=np.float64) + np.asarray(
        ev.sigma_dot
    )[..., None] * np.asarray(eps, dtype=np.float64)


def conditional_score(x, x_bar, t, p: ScheduleParams):
    """grad_x log N(x; mu x_bar, sigma^2 I)."""
    ev = eval_schedule(t, p)
    mu = np.asarray(ev.mu)[..., None]
    var = np.asarray(ev.sigma)[..., None] ** 2
    return -(np.asarray(x, dtype=np.float64) - mu * np.asarray(x_bar, dtype=np.float64)) / var


class MixtureOracle:
    """Exact marginal homotopy for a finite dataset (uniform weights).

    rho_bar(x, t) = (1/K) sum_k N(x; mu(t) x_bar_k, sigma(t)^2 I)

    Intended for n <= 3 and K up to ~1e4; cost is O(N K) per query.
    """

    def __init__(self, data, schedule: ScheduleParams):
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        if data.shape[0] < 1:
            raise ValueError("oracle needs at least one data point")
        self.data = data
        self.schedule = schedule

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def _component_log_pdf(self, x, t):
        """log N(x; mu x_bar_k, sigma^2 I) with shape (N, K)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        ev = eval_schedule(t, self.schedule)
        mu, var = float(ev.mu), float(ev.sigma) ** 2
        diff = x[:, None, :] - mu * self.data[None, :, :]
        return -0.5 * _sq_norm(diff) / var - 0.5 * self.dim * np.log(2 * np.pi * var)

    def log_density(self, x, t):
        logp = self._component_log_pdf(x, t)
        return logsumexp(logp, axis=1) - np.log(self.data.shape[0])

    def density(self, x, t):
        return np.exp(self.log_density(x, t))

    def posterior(self, x, t):
        """Posterior weights p(x_bar_k | x, t), shape (N, K)."""
        return softmax(self._component_log_pdf(x, t), axis=1)

    def score(self, x, t, floor: float = -700.0):
        """grad_x log rho_bar via posterior-weighted conditional scores."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        logp = self._component_log_pdf(x, t)
        if np.any(logsumexp(logp, axis=1) < floor):
            raise FloatingPointError("oracle score requested in an underflow region")
        post = softmax(logp, axis=1)
        ev = eval_schedule(t, self.schedule)
        mean = float(ev.mu) * (post @ self.data)
        return -(x - mean) / float(ev.sigma) ** 2

    def marginal_field(self, x, t):
        """Posterior average of the conditional velocity field.

        For each component the noise is recovered as eps = (x - mu x_bar_k)/sigma.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        ev = eval_schedule(t, self.schedule)
        mu, sigma = float(ev.mu), float(ev.sigma)
        post = self.posterior(x, t)
        eps = (x[:, None, :] - mu * self.data[None, :, :]) / sigma
        v = conditional_field(self.data[None, :, :], eps, t, self.schedule)
        return np.einsum("nk,nkd->nd", post, v)

    def probability_flow(self, x, t):
        """-f x + g^2/2 * score."""
        ev = eval_schedule(t, self.schedule)
        return -float(ev.f) * np.atleast_2d(x) + 0.5 * float(ev.g_sq) * self.score(x, t)

    def time_derivative(self, x, t):
        """d rho_bar / dt = -1/2 mean_k rho_k(x) (gamma_k(x) - gamma_bar_k)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        comp = np.exp(self._component_log_pdf(x, t))
        gam = innovation(x[:, None, :], self.data[None, :, :], t, self.schedule)
        gbar = innovation_mean(self.data, t, self.schedule)
        return -0.5 * np.mean(comp * (gam - gbar[None, :]), axis=1)

    def sample(self, count: int, t, rng: np.random.Generator):
        idx = rng.integers(0, self.data.shape[0], size=count)
        eps = rng.standard_normal((count, self.dim))
        ev = eval_schedule(t, self.schedule)
        return float(ev.mu) * self.data[idx] + float(ev.sigma) * eps
