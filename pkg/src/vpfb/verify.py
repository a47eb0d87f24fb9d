"""Oracle suites run by ``vpfb verify``.

Each check computes a measured error against an independent oracle
(closed forms, finite differences, quadrature) and compares it with a fixed
tolerance. Checks never raise on a mismatch; they report it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import schedule as sch
from .autodiff import Architecture, EnergyModel, param_grad
from .loss import LossConfig, batch_loss
from .perturbation import MixtureOracle, conditional_field, conditional_score, perturb
from .poisson import flux_solution, relative_l2, ritz_solution

__all__ = ["CheckResult", "SUITES", "run_all", "schedule_identity", "time_derivative_oracle",
           "field_identities", "second_order_gradients", "poisson_1d", "K3_DATA"]

# 2D dataset used by the marginal-density oracles
K3_DATA = np.array([[1.0, 0.5], [-1.5, 0.0], [0.25, -1.0]])
POISSON_DATA = np.array([-2.0, 0.5, 1.5])


@dataclass
class CheckResult:
    check_id: str
    passed: bool
    measured: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.check_id}: measured {self.measured:.3e} (tol {self.tolerance:.0e}) {self.detail}".rstrip()


def _result(check_id, measured, tol, t0, detail="") -> CheckResult:
    ok = bool(np.isfinite(measured) and measured < tol)
    return CheckResult(check_id, ok, float(measured), tol, time.perf_counter() - t0, detail)


# -- schedule -------------------------------------------------------------------


def schedule_identity(p: sch.ScheduleParams | None = None, n: int = 1000) -> dict[str, float]:
    """Max errors of mu, sigma (absolute) and f, g (relative) against the OT closed forms."""
    p = p or sch.ScheduleParams()
    t = np.linspace(1e-4, p.t_max, n)
    ev = sch.eval_schedule(t, p)
    g_ref = np.sqrt(2 * (1 - t) / t)
    return {
        "mu": float(np.max(np.abs(ev.mu - t))),
        "sigma": float(np.max(np.abs(ev.sigma - (1 - t)))),
        "f": float(np.max(np.abs(ev.f - (-1 / t)) / (1 / t))),
        "g": float(np.max(np.abs(np.sqrt(ev.g_sq) - g_ref) / g_ref)),
    }


def check_schedule() -> list[CheckResult]:
    t0 = time.perf_counter()
    err = schedule_identity()
    return [
        _result("prop1.mu", err["mu"], 1e-12, t0),
        _result("prop1.sigma", err["sigma"], 1e-12, t0),
        _result("prop1.f", err["f"], 1e-10, t0),
        _result("prop1.g", err["g"], 1e-10, t0),
    ]


# -- marginal time derivative ---------------------------------------------------


def probe_grid(n: int = 5, seed: int = 0):
    """n x n probes: n points near the data crossed with n times in [0.2, 0.8]."""
    rng = np.random.default_rng(seed)
    xs = K3_DATA[rng.integers(0, 3, n)] * 0.5 + 0.6 * rng.standard_normal((n, 2))
    ts = np.linspace(0.2, 0.8, n)
    return xs, ts


def time_derivative_oracle(dt: float = 1e-5) -> float:
    """Max relative error of the closed-form d rho_bar/dt against a central difference in t."""
    p = sch.ScheduleParams()
    o = MixtureOracle(K3_DATA, p)
    xs, ts = probe_grid()
    worst = 0.0
    for t in ts:
        exact = o.time_derivative(xs, t)
        fd = (o.density(xs, t + dt) - o.density(xs, t - dt)) / (2 * dt)
        worst = max(worst, float(np.max(np.abs(exact - fd) / np.abs(fd))))
    return worst


def check_time_derivative() -> list[CheckResult]:
    t0 = time.perf_counter()
    return [_result("prop2.time_derivative", time_derivative_oracle(), 1e-4, t0, "25 probes, K=3")]


# -- field identities ---------------------------------------------------------------


def field_identities(seed: int = 0) -> dict[str, float]:
    """Conditional: |v_cond - (-f x + g^2/2 score_cond)|_inf; marginal: relative error of the
    posterior-averaged conditional field against -f x + g^2/2 * mixture score."""
    p = sch.ScheduleParams()
    rng = np.random.default_rng(seed)
    x_bar = rng.normal(size=(100, 2))
    eps = rng.normal(size=(100, 2))
    t = rng.uniform(0.05, 0.95, size=100)
    ev = sch.eval_schedule(t, p)
    x = ev.mu[:, None] * x_bar + ev.sigma[:, None] * eps
    v = conditional_field(x_bar, eps, t, p)
    pf = -ev.f[:, None] * x + 0.5 * ev.g_sq[:, None] * conditional_score(x, x_bar, t, p)
    cond = float(np.max(np.abs(v - pf)))

    o = MixtureOracle(K3_DATA, p)
    worst = 0.0
    for tt in (0.2, 0.5, 0.8):
        pts = o.sample(40, tt, rng)
        a = o.marginal_field(pts, tt)
        b = o.probability_flow(pts, tt)
        worst = max(worst, float(np.max(np.linalg.norm(a - b, axis=1) / np.linalg.norm(b, axis=1))))
    return {"conditional": cond, "marginal": worst}


def check_fields() -> list[CheckResult]:
    t0 = time.perf_counter()
    err = field_identities()
    return [
        _result("prop4.conditional_field", err["conditional"], 1e-10, t0, "100 tuples"),
        _result("prop4.marginal_field", err["marginal"], 1e-8, t0, "K=3 oracle"),
    ]


# -- second-order gradient checks --------------------------------------------------


def _directional_fd(fn: Callable[[torch.Tensor], float], theta: torch.Tensor, u: torch.Tensor) -> float:
    """Five-point central difference along u, with h picked as the most self-consistent of three."""
    def stencil(h):
        return (8 * (fn(theta + h * u) - fn(theta - h * u)) - (fn(theta + 2 * h * u) - fn(theta - 2 * h * u))) / (12 * h)

    hs = (1e-2, 1e-3, 1e-4)
    est = [stencil(h) for h in hs]
    # the step whose estimate moves least when h shrinks by 10x
    gaps = [abs(est[0] - est[1]), abs(est[1] - est[2])]
    return est[1] if gaps[0] <= gaps[1] else est[2]


_LOSS_TERMS = {
    "grad_norm": lambda out: out.grad_norm_term,
    "cosine": lambda out: out.alignment_term,
    "covariance": lambda out: out.covariance_term,
}


def second_order_gradients(n_models: int = 20, n_dirs: int = 32, seed: int = 0) -> dict[str, float]:
    """Worst relative error of param_grad against directional finite differences per loss term."""
    p = sch.ScheduleParams()
    cfg = LossConfig()
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in _LOSS_TERMS}
    for m in range(n_models):
        act = ("gelu", "tanh", "silu", "softplus")[m % 4]
        model = EnergyModel(Architecture(hidden=(8, 8), activation=act), seed=seed * 1000 + m)
        B = 16
        batch = perturb(rng.normal(size=(B, 2)), rng.normal(size=(B, 2)), rng.uniform(0.05, 0.95, B), p)
        theta0 = model.flat_params()
        for name, pick in _LOSS_TERMS.items():
            model.set_flat_params(theta0)
            g = param_grad(pick(batch_loss(model, batch, cfg, p)), model)

            def value(theta, pick=pick):
                model.set_flat_params(theta)
                return float(pick(batch_loss(model, batch, cfg, p)).detach())

            gen = torch.Generator().manual_seed(seed * 7919 + m)
            for _ in range(n_dirs):
                u = torch.randn(theta0.numel(), generator=gen, dtype=theta0.dtype)
                u /= u.norm()
                exact = float(g @ u)
                fd = _directional_fd(value, theta0, u)
                worst[name] = max(worst[name], abs(fd - exact) / max(abs(exact), abs(fd), 1e-300))
            model.set_flat_params(theta0)
    return worst


def check_gradients(n_models: int = 20) -> list[CheckResult]:
    t0 = time.perf_counter()
    worst = second_order_gradients(n_models=n_models)
    return [_result(f"gradcheck.{k}", v, 1e-4, t0, f"{n_models} models x 32 directions") for k, v in worst.items()]


# -- 1D Poisson -------------------------------------------------------------------


def poisson_1d(centering: str = "innovation") -> float:
    p = sch.ScheduleParams()
    ref = flux_solution(POISSON_DATA, 0.5, p)
    got = ritz_solution(POISSON_DATA, 0.5, p, centering=centering)
    central = np.abs(ref.x) <= 0.8 * 6.0
    return relative_l2(got.grad, ref.grad, central)


def check_poisson() -> list[CheckResult]:
    t0 = time.perf_counter()
    return [_result("poisson1d.ritz_vs_flux", poisson_1d(), 5e-2, t0, "501 nodes on [-6, 6], t=0.5")]


SUITES: dict[str, Callable[[], list[CheckResult]]] = {
    "prop1": check_schedule,
    "prop2": check_time_derivative,
    "prop4": check_fields,
    "gradcheck": check_gradients,
    "poisson1d": check_poisson,
}


def run_all(suites=None, emit=print) -> list[CheckResult]:
    results = []
    for name in suites or SUITES:
        for r in SUITES[name]():
            emit(r.line())
            results.append(r)
    return results
