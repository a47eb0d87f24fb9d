"""Samplers: deterministic potential flow and Langevin dynamics on the Boltzmann energy.

Integrators work on plain numpy arrays through a ``field(x, t) -> dx/dt``
callable so they can be checked against closed-form linear flows.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .autodiff import DTYPE, EnergyModel, input_grad
from .schedule import ScheduleParams, clamp_time, stationary_coefficients

__all__ = [
    "OdeConfig",
    "SgldConfig",
    "OdeResult",
    "SgldResult",
    "StepSizeUnderflow",
    "SamplerDivergence",
    "BoltzmannEnergy",
    "potential_field",
    "integrate",
    "flow_sample",
    "sgld_sample",
    "write_trajectories_csv",
    "write_diagnostics_csv",
]

log = logging.getLogger(__name__)

Field = Callable[[np.ndarray, float], np.ndarray]


class StepSizeUnderflow(RuntimeError):
    pass


class SamplerDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class OdeConfig:
    method: str = "adaptive_rk45"  # "euler" | "rk4" | "adaptive_rk45"
    t_start: float = 0.0
    horizon: float = 1.575
    steps: int = 200
    rtol: float = 1e-5
    atol: float = 1e-6
    max_steps: int = 100_000
    record_trajectory: bool = False
    record_every: int = 1

    def __post_init__(self):
        if self.method not in ("euler", "rk4", "adaptive_rk45"):
            raise ValueError(f"unknown ODE method {self.method!r}")
        if self.horizon <= self.t_start:
            raise ValueError("horizon must exceed t_start")
        if self.steps < 1 or self.rtol <= 0 or self.atol <= 0:
            raise ValueError("steps and tolerances must be positive")


@dataclass(frozen=True)
class SgldConfig:
    step_size: float = 1e-7
    steps: int = 5000
    temperature: float = 0.35
    init: str = "prior"  # "prior" | "ode_output"
    max_radius: float = 1e3
    record_every: int = 0  # 0 disables trajectory recording

    def __post_init__(self):
        if self.step_size <= 0 or self.temperature <= 0:
            raise ValueError("SGLD step size and temperature must be positive")
        if self.init not in ("prior", "ode_output"):
            raise ValueError(f"unknown SGLD init {self.init!r}")
        if self.steps < 1:
            raise ValueError("SGLD needs at least one step")


@dataclass
class OdeResult:
    samples: np.ndarray
    times: np.ndarray
    trajectory: list[np.ndarray] = field(default_factory=list)
    n_evals: int = 0
    n_steps: int = 0


@dataclass
class SgldResult:
    samples: np.ndarray
    grad_norm: np.ndarray  # per-step mean |grad Phi_B|^2
    energy_norm: np.ndarray  # per-step mean Phi_B^2
    trajectory: list[np.ndarray] = field(default_factory=list)


def _model_labels(model: EnergyModel, n: int, classes):
    if not model.arch.num_classes:
        return [None]
    if classes is None:
        raise ValueError("conditional model needs classes to sample from")
    return [torch.full((n,), int(c), dtype=torch.long) for c in np.atleast_1d(classes)]


def potential_field(model: EnergyModel, schedule: ScheduleParams, classes=None) -> Field:
    """grad_x Phi(x, min(t, t_max)); several classes are composed by averaging energies."""

    def fn(x: np.ndarray, t: float) -> np.ndarray:
        tc = clamp_time(t, schedule)
        grads = [
            input_grad(model, x, tc, c, create_graph=False)[1].numpy()
            for c in _model_labels(model, len(x), classes)
        ]
        return np.mean(grads, axis=0)

    return fn


# -- explicit integrators ------------------------------------------------------

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def _fixed_step(fn: Field, x, t0, t1, steps, method, record, every):
    h = (t1 - t0) / steps
    traj = [x.copy()] if record else []
    times = [t0]
    t = t0
    for i in range(steps):
        if method == "euler":
            x = x + h * fn(x, t)
        else:
            k1 = fn(x, t)
            k2 = fn(x + 0.5 * h * k1, t + 0.5 * h)
            k3 = fn(x + 0.5 * h * k2, t + 0.5 * h)
            k4 = fn(x + h * k3, t + h)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t0 + (i + 1) * h
        if record and ((i + 1) % every == 0 or i + 1 == steps):
            traj.append(x.copy())
            times.append(t)
    n_evals = steps * (1 if method == "euler" else 4)
    return OdeResult(x, np.array(times if record else [t0, t]), traj, n_evals, steps)


def _dopri5(fn: Field, x, t0, t1, cfg: OdeConfig):
    """Dormand-Prince 5(4) with a PI step-size controller (one step size for the batch)."""
    order = 5
    safety, fac_min, fac_max = 0.9, 0.2, 5.0
    beta1, beta2 = 0.7 / order, 0.4 / order
    t = t0
    k1 = fn(x, t)
    n_evals = 1
    # initial step from derivative scale
    scale = cfg.atol + cfg.rtol * np.abs(x)
    d0 = np.sqrt(np.mean((x / scale) ** 2))
    d1 = np.sqrt(np.mean((k1 / scale) ** 2))
    h = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-3
    h = min(h, t1 - t0)
    err_prev = 1e-4
    traj = [x.copy()] if cfg.record_trajectory else []
    times = [t0]
    n_steps = 0
    while t < t1:
        if n_steps >= cfg.max_steps:
            raise StepSizeUnderflow(f"exceeded {cfg.max_steps} steps at t={t:.6g}")
        h = min(h, t1 - t)
        if h < 1e-12 * max(1.0, abs(t)):
            raise StepSizeUnderflow(
                f"step size underflow h={h:.3g} at t={t:.6g}; state norm max={np.abs(x).max():.3g}"
            )
        ks = [k1]
        for stage in range(1, 7):
            xi = x + h * sum(a * k for a, k in zip(_A[stage], ks))
            ks.append(fn(xi, t + _C[stage] * h))
        n_evals += 6
        x_new = xi  # stage 7 evaluates at the 5th-order solution (FSAL)
        err_vec = h * sum(e * k for e, k in zip(_E, ks))
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(x), np.abs(x_new))
        # each row is an independent trajectory sharing the step size, so the
        # worst row's RMS error controls acceptance
        err = float(np.max(np.sqrt(np.mean((err_vec / scale) ** 2, axis=-1))))
        if not np.isfinite(err):
            raise StepSizeUnderflow(f"non-finite error estimate at t={t:.6g}")
        if err <= 1.0:
            t += h
            x = x_new
            k1 = ks[-1]
            n_steps += 1
            if cfg.record_trajectory and n_steps % cfg.record_every == 0:
                traj.append(x.copy())
                times.append(t)
            fac = safety * max(err, 1e-10) ** -beta1 * err_prev**beta2
            err_prev = max(err, 1e-4)
            h *= min(fac_max, max(fac_min, fac))
        else:
            h *= max(fac_min, safety * err ** (-1.0 / order))
    if cfg.record_trajectory and times[-1] != t:
        traj.append(x.copy())
        times.append(t)
    return OdeResult(x, np.array(times if cfg.record_trajectory else [t0, t]), traj, n_evals, n_steps)


def integrate(fn: Field, x0, cfg: OdeConfig) -> OdeResult:
    """Integrate dx/dt = fn(x, t) from cfg.t_start to cfg.horizon."""
    x = np.array(x0, dtype=np.float64, copy=True)
    if cfg.method == "adaptive_rk45":
        return _dopri5(fn, x, cfg.t_start, cfg.horizon, cfg)
    return _fixed_step(
        fn, x, cfg.t_start, cfg.horizon, cfg.steps, cfg.method, cfg.record_trajectory, cfg.record_every
    )


def flow_sample(model: EnergyModel, prior_draws, cfg: OdeConfig, schedule: ScheduleParams, classes=None) -> OdeResult:
    """Transport prior draws along dx/dt = grad_x Phi(x, min(t, t_max))."""
    return integrate(potential_field(model, schedule, classes), prior_draws, cfg)


# -- Boltzmann energy and SGLD -------------------------------------------------


@dataclass
class BoltzmannEnergy:
    """Phi_B(x) = (4 Phi_inf(x) + f_inf |x|^2) / g_inf^2 with Phi_inf(x) = Phi(x, t_max).

    ``classes`` composes a conditional model by averaging its class energies.
    """

    model: EnergyModel
    f_inf: float
    g_inf_sq: float
    t_inf: float
    classes: tuple[int, ...] | None = None

    @classmethod
    def from_model(cls, model: EnergyModel, schedule: ScheduleParams, classes=None) -> "BoltzmannEnergy":
        f_inf, g_inf_sq = stationary_coefficients(schedule)
        cl = None if classes is None else tuple(int(c) for c in np.atleast_1d(classes))
        return cls(model, f_inf, g_inf_sq, schedule.t_max, cl)

    def _phi_and_grad(self, x, need_grad: bool):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        labels = _model_labels(self.model, len(x), self.classes)
        phis, grads = [], []
        for c in labels:
            if need_grad:
                phi, gx, _ = input_grad(self.model, x, self.t_inf, c, create_graph=False)
                grads.append(gx.numpy())
            else:
                with torch.no_grad():
                    phi = self.model(torch.as_tensor(x, dtype=DTYPE), torch.full((len(x),), self.t_inf, dtype=DTYPE), c)
            phis.append(phi.numpy())
        return x, np.mean(phis, axis=0), (np.mean(grads, axis=0) if need_grad else None)

    def steady_potential(self, x) -> np.ndarray:
        return self._phi_and_grad(x, False)[1]

    def energy(self, x) -> np.ndarray:
        x, phi, _ = self._phi_and_grad(x, False)
        return (4.0 * phi + self.f_inf * np.sum(x**2, axis=1)) / self.g_inf_sq

    def grad(self, x) -> np.ndarray:
        x, _, g = self._phi_and_grad(x, True)
        return (4.0 * g + 2.0 * self.f_inf * x) / self.g_inf_sq

    def energy_and_grad(self, x):
        x, phi, g = self._phi_and_grad(x, True)
        e = (4.0 * phi + self.f_inf * np.sum(x**2, axis=1)) / self.g_inf_sq
        return e, (4.0 * g + 2.0 * self.f_inf * x) / self.g_inf_sq


def sgld_sample(energy_fn, init, cfg: SgldConfig, rng: np.random.Generator) -> SgldResult:
    """x <- x + dt grad Phi_B(x) + sqrt(2 dt) eps, eps ~ N(0, lambda^2 I).

    ``energy_fn`` is a BoltzmannEnergy or any object exposing
    ``energy_and_grad(x) -> (values, grads)``. Diagnostics are recorded at the
    state before each update.
    """
    x = np.array(init, dtype=np.float64, copy=True)
    grad_norm = np.empty(cfg.steps)
    energy_norm = np.empty(cfg.steps)
    traj = [x.copy()] if cfg.record_every else []
    noise_scale = np.sqrt(2.0 * cfg.step_size) * cfg.temperature
    for k in range(cfg.steps):
        e, g = energy_fn.energy_and_grad(x)
        grad_norm[k] = np.mean(np.sum(g**2, axis=1))
        energy_norm[k] = np.mean(e**2)
        x = x + cfg.step_size * g + noise_scale * rng.standard_normal(x.shape)
        radius = np.max(np.linalg.norm(x, axis=1))
        if not np.isfinite(radius) or radius > cfg.max_radius:
            raise SamplerDivergence(f"SGLD chain left radius {cfg.max_radius} at step {k} (max |x|={radius:.3g})")
        if cfg.record_every and (k + 1) % cfg.record_every == 0:
            traj.append(x.copy())
    return SgldResult(x, grad_norm, energy_norm, traj)


def write_trajectories_csv(path, trajectory: list[np.ndarray], times=None) -> Path:
    """One row per point per recorded step: step, chain, [t,] x1..xn."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = trajectory[0].shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "chain", *(["t"] if times is not None else []), *[f"x{i + 1}" for i in range(n)]])
        for s, pts in enumerate(trajectory):
            for c, row in enumerate(pts):
                w.writerow([s, c, *([repr(float(times[s]))] if times is not None else []), *[repr(float(v)) for v in row]])
    return path


def write_diagnostics_csv(path, grad_norm, energy_norm) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "grad_norm_mean", "energy_norm_mean"])
        for k, (g, e) in enumerate(zip(grad_norm, energy_norm)):
            w.writerow([k, repr(float(g)), repr(float(e))])
    return path
