"""Training objectives: the variational potential-flow loss and its ablations.

Per batch the loss is

    Cov[Phi, w(t) gamma]                        (magnitude, Deep Ritz source term)
  - mean cos(grad_x Phi, v_cond)                (direction)
  + mean |grad_x Phi|^2 + mean |dPhi/dt|^2      (Ritz energy, quasi-stationarity)
  + eta mean Phi^2                              (Poincare regularization)

The covariance can be centered two ways. ``centering="batch"`` is the plain
unbiased sample covariance of Phi and w*gamma. ``centering="innovation"``
centers w*gamma by its exact per-sample kernel mean w*gamma_bar(x_bar, t), which
makes the estimator unbiased for E[Phi w (gamma - gamma_bar)], the form whose
minimizer solves the density-weighted Poisson equation for any dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch

from .autodiff import DTYPE, EnergyModel, input_grad
from .perturbation import PerturbedBatch
from .schedule import ScheduleParams

__all__ = [
    "LossConfig",
    "LossBreakdown",
    "NumericalError",
    "ABLATIONS",
    "ablation_config",
    "batch_loss",
    "flow_matching_loss",
    "ritz_core_loss",
    "weighted_covariance",
]


class NumericalError(FloatingPointError):
    """A loss term became non-finite."""

    def __init__(self, term: str, detail: str = ""):
        self.term = term
        super().__init__(f"non-finite value in loss term {term!r}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class LossConfig:
    objective: str = "vpfb"  # "vpfb" | "flow_matching"
    use_covariance: bool = True
    alignment: str = "cosine"  # "cosine" | "inner_product" | "none"
    use_grad_norm: bool = True
    use_time_grad: bool = True
    use_poincare: bool = True
    centering: str = "innovation"  # "innovation" | "batch"
    covariance_scale: float = 1.0
    eps_norm: float = 1e-8

    def __post_init__(self):
        if self.objective not in ("vpfb", "flow_matching"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.alignment not in ("cosine", "inner_product", "none"):
            raise ValueError(f"unknown alignment {self.alignment!r}")
        if self.centering not in ("innovation", "batch"):
            raise ValueError(f"unknown centering {self.centering!r}")
        if self.eps_norm <= 0:
            raise ValueError("eps_norm must be positive")


# Loss-configuration ablations (A)-(E)
ABLATIONS = {
    "A": {},
    "B": {"use_covariance": False},
    "C": {"alignment": "none"},
    "D": {"alignment": "inner_product"},
    "E": {"objective": "flow_matching"},
}


def ablation_config(name: str, base: LossConfig | None = None) -> LossConfig:
    base = base or LossConfig()
    try:
        changes = ABLATIONS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}") from None
    values = {f.name: getattr(base, f.name) for f in fields(base)}
    values.update(changes)
    return LossConfig(**values)


@dataclass
class LossBreakdown:
    covariance_term: torch.Tensor
    alignment_term: torch.Tensor
    grad_norm_term: torch.Tensor
    time_grad_term: torch.Tensor
    poincare_term: torch.Tensor
    total: torch.Tensor
    # monitored quantity, not part of the objective
    poincare_ratio: float = float("nan")

    TERMS = ("covariance_term", "alignment_term", "grad_norm_term", "time_grad_term", "poincare_term")

    def as_floats(self) -> dict[str, float]:
        out = {name: float(getattr(self, name).detach()) for name in (*self.TERMS, "total")}
        out["poincare_ratio"] = self.poincare_ratio
        return out


def _tensor(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=DTYPE)


def weighted_covariance(a: torch.Tensor, b: torch.Tensor, weights: torch.Tensor | None = None,
                        b_center: torch.Tensor | None = None) -> torch.Tensor:
    """Covariance of ``a`` and ``b``.

    Unweighted: unbiased sample covariance (divisor B - 1). Weighted: weights
    are normalized and act as quadrature weights (no bias correction).
    ``b_center`` replaces the sample mean of ``b`` with known per-sample means.
    """
    if weights is None:
        if a.shape[0] < 2:
            raise ValueError("covariance needs at least two samples")
        b_res = b - (b.mean() if b_center is None else b_center)
        return ((a - a.mean()) * b_res).sum() / (a.shape[0] - 1)
    wts = weights / weights.sum()
    b_res = b - ((wts * b).sum() if b_center is None else b_center)
    return (wts * (a - (wts * a).sum()) * b_res).sum()


def _check(name: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.all(torch.isfinite(value)):
        raise NumericalError(name, f"value={value.detach().flatten()[:4].tolist()}")
    return value


def _labels(model: EnergyModel, batch: PerturbedBatch):
    return batch.labels if model.arch.num_classes else None


def batch_loss(model: EnergyModel, batch: PerturbedBatch, cfg: LossConfig, p: ScheduleParams) -> LossBreakdown:
    """Assemble the configured loss over one perturbed batch."""
    if len(batch) < 2:
        raise ValueError("batch_loss needs a batch of at least 2 samples")
    phi, gx, gt = input_grad(model, batch.x, batch.t, _labels(model, batch))
    _check("phi", phi)
    zero = phi.new_zeros(())
    v = _tensor(batch.v_cond)
    gx_sq = (gx**2).sum(dim=1)

    if cfg.objective == "flow_matching":
        fm = _check("alignment_term", ((gx - v) ** 2).sum(dim=1).mean())
        out = LossBreakdown(zero, fm, zero, zero, zero, fm)
    else:
        cov = align = gnorm = tnorm = poinc = zero
        if cfg.use_covariance:
            w = _tensor(batch.w)
            center = w * _tensor(batch.gamma_mean) if cfg.centering == "innovation" else None
            cov = cfg.covariance_scale * weighted_covariance(phi, w * _tensor(batch.gamma), b_center=center)
            _check("covariance_term", cov)
        if cfg.alignment == "cosine":
            num = (gx * v).sum(dim=1)
            den = (gx_sq.sqrt() + cfg.eps_norm) * (v.norm(dim=1) + cfg.eps_norm)
            align = _check("alignment_term", -(num / den).mean())
        elif cfg.alignment == "inner_product":
            align = _check("alignment_term", -(gx * v).sum(dim=1).mean())
        if cfg.use_grad_norm:
            gnorm = _check("grad_norm_term", gx_sq.mean())
        if cfg.use_time_grad:
            tnorm = _check("time_grad_term", (gt**2).mean())
        if cfg.use_poincare:
            poinc = _check("poincare_term", p.eta * (phi**2).mean())
        total = cov + align + gnorm + tnorm + poinc
        out = LossBreakdown(cov, align, gnorm, tnorm, poinc, total)

    _check("total", out.total)
    with torch.no_grad():
        phi_sq = float((phi**2).mean())
        out.poincare_ratio = float(gx_sq.mean()) / phi_sq if phi_sq > 1e-300 else float("nan")
    return out


def flow_matching_loss(model: EnergyModel, batch: PerturbedBatch) -> torch.Tensor:
    """mean |grad_x Phi - v_cond|^2."""
    if len(batch) < 2:
        raise ValueError("flow_matching_loss needs a batch of at least 2 samples")
    _, gx, _ = input_grad(model, batch.x, batch.t, _labels(model, batch))
    return _check("flow_matching", ((gx - _tensor(batch.v_cond)) ** 2).sum(dim=1).mean())


def ritz_core_loss(model, batch: PerturbedBatch, p: ScheduleParams, weights=None,
                   centering: str = "innovation") -> torch.Tensor:
    """Pure Deep Ritz objective at one shared time: Cov[Phi, gamma] + E|grad_x Phi|^2.

    ``weights`` turns the batch into a quadrature rule (normalized internally).
    """
    t = np.asarray(batch.t)
    if t.size and np.ptp(t) > 0:
        raise ValueError("ritz_core_loss requires a single shared time across the batch")
    if len(batch) < 2:
        raise ValueError("ritz_core_loss needs at least 2 samples")
    phi, gx, _ = input_grad(model, batch.x, batch.t, _labels(model, batch))
    wts = None if weights is None else _tensor(weights)
    center = _tensor(batch.gamma_mean) if centering == "innovation" else None
    cov = weighted_covariance(phi, _tensor(batch.gamma), wts, b_center=center)
    gsq = (gx**2).sum(dim=1)
    grad_term = gsq.mean() if wts is None else (wts / wts.sum() * gsq).sum()
    return _check("ritz", cov + grad_term)
