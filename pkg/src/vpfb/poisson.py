"""One-dimensional density-weighted Poisson problem at a fixed time.

At a fixed t the potential whose gradient transports the marginal density
solves

    d/dx ( rho_bar(x, t) dPhi/dx ) = -d rho_bar / dt (x, t),

and in 1D the flux rho_bar * Phi' is just the running integral of the
right-hand side. ``flux_solution`` integrates it on a grid (from the nearer
end, where the flux vanishes). ``ritz_solution`` instead minimizes the
variational loss over a piecewise-linear potential, giving an independent
route to the same gradient field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.integrate import cumulative_trapezoid
from torch import nn

from .autodiff import DTYPE, Architecture
from .loss import ritz_core_loss
from .perturbation import MixtureOracle, perturb
from .schedule import ScheduleParams, eval_schedule

__all__ = ["GridPotential", "PoissonSolution", "flux_solution", "ritz_solution", "relative_l2"]


class GridPotential(nn.Module):
    """Piecewise-linear Phi(x) on a uniform 1D grid, parameterized by cell slopes.

    Phi(nodes[0]) = offset and Phi'(x) = slopes[i] inside cell i. The time
    argument is ignored. Exposes ``arch`` so it plugs into ``input_grad``.
    """

    def __init__(self, nodes: np.ndarray):
        super().__init__()
        nodes = np.asarray(nodes, dtype=np.float64)
        if nodes.ndim != 1 or nodes.size < 3:
            raise ValueError("need a 1D grid of at least 3 nodes")
        h = np.diff(nodes)
        if not np.allclose(h, h[0], rtol=1e-9, atol=0.0):
            raise ValueError("grid must be uniform")
        self.h = float(h[0])
        self.x0 = float(nodes[0])
        self.register_buffer("nodes", torch.as_tensor(nodes, dtype=DTYPE))
        self.offset = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.slopes = nn.Parameter(torch.zeros(nodes.size - 1, dtype=DTYPE))
        self.arch = Architecture(dim=1, hidden=(), time_embedding="none")

    @property
    def n_cells(self) -> int:
        return self.slopes.numel()

    def node_values(self) -> torch.Tensor:
        return _node_values(self.h, self.offset, self.slopes)

    def forward(self, x, t=None, c=None):
        return _interpolate(self, self.offset, self.slopes, x)


def _node_values(h: float, offset: torch.Tensor, slopes: torch.Tensor) -> torch.Tensor:
    return offset + torch.cat([offset.new_zeros(1), torch.cumsum(slopes * h, 0)])


def _interpolate(grid: GridPotential, offset, slopes, x: torch.Tensor) -> torch.Tensor:
    x = x.reshape(-1)
    with torch.no_grad():
        cell = torch.clamp(((x - grid.x0) / grid.h).floor().long(), 0, grid.n_cells - 1)
    return _node_values(grid.h, offset, slopes)[cell] + slopes[cell] * (x - grid.nodes[cell])


@dataclass
class PoissonSolution:
    x: np.ndarray  # evaluation points
    grad: np.ndarray  # dPhi/dx at x
    density: np.ndarray  # rho_bar at x


def _grid(lo: float, hi: float, n_nodes: int) -> np.ndarray:
    if n_nodes < 3 or not hi > lo:
        raise ValueError("need hi > lo and at least 3 nodes")
    return np.linspace(lo, hi, n_nodes)


def flux_solution(data, t: float, p: ScheduleParams, lo=-6.0, hi=6.0, n_nodes=501) -> PoissonSolution:
    """Phi' at the cell midpoints from the integrated right-hand side.

    The right-hand side is integrated with the trapezoid rule on the grid
    refined by its midpoints. The flux is accumulated from the left end on
    the left half and from the right end on the right half, so each half only
    integrates over tails where the flux is tiny rather than cancelling two
    large contributions.
    """
    oracle = MixtureOracle(np.asarray(data, dtype=np.float64).reshape(-1, 1), p)
    nodes = _grid(lo, hi, n_nodes)
    fine = np.linspace(lo, hi, 2 * n_nodes - 1)
    rhs = -oracle.time_derivative(fine[:, None], t)
    from_left = cumulative_trapezoid(rhs, fine, initial=0.0)
    # integrating over the reversed grid already yields -int_x^hi rhs
    from_right = cumulative_trapezoid(rhs[::-1], fine[::-1], initial=0.0)[::-1]
    mid = 0.5 * (nodes[:-1] + nodes[1:])
    flux = np.where(fine < 0.5 * (lo + hi), from_left, from_right)[1::2]
    dens = oracle.density(mid[:, None], t)
    return PoissonSolution(mid, flux / dens, dens)


def quadrature_batch(data, t: float, p: ScheduleParams, points: np.ndarray):
    """Every (point, data item) pair at time t, weighted by p_k rho(x | x_bar_k, t) dx."""
    data = np.asarray(data, dtype=np.float64).reshape(-1, 1)
    K, N = data.shape[0], points.size
    x = np.repeat(points, K)[:, None]
    x_bar = np.tile(data, (N, 1))
    oracle = MixtureOracle(data, p)
    comp = np.exp(oracle._component_log_pdf(points[:, None], t)).ravel()  # (N, K) row-major
    dx = float(points[1] - points[0])
    # x = mu x_bar + sigma eps  =>  eps = (x - mu x_bar) / sigma
    ev = eval_schedule(t, p)
    eps = (x - float(ev.mu) * x_bar) / float(ev.sigma)
    batch = perturb(x_bar, eps, np.full(N * K, t), p)
    return batch, comp * dx / K


def ritz_solution(data, t: float, p: ScheduleParams, lo=-6.0, hi=6.0, n_nodes=501,
                  centering: str = "innovation") -> PoissonSolution:
    """Minimize the Ritz loss over a piecewise-linear potential on the grid.

    The loss is quadratic in the parameters, so one Newton step from zero
    reaches the minimizer. The Hessian comes from autograd; it is
    Jacobi-scaled (the weights span many orders of magnitude across the
    grid) and solved in the least-squares sense because the offset is a
    null direction.
    """
    nodes = _grid(lo, hi, n_nodes)
    model = GridPotential(nodes)
    mid = 0.5 * (nodes[:-1] + nodes[1:])
    batch, weights = quadrature_batch(data, t, p, mid)
    params = list(model.parameters())
    sizes = [q.numel() for q in params]

    def loss_of(flat: torch.Tensor) -> torch.Tensor:
        offset, slopes = torch.split(flat, sizes)
        probe = _FunctionalGrid(model, offset.reshape(()), slopes)
        return ritz_core_loss(probe, batch, p, weights=weights, centering=centering)

    theta0 = torch.zeros(sum(sizes), dtype=DTYPE)
    grad = torch.autograd.functional.jacobian(loss_of, theta0)
    hess = torch.autograd.functional.hessian(loss_of, theta0)
    g, H = grad.numpy(), hess.numpy()
    d = np.abs(np.diag(H))
    scale = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    Hs = scale[:, None] * H * scale[None, :]
    step, *_ = np.linalg.lstsq(Hs, -scale * g, rcond=1e-14)
    theta = scale * step
    with torch.no_grad():
        model.offset.copy_(torch.as_tensor(theta[0]))
        model.slopes.copy_(torch.as_tensor(theta[1:]))
    oracle = MixtureOracle(np.asarray(data, dtype=np.float64).reshape(-1, 1), p)
    return PoissonSolution(mid, model.slopes.detach().numpy().copy(), oracle.density(mid[:, None], t))


class _FunctionalGrid(nn.Module):
    """GridPotential evaluated with externally supplied (differentiable) parameters."""

    def __init__(self, base: GridPotential, offset: torch.Tensor, slopes: torch.Tensor):
        super().__init__()
        self.base = base
        self.arch = base.arch
        self._offset = offset
        self._slopes = slopes

    def forward(self, x, t=None, c=None):
        return _interpolate(self.base, self._offset, self._slopes, x)


def relative_l2(a: np.ndarray, ref: np.ndarray, mask: np.ndarray | None = None) -> float:
    """|a - ref|_2 / |ref|_2 over the masked entries."""
    a = np.asarray(a, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if mask is not None:
        a, ref = a[mask], ref[mask]
    return float(np.linalg.norm(a - ref) / np.linalg.norm(ref))
