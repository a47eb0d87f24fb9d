"""Evaluation: density grids, OOD ranking, energy histograms and sample distances.

Log-densities are only ever defined up to an additive constant, so every
metric here is invariant to shifting the scores.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from .autodiff import EnergyModel, input_grad

__all__ = [
    "DensityGrid",
    "density_grid",
    "grid_coverage",
    "auroc",
    "EnergyHistogram",
    "energy_histogram",
    "histogram_intersection",
    "energy_distance",
    "poincare_ratio",
    "write_grid_csv",
    "write_heatmap_pgm",
    "write_histogram_csv",
    "write_scores_csv",
]


@dataclass
class DensityGrid:
    """Log-density (up to a constant) on a regular grid of cell centers.

    ``values[i, j]`` belongs to the cell centered at ``(xs[j], ys[i])``, so
    rows run along y and columns along x.
    """

    bounds: tuple[float, float, float, float]  # x_min, x_max, y_min, y_max
    resolution: tuple[int, int]  # (nx, ny)
    values: np.ndarray
    source: str

    @property
    def xs(self) -> np.ndarray:
        x0, x1, _, _ = self.bounds
        nx = self.resolution[0]
        h = (x1 - x0) / nx
        return x0 + h * (np.arange(nx) + 0.5)

    @property
    def ys(self) -> np.ndarray:
        _, _, y0, y1 = self.bounds
        ny = self.resolution[1]
        h = (y1 - y0) / ny
        return y0 + h * (np.arange(ny) + 0.5)

    def centers(self) -> np.ndarray:
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def cell_index(self, points) -> np.ndarray:
        """Flat cell index per point; -1 for points outside the bounds."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        x0, x1, y0, y1 = self.bounds
        nx, ny = self.resolution
        ix = np.floor((pts[:, 0] - x0) / (x1 - x0) * nx).astype(np.int64)
        iy = np.floor((pts[:, 1] - y0) / (y1 - y0) * ny).astype(np.int64)
        inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        return np.where(inside, iy * nx + ix, -1)

    def argmax_center(self) -> np.ndarray:
        return self.centers()[int(np.argmax(self.values))]


def _resolution(resolution) -> tuple[int, int]:
    nx, ny = (resolution, resolution) if np.isscalar(resolution) else resolution
    nx, ny = int(nx), int(ny)
    if nx < 2 or ny < 2:
        raise ValueError("grid resolution must be at least 2 per axis")
    return nx, ny


def density_grid(source, bounds=(-3.0, 3.0, -3.0, 3.0), resolution=120, chunk: int = 8192) -> DensityGrid:
    """Evaluate a log-density source on the cell centers of a regular grid.

    ``source`` is a BoltzmannEnergy (anything with ``.energy``) or a
    MixtureOracle paired with a time: ``(oracle, t)``.
    """
    nx, ny = _resolution(resolution)
    x0, x1, y0, y1 = (float(b) for b in bounds)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate bounds {bounds}")
    grid = DensityGrid((x0, x1, y0, y1), (nx, ny), np.empty((ny, nx)), "")
    pts = grid.centers()
    if isinstance(source, tuple):
        oracle, t = source
        fn, name = (lambda p: oracle.log_density(p, t)), "mixture_oracle"
    else:
        fn, name = source.energy, "boltzmann_energy"
    vals = np.concatenate([fn(pts[i : i + chunk]) for i in range(0, len(pts), chunk)])
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("density grid contains non-finite values")
    grid.values = vals.reshape(ny, nx)
    grid.source = name
    return grid


def grid_coverage(grid: DensityGrid, points, top_fraction: float = 0.1) -> float:
    """Fraction of points whose cell is among the top ``top_fraction`` cells by value.

    Points outside the grid count as uncovered.
    """
    if not 0 < top_fraction <= 1:
        raise ValueError("top_fraction must lie in (0, 1]")
    flat = grid.values.ravel()
    n_top = max(1, int(round(top_fraction * flat.size)))
    top = np.zeros(flat.size, dtype=bool)
    top[np.argsort(flat, kind="stable")[-n_top:]] = True
    idx = grid.cell_index(points)
    hit = np.where(idx >= 0, top[np.clip(idx, 0, None)], False)
    return float(np.mean(hit))


def auroc(scores_in, scores_out) -> float:
    """P(score_in > score_out) + 1/2 P(tie), via the Mann-Whitney U statistic.

    Higher scores are taken to mean "more in-distribution".
    """
    a = np.asarray(scores_in, dtype=np.float64).ravel()
    b = np.asarray(scores_out, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("auroc needs non-empty score lists")
    ranks = rankdata(np.concatenate([a, b]))  # average ranks resolve ties as 1/2
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


@dataclass
class EnergyHistogram:
    edges: np.ndarray
    counts: dict[str, np.ndarray]

    def normalized(self, name: str) -> np.ndarray:
        c = self.counts[name].astype(np.float64)
        return c / c.sum() if c.sum() > 0 else c


def energy_histogram(energies: dict[str, np.ndarray], bins: int = 50, value_range=None) -> EnergyHistogram:
    """Histogram several energy sets on one shared set of bin edges."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not energies:
        raise ValueError("no energy sets given")
    arrays = {k: np.asarray(v, dtype=np.float64).ravel() for k, v in energies.items()}
    if value_range is None:
        allv = np.concatenate(list(arrays.values()))
        lo, hi = float(allv.min()), float(allv.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        value_range = (lo, hi)
    edges = np.histogram_bin_edges([], bins=bins, range=value_range)
    counts = {k: np.histogram(v, bins=edges)[0] for k, v in arrays.items()}
    return EnergyHistogram(edges, counts)


def histogram_intersection(hist: EnergyHistogram, a: str, b: str) -> float:
    """sum_i min(p_i, q_i) of the two normalized histograms, in [0, 1]."""
    return float(np.minimum(hist.normalized(a), hist.normalized(b)).sum())


def energy_distance(a, b) -> float:
    """2 E|A - B| - E|A - A'| - E|B - B'| (V-statistic, so exactly 0 for equal sets)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("energy distance needs non-empty sample sets")
    d = 2.0 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean()
    return max(float(d), 0.0)


def poincare_ratio(model: EnergyModel, x, t, c=None, floor: float = 1e-300) -> float:
    """mean |grad_x Phi|^2 / mean Phi^2; NaN when the denominator is below ``floor``."""
    phi, gx, _ = input_grad(model, x, t, c, create_graph=False)
    den = float((phi**2).mean())
    if not den > floor:
        return float("nan")
    return float((gx**2).sum(dim=1).mean()) / den


# -- exports -------------------------------------------------------------------


def write_grid_csv(path, grid: DensityGrid) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pts = grid.centers()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "logp"])
        for (x, y), v in zip(pts, grid.values.ravel()):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])
    return path


def write_heatmap_pgm(path, grid: DensityGrid) -> Path:
    """8-bit binary graymap; bright = high log-density, top row = largest y."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    v = grid.values
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    img = np.flipud(np.round(255 * scaled).astype(np.uint8))
    ny, nx = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return path


def write_histogram_csv(path, hist: EnergyHistogram) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(hist.counts)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", *names])
        for i in range(len(hist.edges) - 1):
            w.writerow([repr(float(hist.edges[i])), repr(float(hist.edges[i + 1])), *[int(hist.counts[n][i]) for n in names]])
    return path


def write_scores_csv(path, scores: dict[str, np.ndarray]) -> Path:
    """Rows of (set, index, score)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["set", "index", "score"])
        for name, vals in scores.items():
            for i, s in enumerate(np.asarray(vals).ravel()):
                w.writerow([name, i, repr(float(s))])
    return path
