"""Synthetic 2D datasets and the Gaussian prior.

Every generator is a pure function of (name, params, seed). Coordinates are
unit-order; bounding boxes (noise-free support, before additive noise):

    two_moons            [-1.5, 1.5] x [-0.75, 0.75]  (moons centered at the origin)
    gaussian_mixture_k   radius-2 circle of k means, std 0.2 per component
    checkerboard         [-2, 2]^2, 8 of the 16 unit cells filled
    spirals              radius <= 2, two interleaved arms

Noise is additive Gaussian; with the default noise levels all points stay
inside [-4, 4]^2 with overwhelming probability.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset2D",
    "DataSplits",
    "generate",
    "prior_sample",
    "write_points_csv",
    "read_points_csv",
    "DATASETS",
]

DATASETS = ("two_moons", "gaussian_mixture", "checkerboard", "spirals")
MOONS_CENTER = np.array([0.5, 0.25])


@dataclass(frozen=True)
class Dataset2D:
    name: str = "two_moons"
    noise: float = 0.05
    components: int = 4
    seed: int = 0
    n_train: int = 20000
    n_test: int = 5000

    def __post_init__(self):
        name = self.name
        if name.startswith("gaussian_mixture_"):
            k = int(name.rsplit("_", 1)[1])
            object.__setattr__(self, "name", "gaussian_mixture")
            object.__setattr__(self, "components", k)
        if self.name not in DATASETS:
            raise ValueError(f"unknown dataset {name!r}; expected one of {DATASETS}")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.components < 1:
            raise ValueError("components must be >= 1")
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError("split sizes must be positive")


@dataclass
class DataSplits:
    train: np.ndarray
    test: np.ndarray
    train_labels: np.ndarray | None = None
    test_labels: np.ndarray | None = None
    num_classes: int = 0
    meta: dict = field(default_factory=dict)


def _two_moons(n, noise, rng):
    labels = rng.integers(0, 2, size=n)
    theta = rng.uniform(0.0, np.pi, size=n)
    upper = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    lower = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
    pts = np.where(labels[:, None] == 0, upper, lower) - MOONS_CENTER
    return pts + noise * rng.standard_normal((n, 2)), labels


def _gaussian_mixture(n, noise, k, rng):
    labels = rng.integers(0, k, size=n)
    angles = 2 * np.pi * np.arange(k) / k
    means = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return means[labels] + noise * rng.standard_normal((n, 2)), labels


def mixture_means(k: int) -> np.ndarray:
    angles = 2 * np.pi * np.arange(k) / k
    return 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _checkerboard(n, noise, rng):
    # cells (i, j) in {0..3}^2 with i + j even
    cells = np.array([(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0])
    labels = rng.integers(0, len(cells), size=n)
    pts = cells[labels] + rng.uniform(0.0, 1.0, size=(n, 2)) - 2.0
    return pts + noise * rng.standard_normal((n, 2)), labels


def _spirals(n, noise, rng):
    labels = rng.integers(0, 2, size=n)
    s = np.sqrt(rng.uniform(0.0, 1.0, size=n))
    angle = 3 * np.pi * s + np.pi * labels
    pts = 2.0 * s[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return pts + noise * rng.standard_normal((n, 2)), labels


def _draw(d: Dataset2D, n: int, rng: np.random.Generator):
    if d.name == "two_moons":
        return _two_moons(n, d.noise, rng)
    if d.name == "gaussian_mixture":
        return _gaussian_mixture(n, d.noise if d.noise > 0 else 0.2, d.components, rng)
    if d.name == "checkerboard":
        return _checkerboard(n, d.noise, rng)
    return _spirals(n, d.noise, rng)


def num_classes(d: Dataset2D) -> int:
    return {"two_moons": 2, "gaussian_mixture": d.components, "checkerboard": 8, "spirals": 2}[d.name]


def generate(d: Dataset2D) -> DataSplits:
    """Train and held-out splits with class labels (moon / component / cell index).

    The two splits come from independent child streams of ``d.seed``.
    """
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(d.seed).spawn(2))
    train, train_labels = _draw(d, d.n_train, train_rng)
    test, test_labels = _draw(d, d.n_test, test_rng)
    return DataSplits(train, test, train_labels, test_labels, num_classes(d), {"dataset": d.name})


def prior_sample(n: int, count: int, omega: float, seed) -> np.ndarray:
    """i.i.d. draws from N(0, omega^2 I_n)."""
    if omega <= 0:
        raise ValueError(f"prior standard deviation must be positive, got {omega}")
    if count < 1 or n < 1:
        raise ValueError("count and dimension must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return omega * rng.standard_normal((count, n))


def write_points_csv(path, points, labels=None) -> Path:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [f"x{i + 1}" for i in range(points.shape[1])]
    if labels is not None:
        header.append("label")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, row in enumerate(points):
            vals = [repr(float(v)) for v in row]
            if labels is not None:
                vals.append(str(int(labels[i])))
            writer.writerow(vals)
    return path


def read_points_csv(path):
    """Read ``x1,x2[,label]`` CSV; returns (points, labels or None)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    coords = [i for i, h in enumerate(header) if h.startswith("x")]
    if not coords:
        raise ValueError(f"{path}: header must name coordinates x1, x2, ...")
    points = np.array([[float(r[i]) for i in coords] for r in rows], dtype=np.float64).reshape(-1, len(coords))
    labels = None
    if "label" in header:
        li = header.index("label")
        labels = np.array([int(r[li]) for r in rows], dtype=np.int64)
    return points, labels
