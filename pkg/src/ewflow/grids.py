"""2D density grids: midpoint quadrature, cell sampling, and TV distance."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .mixtures import GaussianMixture, gmm_density
from .rng import Rng

__all__ = ["DensityGrid", "grid_sample", "grid_tv_distance"]


@dataclass
class DensityGrid:
    """Nonnegative values on an n x n grid of cell centers over a rectangle.

    values[i, j] is the density at center (xs[j], ys[i]); row-major over y.
    A normalized grid satisfies sum(values) * cell_area == 1.
    """

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("grid values must be 2D")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("grid values must be finite and nonnegative")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid bounds must be nondegenerate")
        self.values = v

    @property
    def ny(self) -> int:
        return self.values.shape[0]

    @property
    def nx(self) -> int:
        return self.values.shape[1]

    @property
    def cell_area(self) -> float:
        return ((self.x_max - self.x_min) / self.nx) * ((self.y_max - self.y_min) / self.ny)

    @property
    def xs(self) -> np.ndarray:
        h = (self.x_max - self.x_min) / self.nx
        return self.x_min + h * (np.arange(self.nx) + 0.5)

    @property
    def ys(self) -> np.ndarray:
        h = (self.y_max - self.y_min) / self.ny
        return self.y_min + h * (np.arange(self.ny) + 0.5)

    def centers(self) -> np.ndarray:
        """All cell centers as an (nx*ny, 2) array, row-major over y."""
        XX, YY = np.meshgrid(self.xs, self.ys)
        return np.stack([XX.ravel(), YY.ravel()], axis=-1)

    def masses(self) -> np.ndarray:
        return self.values * self.cell_area

    def total_mass(self) -> float:
        return float(self.values.sum() * self.cell_area)

    def is_normalized(self, tol: float = 1e-3) -> bool:
        return abs(self.total_mass() - 1.0) <= tol

    def normalized(self) -> "DensityGrid":
        total = self.total_mass()
        if total <= 0:
            raise ValueError("cannot normalize a grid with zero mass")
        return DensityGrid(self.x_min, self.x_max, self.y_min, self.y_max, self.values / total)

    def cell_index(self, points: np.ndarray, clip: bool = True) -> tuple[np.ndarray, np.ndarray, float]:
        """Map points to (row, col) cell indices; returns the clipped fraction."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ix = np.floor((pts[:, 0] - self.x_min) / (self.x_max - self.x_min) * self.nx).astype(int)
        iy = np.floor((pts[:, 1] - self.y_min) / (self.y_max - self.y_min) * self.ny).astype(int)
        outside = (ix < 0) | (ix >= self.nx) | (iy < 0) | (iy >= self.ny)
        clipped = float(outside.mean()) if len(pts) else 0.0
        if not clip and clipped > 0:
            raise ValueError(f"{clipped:.1%} of points fall outside the grid bounds")
        return np.clip(iy, 0, self.ny - 1), np.clip(ix, 0, self.nx - 1), clipped

    @staticmethod
    def from_fn(fn, bounds, resolution: int = 256, normalize: bool = True) -> "DensityGrid":
        """Evaluate a density callable at cell centers (midpoint rule)."""
        (x_min, x_max), (y_min, y_max) = bounds
        grid = DensityGrid(x_min, x_max, y_min, y_max, np.zeros((resolution, resolution)))
        vals = np.asarray(fn(grid.centers()), dtype=float).reshape(resolution, resolution)
        grid.values = np.maximum(vals, 0.0)
        return grid.normalized() if normalize else grid

    @staticmethod
    def from_mixture(
        gmm: GaussianMixture, resolution: int = 256, pad_sigmas: float = 4.0, bounds=None
    ) -> "DensityGrid":
        """Grid over the mixture's bounding box expanded by pad_sigmas * max stddev."""
        if gmm.dim != 2:
            raise ValueError("density grids are 2D only")
        if bounds is None:
            bounds = mixture_bounds(gmm, pad_sigmas)
        return DensityGrid.from_fn(lambda p: gmm_density(gmm, p), bounds, resolution)

    def save(self, path) -> None:
        """One JSON header line, then row-major CSV of values."""
        header = json.dumps(
            {
                "bounds": [[self.x_min, self.x_max], [self.y_min, self.y_max]],
                "resolution": [self.ny, self.nx],
                "cell_area": self.cell_area,
            }
        )
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row in self.values:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    @staticmethod
    def load(path) -> "DensityGrid":
        with open(path) as fh:
            header = json.loads(fh.readline())
            rows = [list(map(float, line.split(","))) for line in fh if line.strip()]
        (x_min, x_max), (y_min, y_max) = header["bounds"]
        values = np.array(rows)
        if list(values.shape) != header["resolution"]:
            raise ValueError(f"value shape {values.shape} != declared {header['resolution']}")
        return DensityGrid(x_min, x_max, y_min, y_max, values)


def mixture_bounds(gmm: GaussianMixture, pad_sigmas: float = 4.0):
    max_sigma = float(np.sqrt(gmm.variances.max()))
    pad = pad_sigmas * max_sigma
    lo = gmm.means.min(axis=0) - pad
    hi = gmm.means.max(axis=0) + pad
    return (lo[0], hi[0]), (lo[1], hi[1])


def grid_sample(grid: DensityGrid, rng: Rng, n: int) -> np.ndarray:
    """Sample cells by their mass, then jitter uniformly within each cell."""
    if not grid.is_normalized():
        raise ValueError(f"grid is not normalized (total mass {grid.total_mass():.6f})")
    flat = grid.masses().ravel()
    idx = rng.categorical(flat, n)
    iy, ix = np.divmod(idx, grid.nx)
    hx = (grid.x_max - grid.x_min) / grid.nx
    hy = (grid.y_max - grid.y_min) / grid.ny
    u = rng.uniform(-0.5, 0.5, (n, 2))
    x = grid.xs[ix] + u[:, 0] * hx
    y = grid.ys[iy] + u[:, 1] * hy
    return np.stack([x, y], axis=-1)


def grid_tv_distance(samples: np.ndarray, grid: DensityGrid, return_clipped: bool = False):
    """Total variation between the empirical cell histogram and the grid masses.

    Points outside the bounds are clipped to the nearest boundary cell; the
    clipped fraction is available via return_clipped.
    """
    pts = np.atleast_2d(np.asarray(samples, dtype=float))
    if len(pts) == 0:
        raise ValueError("need at least one sample")
    iy, ix, clipped = grid.cell_index(pts)
    hist = np.zeros((grid.ny, grid.nx))
    np.add.at(hist, (iy, ix), 1.0)
    hist /= hist.sum()
    ref = grid.masses()
    ref = ref / ref.sum()
    tv = 0.5 * float(np.abs(hist - ref).sum())
    return (tv, clipped) if return_clipped else tv
