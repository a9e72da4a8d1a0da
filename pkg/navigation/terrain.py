"""
Terrain — height field h_map(x1, x2) with exact first derivatives.

Three map families are provided:
  - PlaneMap: affine ground, the linear-Gaussian regime the Kalman oracle uses
  - GaussianFieldMap: sum of Gaussian bumps, the default experiment terrain
  - GridMap: bicubic spline through a sampled lattice, loaded from CSV

All maps evaluate on arrays of any shape so a whole particle cloud is
queried in one call. Maps are immutable once built.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.interpolate import RectBivariateSpline

from navigation.errors import GridParseError, OutOfHull, TooSmallLattice

logger = logging.getLogger(__name__)

MIN_GRID_NODES = 4
Bounds = Tuple[float, float, float, float]      # (x1_min, x1_max, x2_min, x2_max)


class TerrainMap(ABC):
    """Height field interface shared by every map family."""

    @abstractmethod
    def height(self, x1: ArrayLike, x2: ArrayLike, clamp: bool = False) -> NDArray:
        """Height in meters, broadcast over the inputs."""

    @abstractmethod
    def gradient(self, x1: ArrayLike, x2: ArrayLike, clamp: bool = False) -> Tuple[NDArray, NDArray]:
        """(dh/dx1, dh/dx2), broadcast over the inputs."""

    def hull_distance(self, x1: ArrayLike, x2: ArrayLike) -> NDArray:
        """Euclidean distance outside the valid domain (0 inside)."""
        return np.zeros(np.broadcast(np.asarray(x1), np.asarray(x2)).shape)


# ────────────────────────────────────────────────────────────
# Analytic maps
# ────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class PlaneMap(TerrainMap):
    """h = a * x1 + b * x2 + c."""

    a: float = 0.0
    b: float = 0.0
    c: float = 0.0

    def height(self, x1, x2, clamp=False):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, float), np.asarray(x2, float))
        return self.a * x1 + self.b * x2 + self.c

    def gradient(self, x1, x2, clamp=False):
        shape = np.broadcast(np.asarray(x1), np.asarray(x2)).shape
        return np.full(shape, float(self.a)), np.full(shape, float(self.b))


@dataclass(frozen=True)
class Bump:
    center: Tuple[float, float]
    amplitude: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"bump width must be positive, got {self.width}")


@dataclass(frozen=True)
class GaussianFieldMap(TerrainMap):
    """
    Sum of isotropic Gaussian bumps.

    Each bump contributes amplitude * exp(-r^2 / (2 * width^2)) where r is
    the horizontal distance to its center.
    """

    bumps: Tuple[Bump, ...] = ()

    def _terms(self, x1, x2):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, float), np.asarray(x2, float))
        if not self.bumps:
            zero = np.zeros(x1.shape + (0,))
            return zero, zero, zero, zero
        centers = np.array([b.center for b in self.bumps], dtype=float)
        amps = np.array([b.amplitude for b in self.bumps], dtype=float)
        widths = np.array([b.width for b in self.bumps], dtype=float)
        d1 = x1[..., None] - centers[:, 0]
        d2 = x2[..., None] - centers[:, 1]
        w2 = widths ** 2
        terms = amps * np.exp(-(d1 ** 2 + d2 ** 2) / (2.0 * w2))
        return terms, d1, d2, w2

    def height(self, x1, x2, clamp=False):
        terms, _, _, _ = self._terms(x1, x2)
        return terms.sum(axis=-1)

    def gradient(self, x1, x2, clamp=False):
        terms, d1, d2, w2 = self._terms(x1, x2)
        return (-(terms * d1 / w2).sum(axis=-1), -(terms * d2 / w2).sum(axis=-1))


# ────────────────────────────────────────────────────────────
# Grid map (bicubic spline)
# ────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class GridMap(TerrainMap):
    """
    Bicubic interpolation of heights sampled on a regular lattice.

    heights has shape (ny, nx): row j holds the samples at
    x2 = origin[1] + j * spacing, column i those at x1 = origin[0] + i * spacing.
    """

    origin: Tuple[float, float]
    spacing: float
    heights: NDArray = field(repr=False, compare=False)
    _spline: RectBivariateSpline = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        heights = np.asarray(self.heights, dtype=float)
        if heights.ndim != 2:
            raise GridParseError(f"height samples must be 2-D, got shape {heights.shape}")
        ny, nx = heights.shape
        if nx < MIN_GRID_NODES or ny < MIN_GRID_NODES:
            raise TooSmallLattice(f"lattice {nx}x{ny} is below the {MIN_GRID_NODES}x{MIN_GRID_NODES} bicubic support")
        if not self.spacing > 0:
            raise GridParseError(f"spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(heights)):
            raise GridParseError("height samples contain NaN or Inf")
        xs = self.origin[0] + self.spacing * np.arange(nx)
        ys = self.origin[1] + self.spacing * np.arange(ny)
        object.__setattr__(self, "heights", heights)
        object.__setattr__(self, "_spline", RectBivariateSpline(xs, ys, heights.T, kx=3, ky=3, s=0))

    @property
    def shape(self) -> Tuple[int, int]:
        ny, nx = self.heights.shape
        return nx, ny

    @property
    def bounds(self) -> Bounds:
        nx, ny = self.shape
        x0, y0 = self.origin
        return (x0, x0 + (nx - 1) * self.spacing, y0, y0 + (ny - 1) * self.spacing)

    def _prepare(self, x1, x2, clamp):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, float), np.asarray(x2, float))
        lo1, hi1, lo2, hi2 = self.bounds
        if clamp:
            return np.clip(x1, lo1, hi1), np.clip(x2, lo2, hi2)
        tol = 1e-9 * self.spacing
        outside = (x1 < lo1 - tol) | (x1 > hi1 + tol) | (x2 < lo2 - tol) | (x2 > hi2 + tol)
        if np.any(outside):
            raise OutOfHull(f"{int(np.count_nonzero(outside))} query point(s) outside grid hull {self.bounds}")
        return np.clip(x1, lo1, hi1), np.clip(x2, lo2, hi2)

    def _eval(self, x1, x2, dx=0, dy=0):
        values = self._spline.ev(x1.ravel(), x2.ravel(), dx=dx, dy=dy)
        return np.asarray(values, dtype=float).reshape(x1.shape)

    def height(self, x1, x2, clamp=False):
        x1, x2 = self._prepare(x1, x2, clamp)
        return self._eval(x1, x2)

    def gradient(self, x1, x2, clamp=False):
        x1, x2 = self._prepare(x1, x2, clamp)
        return self._eval(x1, x2, dx=1), self._eval(x1, x2, dy=1)

    def hull_distance(self, x1, x2):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, float), np.asarray(x2, float))
        lo1, hi1, lo2, hi2 = self.bounds
        d1 = np.maximum(lo1 - x1, 0.0) + np.maximum(x1 - hi1, 0.0)
        d2 = np.maximum(lo2 - x2, 0.0) + np.maximum(x2 - hi2, 0.0)
        return np.hypot(d1, d2)


# ────────────────────────────────────────────────────────────
# Point queries
# ────────────────────────────────────────────────────────────


def height_at(terrain: TerrainMap, x1: float, x2: float) -> float:
    """Height of the terrain at one horizontal position (m)."""
    return float(terrain.height(x1, x2))


def gradient_at(terrain: TerrainMap, x1: float, x2: float) -> Tuple[float, float]:
    """Exact slope (dh/dx1, dh/dx2) at one horizontal position."""
    g1, g2 = terrain.gradient(x1, x2)
    return float(g1), float(g2)


# ────────────────────────────────────────────────────────────
# Grid files
# ────────────────────────────────────────────────────────────


def load_grid(path: Union[str, Path]) -> GridMap:
    """
    Read a grid CSV file.

    The first line is `# origin_x,origin_y,spacing,nx,ny` with numeric
    values; ny rows of nx comma-separated heights follow, y increasing by row.

    Raises:
        GridParseError: malformed header or body.
        TooSmallLattice: fewer than 4 nodes along an axis.
    """
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if not header.startswith("#"):
                raise GridParseError(f"{path}: line 1 must start with '#'")
            fields = [f.strip() for f in header.lstrip("#").split(",")]
            if len(fields) != 5:
                raise GridParseError(f"{path}: line 1 needs 5 header fields, got {len(fields)}")
            x0, y0, spacing = (float(v) for v in fields[:3])
            nx, ny = int(fields[3]), int(fields[4])
            heights = np.loadtxt(fh, delimiter=",", ndmin=2, comments="#")
    except OSError as e:
        raise GridParseError(f"{path}: {e}") from e
    except ValueError as e:
        raise GridParseError(f"{path}: {e}") from e

    if nx < MIN_GRID_NODES or ny < MIN_GRID_NODES:
        raise TooSmallLattice(f"{path}: lattice {nx}x{ny} is below 4x4")
    if heights.shape != (ny, nx):
        raise GridParseError(f"{path}: header announces {ny}x{nx} samples, body has {heights.shape[0]}x{heights.shape[1]}")
    return GridMap(origin=(x0, y0), spacing=spacing, heights=heights)


def grid_nodes(bounds: Bounds, resolution: float) -> Tuple[NDArray, NDArray]:
    """Lattice coordinates covering bounds at the given spacing."""
    if not resolution > 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    x_min, x_max, y_min, y_max = (float(b) for b in bounds)
    if not np.all(np.isfinite([x_min, x_max, y_min, y_max])) or x_max < x_min or y_max < y_min:
        raise ValueError(f"invalid bounds {bounds}")
    nx = int(np.floor((x_max - x_min) / resolution + 1e-9)) + 1
    ny = int(np.floor((y_max - y_min) / resolution + 1e-9)) + 1
    return x_min + resolution * np.arange(nx), y_min + resolution * np.arange(ny)


def export_grid(terrain: TerrainMap, bounds: Bounds, resolution: float, path: Union[str, Path]) -> Path:
    """Sample a map on a lattice and write it in the grid CSV format."""
    xs, ys = grid_nodes(bounds, resolution)
    X1, X2 = np.meshgrid(xs, ys)                 # shape (ny, nx)
    heights = terrain.height(X1, X2)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"{float(xs[0])!r},{float(ys[0])!r},{float(resolution)!r},{xs.size},{ys.size}"
    np.savetxt(path, heights, delimiter=",", fmt="%.17g", header=header, comments="# ")
    logger.info("Exported %dx%d terrain grid to %s", xs.size, ys.size, path)
    return path


# ────────────────────────────────────────────────────────────
# Experiment terrain
# ────────────────────────────────────────────────────────────


def corridor_field(
    start: Sequence[float] = (0.0, 0.0),
    target: Sequence[float] = (2000.0, 0.0),
    lateral_offset: float = 300.0,
    amplitude: float = 40.0,
    width: float = 150.0,
    pitch: float = 250.0,
) -> GaussianFieldMap:
    """
    Flat corridor along the start-target line with a rough bump field on one side.

    Bumps sit on two rows parallel to the corridor, the nearest row at
    lateral_offset; amplitudes alternate between full and 60% so the field
    is not periodic along the corridor.
    """
    start, target = np.asarray(start, float), np.asarray(target, float)
    axis = target - start
    length = float(np.linalg.norm(axis))
    along = axis / length
    normal = np.array([-along[1], along[0]])
    bumps = []
    for i, s in enumerate(np.arange(pitch, length, pitch)):
        for row, offset in enumerate((lateral_offset, lateral_offset + width)):
            center = start + s * along + offset * normal
            amp = amplitude if (i + row) % 2 == 0 else 0.6 * amplitude
            bumps.append(Bump(center=(float(center[0]), float(center[1])), amplitude=amp, width=width))
    return GaussianFieldMap(bumps=tuple(bumps))
