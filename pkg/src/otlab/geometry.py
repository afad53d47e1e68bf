"""Uniform cell-centered grids on convex boxes and discrete calculus on them.

A :class:`Grid` covers a box in R^d (d = 1 or 2) with n cells per axis;
densities and potentials live as one value per cell, integrals are midpoint
sums, and gradients are central differences (one-sided at the boundary).
All objects are immutable after construction and every operation is a pure
function of its inputs, so evaluation order never changes results.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError

__all__ = [
    "Grid",
    "DensityField",
    "VectorField",
    "BoundaryFacet",
    "gradient",
    "tv_norm",
    "normalize",
    "random_smooth_density",
    "boundary_cells_and_normals",
    "interp_multilinear",
    "write_field_csv",
    "read_field_csv",
    "density_to_csv",
    "density_from_csv",
]


def _as_tuple(value, d: int) -> tuple:
    if np.isscalar(value):
        return (value,) * d
    out = tuple(value)
    if len(out) != d:
        raise ParameterError(f"expected {d} per-axis entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered grid on a box ``[lower, upper]`` per axis.

    Parameters
    ----------
    d : spatial dimension, 1 or 2.
    lower, upper : per-axis bounds (scalars are broadcast).
    n : per-axis cell count, at least 4.
    """

    d: int
    lower: tuple
    upper: tuple
    n: tuple

    def __init__(self, d: int, lower, upper, n):
        if d not in (1, 2):
            raise ParameterError(f"dimension must be 1 or 2, got {d}")
        lo = tuple(float(v) for v in _as_tuple(lower, d))
        hi = tuple(float(v) for v in _as_tuple(upper, d))
        nn = tuple(int(v) for v in _as_tuple(n, d))
        for a in range(d):
            if not hi[a] > lo[a]:
                raise ParameterError(f"axis {a}: upper must exceed lower ({lo[a]} .. {hi[a]})")
            if nn[a] < 4:
                raise ParameterError(f"axis {a}: need at least 4 cells, got {nn[a]}")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "n", nn)

    @property
    def spacing(self) -> tuple:
        """Cell width per axis."""
        return tuple((self.upper[a] - self.lower[a]) / self.n[a] for a in range(self.d))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def shape(self) -> tuple:
        return self.n

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.n))

    def axis_centers(self, a: int) -> np.ndarray:
        """Cell-center coordinates along one axis."""
        h = self.spacing[a]
        return self.lower[a] + h * (np.arange(self.n[a]) + 0.5)

    def cell_centers(self) -> np.ndarray:
        """All cell centers as an array of shape ``(num_cells, d)``, row-major."""
        axes = [self.axis_centers(a) for a in range(self.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    @property
    def enclosing_radius(self) -> float:
        """Radius of the smallest ball around the box center containing the box."""
        return 0.5 * float(np.hypot.reduce([self.upper[a] - self.lower[a] for a in range(self.d)]))

    @property
    def cost_radius(self) -> float:
        """Upper bound on |x - y| over the box: twice the enclosing radius."""
        return 2.0 * self.enclosing_radius

    def interior_mask(self, width: int = 1) -> np.ndarray:
        """Boolean mask of cells at least `width` cells away from every boundary."""
        mask = np.ones(self.shape, dtype=bool)
        for a in range(self.d):
            idx = np.arange(self.n[a])
            keep = (idx >= width) & (idx < self.n[a] - width)
            sl = [None] * self.d
            sl[a] = slice(None)
            mask &= keep[tuple(sl)]
        return mask

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        ok = np.ones(len(pts), dtype=bool)
        for a in range(self.d):
            ok &= (pts[:, a] >= self.lower[a]) & (pts[:, a] <= self.upper[a])
        return ok

    def clip(self, points: np.ndarray) -> np.ndarray:
        """Project points onto the closed box."""
        pts = np.array(np.atleast_2d(points), dtype=float)
        for a in range(self.d):
            np.clip(pts[:, a], self.lower[a], self.upper[a], out=pts[:, a])
        return pts


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DensityField:
    """Nonnegative cell values on one grid; unit total mass after :func:`normalize`."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ShapeError(f"values shape {vals.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise ShapeError("density values must be finite")
        if np.any(vals < 0):
            raise ShapeError("density values must be nonnegative")
        object.__setattr__(self, "values", _freeze(vals))

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def normalized(self) -> "DensityField":
        return normalize(self)

    def gradient(self) -> "VectorField":
        return gradient(self)

    def tv(self) -> float:
        return tv_norm(self)


@dataclass(frozen=True)
class VectorField:
    """One d-vector per cell, same layout as the grid."""

    grid: Grid
    components: np.ndarray = field(repr=False)

    def __post_init__(self):
        comp = np.asarray(self.components, dtype=float)
        expected = self.grid.shape + (self.grid.d,)
        if comp.shape != expected:
            raise ShapeError(f"components shape {comp.shape} != {expected}")
        if not np.all(np.isfinite(comp)):
            raise ShapeError("vector field entries must be finite")
        object.__setattr__(self, "components", _freeze(comp))

    @property
    def magnitude(self) -> np.ndarray:
        return np.sqrt((self.components**2).sum(axis=-1))


@dataclass(frozen=True)
class BoundaryFacet:
    """One boundary facet: owning cell index, outward unit normal, facet area."""

    index: tuple
    normal: np.ndarray
    area: float


def _field_values(field_like, grid: Grid | None = None) -> tuple[Grid, np.ndarray]:
    if isinstance(field_like, DensityField):
        return field_like.grid, field_like.values
    if grid is None:
        raise ShapeError("a bare array needs an explicit grid")
    vals = np.asarray(field_like, dtype=float)
    if vals.shape != grid.shape:
        raise ShapeError(f"values shape {vals.shape} != grid shape {grid.shape}")
    return grid, vals


def gradient(field_like, grid: Grid | None = None) -> VectorField:
    """Finite-difference gradient of a scalar grid function.

    Central differences at interior cells, first-order one-sided differences
    at boundary cells; exact for affine data away from the boundary.
    Accepts a :class:`DensityField` or a bare array plus its grid.
    """
    g, vals = _field_values(field_like, grid)
    # np.gradient with edge_order=1 is exactly this stencil.
    parts = np.gradient(vals, *g.spacing, edge_order=1)
    if g.d == 1:
        parts = [parts] if isinstance(parts, np.ndarray) else parts
    comp = np.stack(parts, axis=-1)
    return VectorField(g, comp)


def tv_norm(field_like, grid: Grid | None = None) -> float:
    """Discrete total variation: sum of |gradient| times cell volume."""
    g, _ = _field_values(field_like, grid)
    vf = gradient(field_like, grid)
    return float(vf.magnitude.sum() * g.cell_volume)


def normalize(density: DensityField) -> DensityField:
    """Scale to unit total mass. Raises on an all-zero field."""
    total = density.mass
    if total <= 0.0:
        raise DegenerateInputError("cannot normalize a field with zero total mass")
    return DensityField(density.grid, density.values / total)


def random_smooth_density(
    grid: Grid,
    seed: int,
    mode_count: int = 3,
    floor: float = 0.1,
) -> DensityField:
    """Strictly positive smooth test density, deterministic in the seed.

    Builds ``floor + |truncated random Fourier series|`` on the unit-scaled
    box and normalizes. ``floor > 0`` keeps the result bounded away from zero
    so gradient-of-cost conventions at vanishing arguments stay exercised by
    dedicated tests rather than dominating every instance.
    """
    if mode_count < 1:
        raise ParameterError("mode_count must be >= 1")
    if not floor > 0:
        raise ParameterError("floor must be positive")
    rng = np.random.default_rng(seed)
    hatted = [
        (grid.axis_centers(a) - grid.lower[a]) / (grid.upper[a] - grid.lower[a])
        for a in range(grid.d)
    ]
    vals = np.zeros(grid.shape)
    if grid.d == 1:
        x = hatted[0]
        for k in range(1, mode_count + 1):
            a_k, b_k = rng.standard_normal(2) / k
            vals += a_k * np.cos(np.pi * k * x) + b_k * np.sin(np.pi * k * x)
    else:
        x = hatted[0][:, None]
        y = hatted[1][None, :]
        for kx in range(mode_count + 1):
            for ky in range(mode_count + 1):
                if kx == 0 and ky == 0:
                    continue
                amp = rng.standard_normal() / (kx + ky)
                px, py = rng.uniform(0.0, 2.0 * np.pi, size=2)
                vals += amp * np.cos(np.pi * kx * x + px) * np.cos(np.pi * ky * y + py)
    raw = DensityField(grid, floor + np.abs(vals))
    return normalize(raw)


def boundary_cells_and_normals(grid: Grid) -> list[BoundaryFacet]:
    """Boundary facets of the box with outward unit normals and facet areas.

    Corner cells contribute one facet per touching side; facet areas add up
    to the boundary measure of the box (2 endpoints with weight 1 in 1D,
    the perimeter in 2D).
    """
    facets: list[BoundaryFacet] = []
    if grid.d == 1:
        n = grid.n[0]
        facets.append(BoundaryFacet((0,), _freeze(np.array([-1.0])), 1.0))
        facets.append(BoundaryFacet((n - 1,), _freeze(np.array([1.0])), 1.0))
        return facets
    nx, ny = grid.n
    hx, hy = grid.spacing
    for j in range(ny):
        facets.append(BoundaryFacet((0, j), _freeze(np.array([-1.0, 0.0])), hy))
        facets.append(BoundaryFacet((nx - 1, j), _freeze(np.array([1.0, 0.0])), hy))
    for i in range(nx):
        facets.append(BoundaryFacet((i, 0), _freeze(np.array([0.0, -1.0])), hx))
        facets.append(BoundaryFacet((i, ny - 1), _freeze(np.array([0.0, 1.0])), hx))
    return facets


def interp_multilinear(grid: Grid, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of cell-centered values at arbitrary points.

    Points beyond the outermost cell centers use the nearest-center value
    along that axis (constant extension).
    """
    vals = np.asarray(values, dtype=float)
    if vals.shape != grid.shape:
        raise ShapeError(f"values shape {vals.shape} != grid shape {grid.shape}")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    coords = []
    for a in range(grid.d):
        h = grid.spacing[a]
        # fractional index relative to the first cell center
        t = (pts[:, a] - (grid.lower[a] + 0.5 * h)) / h
        coords.append(np.clip(t, 0.0, grid.n[a] - 1.0))
    if grid.d == 1:
        t = coords[0]
        i0 = np.clip(np.floor(t).astype(int), 0, grid.n[0] - 2)
        w = t - i0
        return (1 - w) * vals[i0] + w * vals[i0 + 1]
    tx, ty = coords
    i0 = np.clip(np.floor(tx).astype(int), 0, grid.n[0] - 2)
    j0 = np.clip(np.floor(ty).astype(int), 0, grid.n[1] - 2)
    wx = tx - i0
    wy = ty - j0
    return (
        (1 - wx) * (1 - wy) * vals[i0, j0]
        + wx * (1 - wy) * vals[i0 + 1, j0]
        + (1 - wx) * wy * vals[i0, j0 + 1]
        + wx * wy * vals[i0 + 1, j0 + 1]
    )


# --- CSV layout: header "x[,y],value", row-major cell order, LF endings ---


def write_field_csv(path, grid: Grid, values: np.ndarray, value_header: str = "value") -> None:
    vals = np.asarray(values, dtype=float)
    if vals.shape != grid.shape:
        raise ShapeError(f"values shape {vals.shape} != grid shape {grid.shape}")
    centers = grid.cell_centers()
    flat = vals.reshape(-1)
    headers = ["x", "y"][: grid.d] + [value_header]
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(headers)
        for row_idx in range(len(flat)):
            writer.writerow(
                [repr(float(c)) for c in centers[row_idx]] + [repr(float(flat[row_idx]))]
            )


def _grid_from_axis(centers: np.ndarray) -> tuple[float, float, int]:
    n = len(centers)
    if n < 4:
        raise ParameterError(f"need at least 4 cells per axis in CSV, got {n}")
    h = (centers[-1] - centers[0]) / (n - 1)
    return float(centers[0] - 0.5 * h), float(centers[-1] + 0.5 * h), n


def read_field_csv(path) -> tuple[Grid, np.ndarray]:
    """Inverse of :func:`write_field_csv`; reconstructs the grid from centers."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(entry) for entry in row] for row in reader if row]
    d = len(header) - 1
    if d not in (1, 2):
        raise ParameterError(f"CSV must have 1 or 2 coordinate columns, found {d}")
    data = np.asarray(rows, dtype=float)
    if d == 1:
        lo, hi, n = _grid_from_axis(data[:, 0])
        grid = Grid(1, lo, hi, n)
        return grid, data[:, 1].copy()
    xs = np.unique(data[:, 0])
    ys = np.unique(data[:, 1])
    lox, hix, nx = _grid_from_axis(xs)
    loy, hiy, ny = _grid_from_axis(ys)
    grid = Grid(2, (lox, loy), (hix, hiy), (nx, ny))
    if len(data) != nx * ny:
        raise ParameterError("CSV rows do not form a full row-major grid")
    return grid, data[:, 2].reshape(nx, ny).copy()


def density_to_csv(path, density: DensityField) -> None:
    write_field_csv(path, density.grid, density.values)


def density_from_csv(path) -> DensityField:
    grid, values = read_field_csv(path)
    return DensityField(grid, values)


def as_density(grid: Grid, values) -> DensityField:
    """Convenience constructor used by generators and tests."""
    return DensityField(grid, np.asarray(values, dtype=float))


def fields_on_same_grid(*fields: Sequence) -> Grid:
    """Check that all fields share one grid and return it."""
    grids = [f.grid for f in fields]
    first = grids[0]
    for g in grids[1:]:
        if g != first:
            raise ShapeError("fields live on different grids")
    return first


def iter_cells(grid: Grid) -> Iterator[tuple]:
    """Row-major iteration over cell indices."""
    if grid.d == 1:
        for i in range(grid.n[0]):
            yield (i,)
    else:
        for i in range(grid.n[0]):
            for j in range(grid.n[1]):
                yield (i, j)
