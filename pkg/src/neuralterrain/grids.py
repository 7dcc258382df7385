"""Regular terrain grids: extraction, masking, resampling, error statistics.

Grids live in the scene frame's world coordinates (meters). Registration
is lower-left with cell-center sampling: cell ``(row 0, col 0)`` is the
south-west corner and its center sits at ``origin + cell_size / 2`` on
each axis, so ``heights[row, col]`` belongs to
``(x_min + (col + 0.5) * cell, y_min + (row + 0.5) * cell)``. Invalid
cells carry the no-data sentinel in the raster and False in the mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from neuralterrain.validation import ensure_array

__all__ = [
    "NODATA",
    "GridSpec",
    "TerrainGrid",
    "ErrorReport",
    "extract_heights",
    "extract_colors",
    "footprint_union_mask",
    "error_stats",
    "resample_grid",
]

NODATA = -99999.0


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a regular grid: lower-left origin, cell size, counts."""

    x_min: float
    y_min: float
    cell_size: float
    n_cols: int
    n_rows: int

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.n_cols < 1 or self.n_rows < 1:
            raise ValueError("grid must have at least one cell per axis")

    @property
    def x_max(self):
        return self.x_min + self.n_cols * self.cell_size

    @property
    def y_max(self):
        return self.y_min + self.n_rows * self.cell_size

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    def cell_centers(self):
        """Center coordinates ``(xs [n_cols], ys [n_rows])``."""
        xs = self.x_min + (np.arange(self.n_cols) + 0.5) * self.cell_size
        ys = self.y_min + (np.arange(self.n_rows) + 0.5) * self.cell_size
        return xs, ys

    def center_grid(self):
        """All cell centers as an ``[n_rows, n_cols, 2]`` array."""
        xs, ys = self.cell_centers()
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    @classmethod
    def cover(cls, xy_min, xy_max, cell_size):
        """Smallest grid at ``cell_size`` covering the rectangle."""
        xy_min = np.asarray(xy_min, dtype=np.float64)
        xy_max = np.asarray(xy_max, dtype=np.float64)
        if np.any(xy_max <= xy_min):
            raise ValueError("xy_max must exceed xy_min")
        n_cols = int(np.ceil((xy_max[0] - xy_min[0]) / cell_size - 1e-9))
        n_rows = int(np.ceil((xy_max[1] - xy_min[1]) / cell_size - 1e-9))
        return cls(float(xy_min[0]), float(xy_min[1]), float(cell_size),
                   max(n_cols, 1), max(n_rows, 1))

    @classmethod
    def interior(cls, xy_min, xy_max, cell_size):
        """Largest grid at ``cell_size`` with all cell centers inside.

        Anchored at ``xy_min``; the trailing partial cell (if any) is
        dropped, so field extraction bounded to the rectangle is safe.
        """
        xy_min = np.asarray(xy_min, dtype=np.float64)
        xy_max = np.asarray(xy_max, dtype=np.float64)
        if np.any(xy_max <= xy_min):
            raise ValueError("xy_max must exceed xy_min")
        n_cols = int((xy_max[0] - xy_min[0]) / cell_size + 1e-9)
        n_rows = int((xy_max[1] - xy_min[1]) / cell_size + 1e-9)
        if n_cols < 1 or n_rows < 1:
            raise ValueError(
                f"cell_size {cell_size} exceeds the rectangle extent"
            )
        return cls(float(xy_min[0]), float(xy_min[1]), float(cell_size),
                   n_cols, n_rows)

    def to_dict(self):
        return {
            "x_min_m": self.x_min,
            "y_min_m": self.y_min,
            "cell_size_m": self.cell_size,
            "n_cols": self.n_cols,
            "n_rows": self.n_rows,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            float(data["x_min_m"]), float(data["y_min_m"]),
            float(data["cell_size_m"]), int(data["n_cols"]),
            int(data["n_rows"]),
        )


class TerrainGrid:
    """Height raster with validity mask and optional color raster.

    ``heights`` is float64 ``[n_rows, n_cols]`` holding :data:`NODATA`
    wherever ``valid`` is False; ``colors``, when present, is
    ``[n_rows, n_cols, channels]`` in ``[0, 1]``.
    """

    def __init__(self, spec, heights, valid=None, colors=None):
        self.spec = spec
        heights = ensure_array(heights, "heights", shape=spec.shape)
        if valid is None:
            valid = np.isfinite(heights) & (heights != NODATA)
        else:
            valid = np.asarray(valid, dtype=bool)
            if valid.shape != spec.shape:
                raise ValueError("valid mask shape must match the grid")
        self.heights = np.where(valid, heights, NODATA)
        self.valid = valid.copy()
        if colors is not None:
            colors = np.asarray(colors, dtype=np.float64)
            if colors.shape[:2] != spec.shape or colors.ndim != 3:
                raise ValueError("colors must be [n_rows, n_cols, channels]")
        self.colors = colors

    @property
    def n_valid(self):
        return int(self.valid.sum())

    def cell_centers(self):
        return self.spec.cell_centers()

    def masked(self, mask):
        """Copy with validity restricted to ``mask`` (logical and)."""
        mask = np.asarray(mask, dtype=bool)
        return TerrainGrid(self.spec, self.heights, self.valid & mask,
                           None if self.colors is None else self.colors.copy())

    def copy(self):
        return TerrainGrid(self.spec, self.heights.copy(), self.valid.copy(),
                           None if self.colors is None else self.colors.copy())


def _require_inside_frame(spec, frame):
    eps = 1e-6 * float(np.max(frame.extent))
    if (
        spec.x_min < frame.bbox_min[0] - eps
        or spec.y_min < frame.bbox_min[1] - eps
        or spec.x_max > frame.bbox_max[0] + eps
        or spec.y_max > frame.bbox_max[1] + eps
    ):
        raise ValueError("grid extends outside the scene box")


def extract_heights(height_fn, frame, spec, chunk=65536):
    """Sample a height function over a grid inside the scene box.

    Args:
        height_fn: Callable mapping world ``[n, 2]`` meters to heights
            in meters (the trained model's height query or an analytic
            terrain).
        frame: :class:`~neuralterrain.geometry.SceneFrame` bounding the
            grid.
        spec: :class:`GridSpec`, must lie within the frame's xy box.
        chunk: Cells per call, bounds peak memory.

    Returns:
        Fully valid :class:`TerrainGrid`.
    """
    _require_inside_frame(spec, frame)
    points = spec.center_grid().reshape(-1, 2)
    out = np.empty(points.shape[0], dtype=np.float64)
    for start in range(0, points.shape[0], chunk):
        sl = slice(start, start + chunk)
        out[sl] = np.asarray(height_fn(points[sl]), dtype=np.float64)
    return TerrainGrid(spec, out.reshape(spec.shape))


def extract_colors(color_fn, frame, spec, chunk=65536):
    """Sample a color function over a grid; returns ``[rows, cols, d]``."""
    _require_inside_frame(spec, frame)
    points = spec.center_grid().reshape(-1, 2)
    first = np.asarray(color_fn(points[: min(chunk, points.shape[0])]))
    channels = first.shape[-1]
    out = np.empty((points.shape[0], channels), dtype=np.float64)
    out[: first.shape[0]] = first
    for start in range(first.shape[0], points.shape[0], chunk):
        sl = slice(start, start + chunk)
        out[sl] = np.asarray(color_fn(points[sl]), dtype=np.float64)
    return out.reshape(spec.n_rows, spec.n_cols, channels)


def _points_in_polygon(px, py, polygon):
    # Even-odd rule by edge crossing count.
    inside = np.zeros(px.shape, dtype=bool)
    n = polygon.shape[0]
    for k in range(n):
        x1, y1 = polygon[k]
        x2, y2 = polygon[(k + 1) % n]
        straddles = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= straddles & (px < x_cross)
    return inside


def footprint_union_mask(footprints, spec):
    """Cells whose centers fall inside at least one footprint polygon.

    Args:
        footprints: Sequence of ``[k, 2]`` polygons (k >= 3), e.g. from
            the cameras' ``footprint`` methods.
        spec: :class:`GridSpec`.

    Returns:
        Boolean ``[n_rows, n_cols]`` raster.
    """
    if len(footprints) == 0:
        raise ValueError("need at least one footprint")
    centers = spec.center_grid()
    px, py = centers[..., 0], centers[..., 1]
    mask = np.zeros(spec.shape, dtype=bool)
    for polygon in footprints:
        polygon = ensure_array(polygon, "footprint", last_dim=2)
        if polygon.ndim != 2 or polygon.shape[0] < 3:
            raise ValueError("footprint polygons need at least 3 vertices")
        mask |= _points_in_polygon(px, py, polygon)
    return mask


@dataclass(frozen=True)
class ErrorReport:
    """Trimmed height-error statistics of a grid against a reference.

    Errors are ``dtm - reference`` in meters over jointly valid cells;
    the top and bottom ``trim_fraction`` of the sorted errors are
    dropped before computing the mean and population standard deviation.
    Histograms over both the trimmed and the raw errors are included
    (64 uniform bins each) since either may be wanted downstream.
    """

    mean_error: float
    std_dev: float
    trim_fraction: float
    n_valid: int
    n_used: int
    bin_edges: np.ndarray
    bin_counts: np.ndarray
    untrimmed_mean: float
    untrimmed_std: float
    untrimmed_bin_edges: np.ndarray
    untrimmed_bin_counts: np.ndarray

    def summary(self):
        return (
            f"n_valid={self.n_valid} n_used={self.n_used} "
            f"trim={self.trim_fraction:g} "
            f"mean={self.mean_error:.6g} m std={self.std_dev:.6g} m "
            f"(untrimmed mean={self.untrimmed_mean:.6g} m "
            f"std={self.untrimmed_std:.6g} m)"
        )


def _histogram(errors, bins=64):
    lo = float(errors.min())
    hi = float(errors.max())
    if hi <= lo:
        hi = lo + 1e-9
    counts, edges = np.histogram(errors, bins=bins, range=(lo, hi))
    return edges, counts


def error_stats(dtm, reference, trim=0.02):
    """Compare two congruent grids; see :class:`ErrorReport`.

    Raises:
        ValueError: If the grids are not congruent (same spec) or share
            no jointly valid cells.
    """
    if dtm.spec != reference.spec:
        raise ValueError(
            "grids are not congruent; resample one onto the other first"
        )
    if not 0 <= trim < 0.5:
        raise ValueError("trim must be in [0, 0.5)")
    joint = dtm.valid & reference.valid
    n_valid = int(joint.sum())
    if n_valid == 0:
        raise ValueError("no jointly valid cells to compare")
    errors = np.sort(dtm.heights[joint] - reference.heights[joint])
    n_drop = int(np.floor(trim * n_valid))
    kept = errors[n_drop : n_valid - n_drop]
    edges, counts = _histogram(kept)
    raw_edges, raw_counts = _histogram(errors)
    return ErrorReport(
        mean_error=float(kept.mean()),
        std_dev=float(kept.std()),
        trim_fraction=float(trim),
        n_valid=n_valid,
        n_used=int(kept.size),
        bin_edges=edges,
        bin_counts=counts,
        untrimmed_mean=float(errors.mean()),
        untrimmed_std=float(errors.std()),
        untrimmed_bin_edges=raw_edges,
        untrimmed_bin_counts=raw_counts,
    )


def resample_grid(src, dst_spec):
    """Bilinearly resample a grid onto another spec.

    Destination cells are valid only when all four source neighbors of
    the bilinear stencil are valid and the destination center lies
    within the source's center lattice (no extrapolation). A congruent
    destination spec returns a bitwise copy.

    Raises:
        ValueError: If the two extents do not overlap.
    """
    if dst_spec == src.spec:
        return src.copy()
    if (
        dst_spec.x_min >= src.spec.x_max
        or dst_spec.x_max <= src.spec.x_min
        or dst_spec.y_min >= src.spec.y_max
        or dst_spec.y_max <= src.spec.y_min
    ):
        raise ValueError("source and destination extents are disjoint")
    if src.spec.n_cols < 2 or src.spec.n_rows < 2:
        raise ValueError("source grid too small for bilinear resampling")

    centers = dst_spec.center_grid()
    fx = (centers[..., 0] - src.spec.x_min) / src.spec.cell_size - 0.5
    fy = (centers[..., 1] - src.spec.y_min) / src.spec.cell_size - 0.5
    in_lattice = (
        (fx >= 0.0)
        & (fx <= src.spec.n_cols - 1)
        & (fy >= 0.0)
        & (fy <= src.spec.n_rows - 1)
    )
    i0 = np.clip(np.floor(fx).astype(int), 0, src.spec.n_cols - 2)
    j0 = np.clip(np.floor(fy).astype(int), 0, src.spec.n_rows - 2)
    wx = fx - i0
    wy = fy - j0

    h = src.heights
    v = src.valid
    h00, h10 = h[j0, i0], h[j0, i0 + 1]
    h01, h11 = h[j0 + 1, i0], h[j0 + 1, i0 + 1]
    heights = (
        h00 * (1 - wx) * (1 - wy)
        + h10 * wx * (1 - wy)
        + h01 * (1 - wx) * wy
        + h11 * wx * wy
    )
    valid = (
        in_lattice
        & v[j0, i0]
        & v[j0, i0 + 1]
        & v[j0 + 1, i0]
        & v[j0 + 1, i0 + 1]
    )
    return TerrainGrid(dst_spec, heights, valid)
