"""Occupancy grids and the map-handling front end of the pipeline.

A grid stores occupancy probabilities in [0, 1] with 0.5 meaning unknown.
Cells follow the half-open convention: cell (col, row) owns the world box
[origin_x + col*res, origin_x + (col+1)*res) x [origin_y + row*res, ...).
Points landing exactly on a shared edge therefore belong to the higher
index cell.  Arrays are indexed values[row, col].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, TextIO

import numpy as np
from numba import njit

UNKNOWN = 0.5
GRID_DUMP_MAGIC = "APCMGRID"
GRID_DUMP_VERSION = "v1"

# default band for threshold_uncertain; values within it count as uncertain
UNCERTAIN_BAND = (0.4, 0.6)


class GridError(ValueError):
    """Raised for malformed grids, out-of-range values, or bad queries."""


class CellIndex(NamedTuple):
    col: int
    row: int


@dataclass
class OccupancyGrid:
    """A 2D occupancy raster with a world anchoring.

    Attributes:
        values: (rows, cols) float64 array, each entry in [0, 1].
        resolution: cell edge length in meters, > 0.
        origin: world (x, y) of the outer corner of cell (0, 0).
        name: optional label, carried into derived products.
    """

    values: np.ndarray
    resolution: float
    origin: tuple[float, float]
    name: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.size == 0:
            raise GridError("grid values must be a non-empty 2D array")
        if not self.resolution > 0:
            raise GridError(f"resolution must be positive, got {self.resolution}")
        if not np.all(np.isfinite(self.values)):
            raise GridError("grid values must be finite")
        lo = float(self.values.min())
        hi = float(self.values.max())
        if lo < 0.0 or hi > 1.0:
            raise GridError(f"grid values outside [0, 1]: min={lo}, max={hi}")
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the covered world box."""
        x0, y0 = self.origin
        return (x0, y0, x0 + self.cols * self.resolution, y0 + self.rows * self.resolution)

    def contains_point(self, x: float, y: float) -> bool:
        xmin, ymin, xmax, ymax = self.extent
        return xmin <= x < xmax and ymin <= y < ymax

    def world_to_cell(self, x: float, y: float) -> CellIndex:
        """Map a world point to the cell containing it.

        Points on a shared cell edge map to the higher-index cell, which is
        what floor division gives for the half-open convention.

        Raises:
            GridError: if the point lies outside the grid extent.
        """
        if not self.contains_point(x, y):
            raise GridError(f"point ({x}, {y}) outside grid extent {self.extent}")
        col = int(math.floor((x - self.origin[0]) / self.resolution))
        row = int(math.floor((y - self.origin[1]) / self.resolution))
        # guard the far edge against roundoff in the division
        col = min(col, self.cols - 1)
        row = min(row, self.rows - 1)
        return CellIndex(col, row)

    def cell_center(self, cell: CellIndex) -> tuple[float, float]:
        col, row = cell
        if not (0 <= col < self.cols and 0 <= row < self.rows):
            raise GridError(f"cell {cell} outside grid of {self.cols}x{self.rows}")
        return (
            self.origin[0] + (col + 0.5) * self.resolution,
            self.origin[1] + (row + 0.5) * self.resolution,
        )

    def cell_block(self, col0: int, row0: int, ncols: int, nrows: int,
                   name: str = "") -> "OccupancyGrid":
        """Copy out a rectangular block as its own grid."""
        if col0 < 0 or row0 < 0 or col0 + ncols > self.cols or row0 + nrows > self.rows:
            raise GridError("requested block leaves the grid")
        block = self.values[row0:row0 + nrows, col0:col0 + ncols].copy()
        origin = (self.origin[0] + col0 * self.resolution,
                  self.origin[1] + row0 * self.resolution)
        return OccupancyGrid(block, self.resolution, origin, name=name or self.name)

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.values.copy(), self.resolution, self.origin, self.name)


def make_grid(cols: int, rows: int, resolution: float,
              origin: tuple[float, float] = (0.0, 0.0),
              fill: float = UNKNOWN, name: str = "") -> OccupancyGrid:
    return OccupancyGrid(np.full((rows, cols), fill, dtype=np.float64),
                         resolution, origin, name=name)


@dataclass(frozen=True)
class UncertainSet:
    """Cells of a source grid whose value fell inside the uncertain band."""

    cell_array: np.ndarray          # (n, 2) int64 of (col, row), row-major order
    source_grid: str
    band: tuple[float, float]

    @property
    def cells(self) -> frozenset:
        return frozenset(CellIndex(int(c), int(r)) for c, r in self.cell_array)

    def __len__(self) -> int:
        return int(self.cell_array.shape[0])


def merge_maps(ogm: OccupancyGrid, hd: OccupancyGrid) -> OccupancyGrid:
    """Overlay a sensed grid onto prior map knowledge.

    Inside the ogm extent the sensed value wins; outside it the hd value is
    kept, so regions beyond sensor coverage fall back to the static map.
    The output covers the hd extent at the shared resolution.
    """
    if not math.isclose(ogm.resolution, hd.resolution, rel_tol=1e-9, abs_tol=0.0):
        raise GridError(
            f"resolution mismatch: ogm={ogm.resolution} hd={hd.resolution}")
    res = hd.resolution
    off_x = (ogm.origin[0] - hd.origin[0]) / res
    off_y = (ogm.origin[1] - hd.origin[1]) / res
    col0 = round(off_x)
    row0 = round(off_y)
    if abs(off_x - col0) > 1e-6 or abs(off_y - row0) > 1e-6:
        raise GridError("ogm lattice is not aligned with the hd lattice")
    if col0 < 0 or row0 < 0 or col0 + ogm.cols > hd.cols or row0 + ogm.rows > hd.rows:
        raise GridError("ogm extent must be contained in the hd extent")
    merged = hd.values.copy()
    merged[row0:row0 + ogm.rows, col0:col0 + ogm.cols] = ogm.values
    return OccupancyGrid(merged, res, hd.origin, name="merged")


def threshold_uncertain(grid: OccupancyGrid,
                        band: tuple[float, float] = UNCERTAIN_BAND) -> UncertainSet:
    """Collect the cells whose value lies in [band[0], band[1]], inclusive."""
    lo, hi = float(band[0]), float(band[1])
    if not (0.0 <= lo <= hi <= 1.0):
        raise GridError(f"bad uncertainty band {band}")
    rows, cols = np.nonzero((grid.values >= lo) & (grid.values <= hi))
    cell_array = np.stack([cols, rows], axis=1).astype(np.int64)
    return UncertainSet(cell_array, grid.name or "unnamed", (lo, hi))


@dataclass
class SensorModel:
    """Omnidirectional range sensor casting rays from a world position."""

    position: tuple[float, float]
    max_range: float = 30.0
    angular_resolution: float = 2.0 * math.pi / 2048.0

    def __post_init__(self):
        if not self.max_range > 0:
            raise GridError("sensor max_range must be positive")
        if not 0 < self.angular_resolution < 2.0 * math.pi:
            raise GridError("sensor angular_resolution out of range")


@njit(cache=True)
def _sweep_bearings(occ, out, px, py, res, ox, oy, max_range, n_bearings):
    # DDA march per bearing; precedence hit(1) > free(0) > unknown(0.5)
    nrows, ncols = occ.shape
    scol = int(math.floor((px - ox) / res))
    srow = int(math.floor((py - oy) / res))
    if occ[srow, scol]:
        out[srow, scol] = 1.0
        return
    out[srow, scol] = 0.0
    for b in range(n_bearings):
        th = 2.0 * math.pi * b / n_bearings
        dx = math.cos(th)
        dy = math.sin(th)
        col = scol
        row = srow
        if dx > 0.0:
            step_c = 1
            tmax_x = ((col + 1) * res + ox - px) / dx
            tdel_x = res / dx
        elif dx < 0.0:
            step_c = -1
            tmax_x = (col * res + ox - px) / dx
            tdel_x = -res / dx
        else:
            step_c = 0
            tmax_x = math.inf
            tdel_x = math.inf
        if dy > 0.0:
            step_r = 1
            tmax_y = ((row + 1) * res + oy - py) / dy
            tdel_y = res / dy
        elif dy < 0.0:
            step_r = -1
            tmax_y = (row * res + oy - py) / dy
            tdel_y = -res / dy
        else:
            step_r = 0
            tmax_y = math.inf
            tdel_y = math.inf
        while True:
            if tmax_x < tmax_y:
                t_entry = tmax_x
                col += step_c
                tmax_x += tdel_x
            else:
                t_entry = tmax_y
                row += step_r
                tmax_y += tdel_y
            if t_entry > max_range:
                break
            if col < 0 or col >= ncols or row < 0 or row >= nrows:
                break
            if occ[row, col]:
                out[row, col] = 1.0
                break
            if out[row, col] != 1.0:
                out[row, col] = 0.0


@njit(cache=True)
def _segment_blocked(occ, px, py, qx, qy, res, ox, oy):
    # True when an occupied cell lies strictly before the cell holding q
    tcol = int(math.floor((qx - ox) / res))
    trow = int(math.floor((qy - oy) / res))
    col = int(math.floor((px - ox) / res))
    row = int(math.floor((py - oy) / res))
    dx = qx - px
    dy = qy - py
    dist = math.hypot(dx, dy)
    if dist == 0.0:
        return False
    dx /= dist
    dy /= dist
    nrows, ncols = occ.shape
    if dx > 0.0:
        step_c = 1
        tmax_x = ((col + 1) * res + ox - px) / dx
        tdel_x = res / dx
    elif dx < 0.0:
        step_c = -1
        tmax_x = (col * res + ox - px) / dx
        tdel_x = -res / dx
    else:
        step_c = 0
        tmax_x = math.inf
        tdel_x = math.inf
    if dy > 0.0:
        step_r = 1
        tmax_y = ((row + 1) * res + oy - py) / dy
        tdel_y = res / dy
    elif dy < 0.0:
        step_r = -1
        tmax_y = (row * res + oy - py) / dy
        tdel_y = -res / dy
    else:
        step_r = 0
        tmax_y = math.inf
        tdel_y = math.inf
    while True:
        if col == tcol and row == trow:
            return False
        if occ[row, col]:
            return True
        if tmax_x < tmax_y:
            t = tmax_x
            col += step_c
            tmax_x += tdel_x
        else:
            t = tmax_y
            row += step_r
            tmax_y += tdel_y
        if t > dist:
            return False
        if col < 0 or col >= ncols or row < 0 or row >= nrows:
            return True


@njit(cache=True)
def _verify_free_cells(occ, out, px, py, res, ox, oy, max_range):
    # demote free cells whose center is out of range or center line is blocked
    nrows, ncols = occ.shape
    for row in range(nrows):
        for col in range(ncols):
            if out[row, col] != 0.0:
                continue
            cx = ox + (col + 0.5) * res
            cy = oy + (row + 0.5) * res
            if math.hypot(cx - px, cy - py) > max_range:
                out[row, col] = 0.5
            elif _segment_blocked(occ, px, py, cx, cy, res, ox, oy):
                out[row, col] = 0.5


def sensor_scan(world: OccupancyGrid, sensor: SensorModel) -> OccupancyGrid:
    """Simulate one scan of the environment raster.

    The world grid must be binary: 1 for solid geometry, 0 for free space.
    Rays march at grid resolution on bearings spaced at most
    sensor.angular_resolution apart.  Cells seen before the first hit come
    back 0, the hit cell 1, everything beyond a hit or the max range 0.5.
    A cell is only reported free when the straight segment from the sensor
    to its center crosses no solid cell, so free cells carry a line-of-sight
    guarantee.  A sensor buried inside solid geometry sees only its own cell.
    """
    sx, sy = sensor.position
    if not world.contains_point(sx, sy):
        raise GridError(f"sensor position ({sx}, {sy}) outside the grid")
    solid = world.values > 0.5
    out = np.full(world.values.shape, UNKNOWN, dtype=np.float64)
    n_bearings = int(math.ceil(2.0 * math.pi / sensor.angular_resolution))
    _sweep_bearings(solid, out, sx, sy, world.resolution,
                    world.origin[0], world.origin[1],
                    sensor.max_range, n_bearings)
    _verify_free_cells(solid, out, sx, sy, world.resolution,
                       world.origin[0], world.origin[1], sensor.max_range)
    return OccupancyGrid(out, world.resolution, world.origin, name="ogm")


def dump_grid(grid: OccupancyGrid, stream: TextIO) -> None:
    """Write the plain-text grid dump: a one-line header, then row-major values."""
    stream.write("%s %s %d %d %s %s %s\n" % (
        GRID_DUMP_MAGIC, GRID_DUMP_VERSION, grid.cols, grid.rows,
        repr(grid.resolution), repr(grid.origin[0]), repr(grid.origin[1])))
    for row in range(grid.rows):
        stream.write(" ".join("%.6f" % v for v in grid.values[row]))
        stream.write("\n")


def load_grid(stream: TextIO, name: str = "") -> OccupancyGrid:
    header = stream.readline().split()
    if len(header) != 7 or header[0] != GRID_DUMP_MAGIC or header[1] != GRID_DUMP_VERSION:
        raise GridError(f"unrecognized grid dump header: {header}")
    cols, rows = int(header[2]), int(header[3])
    resolution = float(header[4])
    origin = (float(header[5]), float(header[6]))
    flat = np.array(stream.read().split(), dtype=np.float64)
    if flat.size != cols * rows:
        raise GridError(f"grid dump holds {flat.size} values, expected {cols * rows}")
    return OccupancyGrid(flat.reshape(rows, cols), resolution, origin, name=name)
