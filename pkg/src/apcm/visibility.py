"""Perspective cost maps built from probabilistic ray casts.

For a candidate vantage cell s and a set of hidden-but-reachable cells
U, each ray s -> u carries the probability that the straight sight line
is clear, the product of (1 - occupancy) over the strictly-between
cells.  Averaging over U scores how much of the hidden set the vantage
would reveal, and min-max normalization over all vantage cells turns the
scores into a relative reward in [0, 1].  If every vantage sees
everything (or nothing distinguishes them), the map is identically zero.

Rays walk the integer midpoint line.  At an exact half-cell tie the
minor axis steps toward the target, which keeps traces mirror-symmetric
under reflection of the scene.  Endpoints are never included, so
adjacent cells always see each other.

The batch builder splits work across sources; each source accumulates
its targets in a fixed row-major order through a fixed-shape pairwise
fold, so results are bitwise identical for any worker count.
"""
from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass

import numpy as np
from numba import config as numba_config
from numba import get_num_threads, njit, prange, set_num_threads

from apcm.grid import CellIndex, OccupancyGrid, make_grid
from apcm.reachability import PlannedTrajectory, ReachableOccludedSet


class VisibilityError(ValueError):
    pass


def trace_cells(src: CellIndex, trg: CellIndex) -> list:
    """Cells strictly between src and trg on the midpoint line.

    Returns them in walk order from src toward trg.  The count is always
    max(|dcol|, |drow|) - 1 for distinct cells, and the list is empty when
    the cells coincide or touch (including diagonally).
    """
    x0, y0 = int(src[0]), int(src[1])
    x1, y1 = int(trg[0]), int(trg[1])
    dx = abs(x1 - x0)
    dy = abs(y1 - y0)
    sx = 1 if x1 > x0 else -1
    sy = 1 if y1 > y0 else -1
    out = []
    if dx >= dy:
        err = 2 * dy - dx
        x, y = x0, y0
        for _ in range(dx - 1):
            x += sx
            if err >= 0:
                y += sy
                err -= 2 * dx
            err += 2 * dy
            out.append(CellIndex(x, y))
    else:
        err = 2 * dx - dy
        x, y = x0, y0
        for _ in range(dy - 1):
            y += sy
            if err >= 0:
                x += sx
                err -= 2 * dy
            err += 2 * dx
            out.append(CellIndex(x, y))
    return out


def cast_ray(src: CellIndex, trg: CellIndex, occ: OccupancyGrid) -> float:
    """Probability that the sight line from src to trg is unobstructed.

    Multiplies (1 - occupancy) over the strictly-between cells in walk
    order.  Cells that coincide or touch give exactly 1.0.
    """
    for cell in (src, trg):
        if not (0 <= cell[0] < occ.cols and 0 <= cell[1] < occ.rows):
            raise VisibilityError(f"cell {cell} outside the grid")
    p = 1.0
    vals = occ.values
    for col, row in trace_cells(src, trg):
        p *= 1.0 - vals[row, col]
    return p


@njit(cache=True)
def _pairwise_fold(buf, n):
    # fixed-shape pairwise reduction; the fold order depends only on n
    while n > 1:
        half = n // 2
        for i in range(half):
            buf[i] = buf[2 * i] + buf[2 * i + 1]
        if n % 2 == 1:
            buf[half] = buf[n - 1]
            n = half + 1
        else:
            n = half
    return buf[0]


@njit(parallel=True, cache=True)
def _perspective_kernel(src, trg, occ, scratch, out):
    K = src.shape[0]
    M = trg.shape[0]
    for k in prange(K):
        sx = src[k, 0]
        sy = src[k, 1]
        for m in range(M):
            tx = trg[m, 0]
            ty = trg[m, 1]
            dx = tx - sx
            dy = ty - sy
            adx = abs(dx)
            ady = abs(dy)
            stx = 1 if dx > 0 else -1
            sty = 1 if dy > 0 else -1
            p = 1.0
            if adx >= ady:
                err = 2 * ady - adx
                x = sx
                y = sy
                for _ in range(adx - 1):
                    x += stx
                    if err >= 0:
                        y += sty
                        err -= 2 * adx
                    err += 2 * ady
                    p *= 1.0 - occ[y, x]
            else:
                err = 2 * adx - ady
                x = sx
                y = sy
                for _ in range(ady - 1):
                    y += sty
                    if err >= 0:
                        x += stx
                        err -= 2 * ady
                    err += 2 * adx
                    p *= 1.0 - occ[y, x]
            scratch[k, m] = p
        out[k] = _pairwise_fold(scratch[k], M) / M


@dataclass(frozen=True)
class ObservationSet:
    """Candidate vantage cells along the nominal path, row-major ordered."""

    cell_array: np.ndarray    # (K, 2) int64 (col, row)
    lane_width: float
    arc_reach: float

    @property
    def cells(self) -> frozenset:
        return frozenset(CellIndex(int(c), int(r)) for c, r in self.cell_array)

    def __len__(self) -> int:
        return int(self.cell_array.shape[0])


@dataclass(frozen=True)
class PerspectiveCostMap:
    """Normalized perspective reward on the grid, zero outside the sources."""

    grid: OccupancyGrid
    sources: ObservationSet
    raw: np.ndarray           # (K,) pre-normalization mean clear-ray probability
    n_targets: int
    empty_targets: bool

    def value_at(self, x: float, y: float) -> float:
        if not self.grid.contains_point(x, y):
            return 0.0
        col, row = self.grid.world_to_cell(x, y)
        return float(self.grid.values[row, col])


def perspective_value(src: CellIndex, targets: ReachableOccludedSet,
                      occ: OccupancyGrid) -> float:
    """Mean clear-ray probability from one source over the reachable set.

    An empty target set scores 0.0 by convention; the batch builder flags
    that case on the returned map.  Uses the same walk and fold as the
    batch kernel, so the two agree bit for bit.
    """
    m = len(targets)
    if m == 0:
        return 0.0
    buf = np.empty(m, dtype=np.float64)
    for i, (col, row) in enumerate(targets.cell_array):
        buf[i] = cast_ray(src, CellIndex(int(col), int(row)), occ)
    return float(_pairwise_fold(buf, m)) / m


def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max normalization to [0, 1]; a uniform input maps to all zeros."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return values.copy()
    lo = float(values.min())
    hi = float(values.max())
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def select_observation_cells(nominal: PlannedTrajectory, lane_width: float,
                             position: tuple[float, float], horizon: int,
                             v_cap: float, grid: OccupancyGrid) -> ObservationSet:
    """Cells the ego could plausibly occupy over the horizon.

    Keeps cells whose center is within lane_width / 2 of the nominal
    polyline and whose projected arc length is within v_cap * horizon * dt
    ahead of the ego's own projection.  A zero horizon keeps nothing.
    """
    if lane_width <= 0 or v_cap <= 0:
        raise VisibilityError("lane_width and v_cap must be positive")
    if horizon < 0:
        raise VisibilityError("horizon must be >= 0")
    pts = nominal.points
    if pts.shape[0] == 0:
        raise VisibilityError("nominal polyline is empty")
    reach = v_cap * horizon * nominal.dt
    empty = np.empty((0, 2), dtype=np.int64)
    if reach <= 0.0:
        return ObservationSet(empty, lane_width, reach)

    half = lane_width / 2.0
    s0, _ = _project_arc(pts, np.asarray([position], dtype=np.float64))
    s0 = float(s0[0])

    # candidate box around the forward window of the polyline
    seg_arcs = _cumulative_arcs(pts)
    lo_i = int(np.searchsorted(seg_arcs, s0, side="right")) - 1
    hi_i = int(np.searchsorted(seg_arcs, s0 + reach, side="right"))
    window = pts[max(lo_i, 0):min(hi_i + 1, pts.shape[0])]
    if window.shape[0] == 0:
        window = pts[-1:]
    pad = half + grid.resolution
    xmin, ymin = window.min(axis=0) - pad
    xmax, ymax = window.max(axis=0) + pad
    gx0, gy0 = grid.origin
    res = grid.resolution
    c0 = max(int(math.floor((xmin - gx0) / res)), 0)
    r0 = max(int(math.floor((ymin - gy0) / res)), 0)
    c1 = min(int(math.ceil((xmax - gx0) / res)), grid.cols)
    r1 = min(int(math.ceil((ymax - gy0) / res)), grid.rows)
    if c0 >= c1 or r0 >= r1:
        return ObservationSet(empty, lane_width, reach)

    cols, rows = np.meshgrid(np.arange(c0, c1), np.arange(r0, r1))
    cols = cols.ravel()
    rows = rows.ravel()
    centers = np.stack([gx0 + (cols + 0.5) * res, gy0 + (rows + 0.5) * res], axis=1)
    arcs, dists = _project_arc(pts, centers)
    ahead = arcs - s0
    keep = (dists <= half) & (ahead >= 0.0) & (ahead <= reach)
    cells = np.stack([cols[keep], rows[keep]], axis=1).astype(np.int64)
    order = np.lexsort((cells[:, 0], cells[:, 1]))
    return ObservationSet(cells[order], lane_width, reach)


def _cumulative_arcs(pts: np.ndarray) -> np.ndarray:
    if pts.shape[0] == 1:
        return np.zeros(1)
    seg = np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]))
    return np.concatenate([[0.0], np.cumsum(seg)])


def _project_arc(pts: np.ndarray, queries: np.ndarray):
    """Arc length and distance of the closest point on the polyline."""
    n = pts.shape[0]
    if n == 1:
        d = np.hypot(queries[:, 0] - pts[0, 0], queries[:, 1] - pts[0, 1])
        return np.zeros(queries.shape[0]), d
    arcs = _cumulative_arcs(pts)
    best_d = np.full(queries.shape[0], np.inf)
    best_s = np.zeros(queries.shape[0])
    for i in range(n - 1):
        a = pts[i]
        b = pts[i + 1]
        ab = b - a
        L2 = float(ab[0] ** 2 + ab[1] ** 2)
        if L2 == 0.0:
            t = np.zeros(queries.shape[0])
        else:
            t = np.clip(((queries - a) @ ab) / L2, 0.0, 1.0)
        proj = a + t[:, None] * ab
        d = np.hypot(queries[:, 0] - proj[:, 0], queries[:, 1] - proj[:, 1])
        closer = d < best_d
        best_d[closer] = d[closer]
        best_s[closer] = arcs[i] + t[closer] * math.sqrt(L2)
    return best_s, best_d


def _resolve_workers(workers) -> int:
    cap = int(numba_config.NUMBA_NUM_THREADS)
    if workers is None:
        return cap
    if workers < 1:
        raise VisibilityError(f"workers must be >= 1, got {workers}")
    # a request beyond the thread budget of this interpreter is clamped;
    # results do not depend on the count either way
    return min(int(workers), cap)


def update_apcm(sources: ObservationSet, targets: ReachableOccludedSet,
                occ: OccupancyGrid, workers: int | None = None) -> PerspectiveCostMap:
    """Build the normalized perspective map for the current tick.

    Every source scores the mean clear-ray probability over the targets
    (row-major target order, pairwise fold), then scores are min-max
    normalized over the sources.  Cells outside the observation set stay
    zero.  The workers argument only splits the outer loop; any value
    yields bitwise-identical output.
    """
    K = len(sources)
    M = len(targets)
    raw = np.zeros(K, dtype=np.float64)
    if K > 0 and M > 0:
        for arr in (sources.cell_array, targets.cell_array):
            if arr[:, 0].min() < 0 or arr[:, 1].min() < 0 \
                    or arr[:, 0].max() >= occ.cols or arr[:, 1].max() >= occ.rows:
                raise VisibilityError("source or target cell outside the grid")
        scratch = np.empty((K, M), dtype=np.float64)
        eff = _resolve_workers(workers)
        prev = get_num_threads()
        set_num_threads(eff)
        try:
            _perspective_kernel(sources.cell_array, targets.cell_array,
                                occ.values, scratch, raw)
        finally:
            set_num_threads(prev)
    norm = normalize(raw)
    out = make_grid(occ.cols, occ.rows, occ.resolution, occ.origin,
                    fill=0.0, name="apcm")
    if K > 0:
        out.values[sources.cell_array[:, 1], sources.cell_array[:, 0]] = norm
    return PerspectiveCostMap(out, sources, raw, M, empty_targets=(M == 0))


def benchmark_update(grid_n: int = 200, n_sources: int = 600, n_targets: int = 800,
                     repeats: int = 20, workers: int | None = None,
                     seed: int = 0) -> dict:
    """Time the batch builder on a synthetic scene of the production scale."""
    rng = np.random.default_rng(seed)
    occ = OccupancyGrid(rng.random((grid_n, grid_n)) * 0.9, 0.4, (0.0, 0.0))
    src = np.stack([rng.integers(0, grid_n, n_sources),
                    rng.integers(0, grid_n, n_sources)], axis=1).astype(np.int64)
    src = src[np.lexsort((src[:, 0], src[:, 1]))]
    trg = np.stack([rng.integers(0, grid_n, n_targets),
                    rng.integers(0, grid_n, n_targets)], axis=1).astype(np.int64)
    trg = trg[np.lexsort((trg[:, 0], trg[:, 1]))]
    sources = ObservationSet(src, lane_width=4.0, arc_reach=25.0)
    targets = ReachableOccludedSet(trg, np.ones(n_targets, dtype=np.int64),
                                   np.zeros(n_targets, dtype=np.int64), ("bench",))
    built = update_apcm(sources, targets, occ, workers=workers)  # warm the jit cache
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        update_apcm(sources, targets, occ, workers=workers)
        times.append(time.perf_counter() - t0)
    times = np.asarray(times)
    mean = float(times.mean())
    return {
        "grid_n": grid_n,
        "n_sources": n_sources,
        "n_targets": n_targets,
        "repeats": repeats,
        "workers": _resolve_workers(workers),
        "mean_ms": mean * 1e3,
        "std_ms": float(times.std()) * 1e3,
        "rays_per_s": n_sources * n_targets / mean,
        "digest": hashlib.sha256(built.raw.tobytes()).hexdigest(),
    }
