"""Reachable subsets of the uncertain cells.

An uncertain cell matters to the planner only if some hidden agent could
actually get there while the current plan is being executed.  A cell z is
reachable at step n when ||x_n - z|| / (n * dt * v_max) <= 1, i.e. the
agent moving at its class speed can cover the gap in the elapsed time of
n control steps.  The reachable occluded set is the union over all steps
of the planned trajectory and all agent classes, and each cell remembers
the earliest step and the class that first reaches it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from apcm.grid import CellIndex, OccupancyGrid, UncertainSet

DEFAULT_DT = 0.1


class ReachabilityError(ValueError):
    pass


@dataclass(frozen=True)
class AgentClass:
    """A hidden agent category, e.g. pedestrian at walking pace."""

    name: str
    v_max: float

    def __post_init__(self):
        if not self.v_max > 0:
            raise ReachabilityError(f"agent v_max must be positive, got {self.v_max}")


PEDESTRIAN = AgentClass("pedestrian", 1.9)


@dataclass(frozen=True)
class PlannedTrajectory:
    """Positions the ego vehicle plans to occupy at steps 1..T."""

    points: np.ndarray   # (T, 2) world positions
    dt: float = DEFAULT_DT

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or (pts.size and pts.shape[1] != 2):
            raise ReachabilityError("trajectory points must be an (T, 2) array")
        if not self.dt > 0:
            raise ReachabilityError("trajectory dt must be positive")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class ReachableOccludedSet:
    """Reachable uncertain cells with their first-contact annotations."""

    cell_array: np.ndarray      # (n, 2) int64 (col, row), row-major order
    earliest_step: np.ndarray   # (n,) int64, 1-based step index
    reaching_class: np.ndarray  # (n,) int64 index into agents
    agents: tuple

    @property
    def cells(self) -> frozenset:
        return frozenset(CellIndex(int(c), int(r)) for c, r in self.cell_array)

    def __len__(self) -> int:
        return int(self.cell_array.shape[0])

    def annotation(self, cell: CellIndex) -> tuple[int, AgentClass]:
        for i, (c, r) in enumerate(self.cell_array):
            if (int(c), int(r)) == (cell[0], cell[1]):
                return int(self.earliest_step[i]), self.agents[self.reaching_class[i]]
        raise KeyError(cell)


def _cell_centers(cell_array: np.ndarray, grid: OccupancyGrid) -> np.ndarray:
    res = grid.resolution
    x0, y0 = grid.origin
    out = np.empty((cell_array.shape[0], 2), dtype=np.float64)
    out[:, 0] = x0 + (cell_array[:, 0] + 0.5) * res
    out[:, 1] = y0 + (cell_array[:, 1] + 0.5) * res
    return out


def reach_step(uncertain: UncertainSet, grid: OccupancyGrid, x_n: tuple[float, float],
               n: int, agent: AgentClass, dt: float = DEFAULT_DT) -> frozenset:
    """Cells of the uncertain set the agent could occupy at plan step n."""
    if n < 1:
        raise ReachabilityError(f"step index must be >= 1, got {n}")
    if dt <= 0:
        raise ReachabilityError("dt must be positive")
    if len(uncertain) == 0:
        return frozenset()
    centers = _cell_centers(uncertain.cell_array, grid)
    d = np.hypot(centers[:, 0] - x_n[0], centers[:, 1] - x_n[1])
    radius = n * dt * agent.v_max
    keep = d / radius <= 1.0
    return frozenset(CellIndex(int(c), int(r)) for c, r in uncertain.cell_array[keep])


def reachable_occluded(uncertain: UncertainSet, grid: OccupancyGrid,
                       traj: PlannedTrajectory,
                       agents: tuple = (PEDESTRIAN,)) -> ReachableOccludedSet:
    """Union of per-step reach sets over the trajectory and agent classes.

    Cell order in the result matches the uncertain set (row-major), so a
    fixed input produces a fixed output ordering.  Ties between classes at
    the same earliest step resolve to the class listed first.
    """
    if not agents:
        raise ReachabilityError("need at least one agent class")
    n_cells = len(uncertain)
    steps = len(traj)
    if n_cells == 0 or steps == 0:
        empty = np.empty((0, 2), dtype=np.int64)
        return ReachableOccludedSet(empty, np.empty(0, dtype=np.int64),
                                    np.empty(0, dtype=np.int64), tuple(agents))
    centers = _cell_centers(uncertain.cell_array, grid)
    diff = centers[:, None, :] - traj.points[None, :, :]
    dists = np.hypot(diff[..., 0], diff[..., 1])          # (cells, steps)
    n_idx = np.arange(1, steps + 1, dtype=np.float64)
    best_step = np.full(n_cells, np.iinfo(np.int64).max, dtype=np.int64)
    best_class = np.full(n_cells, -1, dtype=np.int64)
    for a_i, agent in enumerate(agents):
        radius = n_idx * traj.dt * agent.v_max            # (steps,)
        mask = dists / radius[None, :] <= 1.0
        hit = mask.any(axis=1)
        first = np.where(hit, mask.argmax(axis=1) + 1, np.iinfo(np.int64).max)
        better = first < best_step
        best_step[better] = first[better]
        best_class[better] = a_i
    keep = best_class >= 0
    return ReachableOccludedSet(uncertain.cell_array[keep].copy(),
                                best_step[keep].copy(),
                                best_class[keep].copy(), tuple(agents))
