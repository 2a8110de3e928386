"""Occlusion-aware perspective cost maps, a sampling-based planner, and a
2D scenario simulator for comparing visibility-seeking driving behaviors."""

from apcm.controller import (
    METHODS,
    CostContext,
    Obstacle,
    PhantomAgent,
    PlannerConfig,
    PlannerError,
    SafetyAction,
    make_box_obstacle,
    mppi_plan,
    safety_filter,
    stage_cost,
)
from apcm.grid import (
    CellIndex,
    GridError,
    OccupancyGrid,
    SensorModel,
    UncertainSet,
    dump_grid,
    load_grid,
    make_grid,
    merge_maps,
    sensor_scan,
    threshold_uncertain,
)
from apcm.reachability import (
    PEDESTRIAN,
    AgentClass,
    PlannedTrajectory,
    ReachableOccludedSet,
    reach_step,
    reachable_occluded,
)
from apcm.scenario import (
    FAMILIES,
    EpisodeResult,
    ScenarioSpec,
    aggregate_metrics,
    build_scenario,
    clutter_measure,
    run_episode,
)
from apcm.vehicle import Control, VehicleParams, VehicleState, rollout, step_rk4
from apcm.visibility import (
    ObservationSet,
    PerspectiveCostMap,
    VisibilityError,
    benchmark_update,
    cast_ray,
    perspective_value,
    select_observation_cells,
    trace_cells,
    update_apcm,
)

__version__ = "0.1.0"
