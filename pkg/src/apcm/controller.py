"""Sampling-based trajectory optimizer with pluggable visibility rewards.

Each planning tick draws K perturbed control tapes around a nominal tape,
rolls them through the bicycle model, scores tracking error, obstacle
clearance, and the selected visibility term, then blends the tapes with
softmin weights exp(-(cost - min) / lambda).  Scoring runs per sample in
a compiled kernel; every cross-sample reduction happens afterwards in
fixed order, so a fixed seed reproduces the plan bit for bit regardless
of how the samples were scheduled.

Visibility plugins:
    proposed   reward for standing on high-value perspective map cells
    higgins    log-barrier style penalty growing near occluding obstacles
    andersen   reward for keeping the closest upcoming obstacle at a wide
               bearing from the travel axis
    none       tracking and clearance only
    nominal    tracking only, obstacles ignored

A separate time-to-collision guard runs after planning and may only ever
reduce the commanded acceleration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit, prange

from apcm.vehicle import Control, VehicleParams, VehicleState, rollout

METHODS = ("proposed", "higgins", "andersen", "none", "nominal")
_METHOD_IDS = {name: i for i, name in enumerate(
    ("none", "proposed", "higgins", "andersen", "nominal"))}


class PlannerError(RuntimeError):
    pass


@dataclass(frozen=True)
class Obstacle:
    """A sensed static obstacle: center, bounding box corners, fitted circle."""

    position: tuple[float, float]
    vertices: np.ndarray        # (4, 2) box corners
    radius: float               # half diagonal of the box

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.shape != (4, 2):
            raise ValueError("obstacle vertices must be (4, 2)")
        object.__setattr__(self, "vertices", v)
        if not self.radius > 0:
            raise ValueError("obstacle radius must be positive")


def make_box_obstacle(center: tuple[float, float], length: float, width: float,
                      yaw: float = 0.0) -> Obstacle:
    cx, cy = center
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    corners = []
    for ex, ey in ((hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)):
        corners.append((cx + c * ex - s * ey, cy + s * ex + c * ey))
    return Obstacle((cx, cy), np.array(corners), math.hypot(hl, hw))


@dataclass(frozen=True)
class PhantomAgent:
    """Worst-case hidden agent assumed to sprint straight at the plan."""

    position: tuple[float, float]
    v_max: float = 1.9


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 25
    dt: float = 0.1
    samples: int = 10000
    temperature: float = 1.0
    noise_a: float = 1.0
    noise_delta: float = 0.15
    q: tuple = (0.5, 0.05, 1.0, 8.0)
    qf: tuple = (2.0, 0.5, 2.0, 2.0)
    r: tuple = (0.05, 0.5)
    r_safe: float = 2.5
    penalty: float = 1e5
    method: str = "proposed"
    m_proposed: float = 100.0
    m_higgins: float = 7e-6
    lambda_andersen: float = 1.75
    r_fov: float = 30.0
    exp_guard: float = 30.0
    ttc_threshold: float = 1.5
    ttc_buffer: float = 0.75
    stop_margin: float = 1.5
    vehicle: VehicleParams = field(default_factory=VehicleParams)

    def __post_init__(self):
        if self.method not in METHODS:
            raise PlannerError(f"unknown method {self.method!r}, pick from {METHODS}")
        if self.horizon < 1 or self.samples < 1:
            raise PlannerError("horizon and samples must be >= 1")
        if self.dt <= 0 or self.temperature <= 0:
            raise PlannerError("dt and temperature must be positive")
        if self.noise_a < 0 or self.noise_delta < 0:
            raise PlannerError("noise scales must be >= 0")


@dataclass
class CostContext:
    """Everything the cost terms need beyond the reference trajectory."""

    obstacles: tuple = ()
    apcm_values: np.ndarray | None = None
    apcm_origin: tuple[float, float] = (0.0, 0.0)
    apcm_resolution: float = 1.0


@dataclass(frozen=True)
class SafetyAction:
    action: str                 # "pass", "limit", or "brake"
    ttc: float
    conflict_arc: float


def _wrap(d):
    return (d + math.pi) % (2.0 * math.pi) - math.pi


def _vis_cost(x, y, th, cfg: PlannerConfig, ctx: CostContext) -> float:
    method = cfg.method
    if method in ("none", "nominal"):
        return 0.0
    if method == "proposed":
        vals = ctx.apcm_values
        if vals is None:
            return 0.0
        col = int(math.floor((x - ctx.apcm_origin[0]) / ctx.apcm_resolution))
        row = int(math.floor((y - ctx.apcm_origin[1]) / ctx.apcm_resolution))
        if 0 <= col < vals.shape[1] and 0 <= row < vals.shape[0]:
            return -cfg.m_proposed * float(vals[row, col])
        return 0.0
    if method == "higgins":
        score = 0.0
        for ob in ctx.obstacles:
            d = max(math.hypot(x - ob.position[0], y - ob.position[1]), 1e-9)
            inner = (ob.radius / d) * (cfg.r_fov * cfg.r_fov - d * d)
            if inner > cfg.exp_guard:
                term = inner
            else:
                term = math.log1p(math.exp(inner))
            score += term * term
        return cfg.m_higgins * score
    # andersen: widest bearing to the closest obstacle still ahead
    best_d = math.inf
    best_ob = None
    for ob in ctx.obstacles:
        rx = ob.position[0] - x
        ry = ob.position[1] - y
        if rx * math.cos(th) + ry * math.sin(th) <= 0.0:
            continue
        d = math.hypot(rx, ry)
        if d < best_d:
            best_d = d
            best_ob = ob
    if best_ob is None:
        return 0.0
    min_ang = math.inf
    for vx, vy in best_ob.vertices:
        ang = abs(_wrap(math.atan2(vy - y, vx - x) - th))
        min_ang = min(min_ang, ang)
    return -cfg.lambda_andersen * min_ang


def stage_cost(state: np.ndarray, control: np.ndarray, ref_state: np.ndarray,
               ref_control: np.ndarray, cfg: PlannerConfig, ctx: CostContext,
               terminal: bool = False) -> float:
    """Reference scoring of one step; the batch kernel mirrors this exactly."""
    x, y, v, th = (float(state[i]) for i in range(4))
    q = cfg.qf if terminal else cfg.q
    dth = _wrap(th - float(ref_state[3]))
    cost = (q[0] * (x - float(ref_state[0])) ** 2
            + q[1] * (y - float(ref_state[1])) ** 2
            + q[2] * (v - float(ref_state[2])) ** 2
            + q[3] * dth * dth)
    da = float(control[0]) - float(ref_control[0])
    dd = float(control[1]) - float(ref_control[1])
    cost += cfg.r[0] * da * da + cfg.r[1] * dd * dd
    if cfg.method != "nominal":
        for ob in ctx.obstacles:
            if math.hypot(x - ob.position[0], y - ob.position[1]) <= cfg.r_safe:
                cost += cfg.penalty
                break
    cost += _vis_cost(x, y, th, cfg, ctx)
    return cost


@njit(parallel=True, cache=True)
def _score_samples(x0, applied, ref_s, ref_u, q, qf, r2, obs_xy, obs_r, obs_vert,
                   r_safe, penalty, method_id, m_scale, r_fov, exp_guard,
                   apcm, apcm_ox, apcm_oy, apcm_res, use_apcm,
                   L, dt, v_min, v_max, out):
    K = applied.shape[0]
    T = applied.shape[1]
    n_obs = obs_xy.shape[0]
    two_pi = 2.0 * math.pi
    for k in prange(K):
        x = x0[0]
        y = x0[1]
        v = x0[2]
        th = x0[3]
        cost = 0.0
        for t in range(T):
            a = applied[k, t, 0]
            delta = applied[k, t, 1]
            tan_d = math.tan(delta)
            # rk4, matching the scalar integrator step for step
            k1x = v * math.cos(th)
            k1y = v * math.sin(th)
            k1v = a
            k1t = v * tan_d / L
            v2 = v + 0.5 * dt * k1v
            t2 = th + 0.5 * dt * k1t
            k2x = v2 * math.cos(t2)
            k2y = v2 * math.sin(t2)
            k2v = a
            k2t = v2 * tan_d / L
            v3 = v + 0.5 * dt * k2v
            t3 = th + 0.5 * dt * k2t
            k3x = v3 * math.cos(t3)
            k3y = v3 * math.sin(t3)
            k3v = a
            k3t = v3 * tan_d / L
            v4 = v + dt * k3v
            t4 = th + dt * k3t
            k4x = v4 * math.cos(t4)
            k4y = v4 * math.sin(t4)
            k4v = a
            k4t = v4 * tan_d / L
            x = x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
            y = y + dt / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
            v = v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
            th = th + dt / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t)
            if v < v_min:
                v = v_min
            elif v > v_max:
                v = v_max
            th = (th + math.pi) % two_pi - math.pi
            if th == -math.pi:
                th = math.pi

            if t == T - 1:
                w0 = qf[0]
                w1 = qf[1]
                w2 = qf[2]
                w3 = qf[3]
            else:
                w0 = q[0]
                w1 = q[1]
                w2 = q[2]
                w3 = q[3]
            dth = (th - ref_s[t, 3] + math.pi) % two_pi - math.pi
            cost += (w0 * (x - ref_s[t, 0]) ** 2
                     + w1 * (y - ref_s[t, 1]) ** 2
                     + w2 * (v - ref_s[t, 2]) ** 2
                     + w3 * dth * dth)
            da = a - ref_u[t, 0]
            dd = delta - ref_u[t, 1]
            cost += r2[0] * da * da + r2[1] * dd * dd

            if method_id != 4:      # nominal ignores obstacles entirely
                for i in range(n_obs):
                    ddx = x - obs_xy[i, 0]
                    ddy = y - obs_xy[i, 1]
                    if ddx * ddx + ddy * ddy <= r_safe * r_safe:
                        cost += penalty
                        break

            if method_id == 1:      # proposed
                if use_apcm:
                    col = int(math.floor((x - apcm_ox) / apcm_res))
                    row = int(math.floor((y - apcm_oy) / apcm_res))
                    if 0 <= col < apcm.shape[1] and 0 <= row < apcm.shape[0]:
                        cost -= m_scale * apcm[row, col]
            elif method_id == 2:    # higgins
                score = 0.0
                for i in range(n_obs):
                    d = math.hypot(x - obs_xy[i, 0], y - obs_xy[i, 1])
                    if d < 1e-9:
                        d = 1e-9
                    inner = (obs_r[i] / d) * (r_fov * r_fov - d * d)
                    if inner > exp_guard:
                        term = inner
                    else:
                        term = math.log1p(math.exp(inner))
                    score += term * term
                cost += m_scale * score
            elif method_id == 3:    # andersen
                best_d = math.inf
                best_i = -1
                cth = math.cos(th)
                sth = math.sin(th)
                for i in range(n_obs):
                    rx = obs_xy[i, 0] - x
                    ry = obs_xy[i, 1] - y
                    if rx * cth + ry * sth <= 0.0:
                        continue
                    d = math.hypot(rx, ry)
                    if d < best_d:
                        best_d = d
                        best_i = i
                if best_i >= 0:
                    min_ang = math.inf
                    for j in range(4):
                        ang = math.atan2(obs_vert[best_i, j, 1] - y,
                                         obs_vert[best_i, j, 0] - x) - th
                        ang = abs((ang + math.pi) % two_pi - math.pi)
                        if ang < min_ang:
                            min_ang = ang
                    cost -= m_scale * min_ang
        out[k] = cost


def _method_scale(cfg: PlannerConfig) -> float:
    if cfg.method == "proposed":
        return cfg.m_proposed
    if cfg.method == "higgins":
        return cfg.m_higgins
    if cfg.method == "andersen":
        return cfg.lambda_andersen
    return 0.0


def mppi_plan(state: VehicleState, ref_states: np.ndarray, ref_controls: np.ndarray,
              cfg: PlannerConfig, ctx: CostContext, rng: np.random.Generator,
              nominal_tape: np.ndarray | None = None):
    """One planning tick.

    Returns (tape, planned_states, info).  The tape is the softmin-weighted
    blend of the sampled control tapes, clamped to the actuation limits;
    planned_states is its rollout.  Raises PlannerError if no sample has a
    finite cost.
    """
    T = cfg.horizon
    ref_states = np.asarray(ref_states, dtype=np.float64)
    ref_controls = np.asarray(ref_controls, dtype=np.float64)
    if ref_states.shape != (T, 4) or ref_controls.shape != (T, 2):
        raise PlannerError("reference shapes must be (T, 4) and (T, 2)")
    u_nom = ref_controls if nominal_tape is None else np.asarray(nominal_tape, float)
    if u_nom.shape != (T, 2):
        raise PlannerError("nominal tape shape must be (T, 2)")

    veh = cfg.vehicle
    noise = rng.normal(0.0, 1.0, size=(cfg.samples, T, 2))
    noise[:, :, 0] *= cfg.noise_a
    noise[:, :, 1] *= cfg.noise_delta
    applied = u_nom[None, :, :] + noise
    np.clip(applied[:, :, 0], veh.a_min, veh.a_max, out=applied[:, :, 0])
    np.clip(applied[:, :, 1], -veh.delta_max, veh.delta_max, out=applied[:, :, 1])

    n_obs = len(ctx.obstacles)
    obs_xy = np.array([ob.position for ob in ctx.obstacles],
                      dtype=np.float64).reshape(n_obs, 2)
    obs_r = np.array([ob.radius for ob in ctx.obstacles],
                     dtype=np.float64).reshape(n_obs)
    obs_vert = np.array([ob.vertices for ob in ctx.obstacles],
                        dtype=np.float64).reshape(n_obs, 4, 2)
    use_apcm = ctx.apcm_values is not None and cfg.method == "proposed"
    if use_apcm:
        apcm = np.ascontiguousarray(ctx.apcm_values, dtype=np.float64)
    else:
        apcm = np.zeros((1, 1))

    costs = np.empty(cfg.samples, dtype=np.float64)
    _score_samples(state.as_array(), applied, ref_states, ref_controls,
                   np.asarray(cfg.q, float), np.asarray(cfg.qf, float),
                   np.asarray(cfg.r, float), obs_xy, obs_r, obs_vert,
                   cfg.r_safe, cfg.penalty, _METHOD_IDS[cfg.method],
                   _method_scale(cfg), cfg.r_fov, cfg.exp_guard,
                   apcm, ctx.apcm_origin[0], ctx.apcm_origin[1],
                   ctx.apcm_resolution, use_apcm,
                   veh.wheelbase, cfg.dt, veh.v_min, veh.v_max, costs)

    finite = np.isfinite(costs)
    if not finite.any():
        raise PlannerError("every sampled trajectory scored a non-finite cost")
    weights = softmin_weights(costs, cfg.temperature)
    # perturbation form: with zero noise the reference comes back bit exact
    tape = u_nom + np.add.reduce(weights[:, None, None] * (applied - u_nom[None]),
                                 axis=0)
    np.clip(tape[:, 0], veh.a_min, veh.a_max, out=tape[:, 0])
    np.clip(tape[:, 1], -veh.delta_max, veh.delta_max, out=tape[:, 1])
    planned = rollout(state, tape, veh, cfg.dt)
    info = {
        "cost_min": float(np.min(costs[finite])),
        "cost_mean": float(np.mean(costs[finite])),
        "n_finite": int(finite.sum()),
    }
    return tape, planned, info


def softmin_weights(costs: np.ndarray, temperature: float) -> np.ndarray:
    """Normalized exp(-(c - min) / temperature); shift invariant by design."""
    costs = np.asarray(costs, dtype=np.float64)
    finite = np.isfinite(costs)
    shifted = costs - np.min(costs[finite])
    w = np.where(finite, np.exp(-shifted / temperature), 0.0)
    return w / np.add.reduce(w)


def shift_tape(tape: np.ndarray) -> np.ndarray:
    """Warm start for the next tick: drop the executed step, repeat the last."""
    out = np.empty_like(tape)
    out[:-1] = tape[1:]
    out[-1] = tape[-1]
    return out


def safety_filter(state: VehicleState, tape: np.ndarray, planned: np.ndarray,
                  phantoms, cfg: PlannerConfig) -> tuple[Control, SafetyAction]:
    """Time-to-collision guard against worst-case hidden agents.

    A phantom is assumed to sprint straight for any point of the planned
    path.  If it can reach some path point no later than the ego plus a
    buffer, that point is a conflict; when the ego's time headway to the
    nearest conflict drops under the threshold, acceleration is cut, down
    to full braking at half the threshold.  The commanded acceleration
    never increases and steering is left untouched.
    """
    first = Control(float(tape[0, 0]), float(tape[0, 1]))
    if not phantoms:
        return first, SafetyAction("pass", math.inf, math.inf)
    # arc distance from the current position along the planned path
    px = np.concatenate([[state.x], planned[:, 0]])
    py = np.concatenate([[state.y], planned[:, 1]])
    seg = np.hypot(np.diff(px), np.diff(py))
    arcs = np.cumsum(seg)
    conflict_arc = math.inf
    for ph in phantoms:
        d = np.hypot(planned[:, 0] - ph.position[0], planned[:, 1] - ph.position[1])
        t_phantom = d / max(ph.v_max, 1e-6)
        t_ego = cfg.dt * np.arange(1, planned.shape[0] + 1)
        hits = np.nonzero(t_phantom <= t_ego + cfg.ttc_buffer)[0]
        if hits.size:
            conflict_arc = min(conflict_arc, float(arcs[hits[0]]))
    if not math.isfinite(conflict_arc):
        return first, SafetyAction("pass", math.inf, math.inf)
    ttc = conflict_arc / max(state.v, 0.5)
    if ttc >= cfg.ttc_threshold:
        return first, SafetyAction("pass", ttc, conflict_arc)
    veh = cfg.vehicle
    if ttc < 0.5 * cfg.ttc_threshold:
        return Control(veh.a_min, first.delta), SafetyAction("brake", ttc, conflict_arc)
    s_free = max(conflict_arc - cfg.stop_margin, 0.5)
    a_req = -(state.v * state.v) / (2.0 * s_free)
    a_cmd = max(veh.a_min, min(first.a, a_req))
    return Control(a_cmd, first.delta), SafetyAction("limit", ttc, conflict_arc)
