"""Kinematic bicycle model with an RK4 integrator.

State is (x, y, v, theta) at the rear axle:

    dx/dt = v cos(theta)
    dy/dt = v sin(theta)
    dv/dt = a
    dtheta/dt = v tan(delta) / L

Controls are clamped to the actuation limits before integrating; speed is
clamped to its bounds after each full step and heading is wrapped to
(-pi, pi].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.9
    a_min: float = -6.0
    a_max: float = 3.0
    delta_max: float = 0.6
    v_min: float = 0.0
    v_max: float = 15.0


@dataclass
class VehicleState:
    x: float
    y: float
    v: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.theta], dtype=np.float64)


@dataclass(frozen=True)
class Control:
    a: float
    delta: float


def wrap_angle(theta: float) -> float:
    """Wrap into (-pi, pi]."""
    w = (theta + math.pi) % (2.0 * math.pi) - math.pi
    if w == -math.pi:
        w = math.pi
    return w


def clamp_control(control: Control, params: VehicleParams) -> Control:
    return Control(
        a=min(max(control.a, params.a_min), params.a_max),
        delta=min(max(control.delta, -params.delta_max), params.delta_max),
    )


def _deriv(x, y, v, th, a, tan_delta, L):
    return (v * math.cos(th), v * math.sin(th), a, v * tan_delta / L)


def step_rk4(state: VehicleState, control: Control, params: VehicleParams,
             dt: float) -> VehicleState:
    """One RK4 step of the bicycle dynamics."""
    c = clamp_control(control, params)
    tan_d = math.tan(c.delta)
    L = params.wheelbase
    x, y, v, th = state.x, state.y, state.v, state.theta

    k1 = _deriv(x, y, v, th, c.a, tan_d, L)
    k2 = _deriv(x + 0.5 * dt * k1[0], y + 0.5 * dt * k1[1],
                v + 0.5 * dt * k1[2], th + 0.5 * dt * k1[3], c.a, tan_d, L)
    k3 = _deriv(x + 0.5 * dt * k2[0], y + 0.5 * dt * k2[1],
                v + 0.5 * dt * k2[2], th + 0.5 * dt * k2[3], c.a, tan_d, L)
    k4 = _deriv(x + dt * k3[0], y + dt * k3[1],
                v + dt * k3[2], th + dt * k3[3], c.a, tan_d, L)

    nx = x + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
    ny = y + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
    nv = v + dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
    nth = th + dt / 6.0 * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3])

    nv = min(max(nv, params.v_min), params.v_max)
    return VehicleState(nx, ny, nv, wrap_angle(nth))


def rollout(state: VehicleState, controls: np.ndarray, params: VehicleParams,
            dt: float) -> np.ndarray:
    """Apply a (T, 2) control tape; returns the (T, 4) states after each step."""
    controls = np.asarray(controls, dtype=np.float64)
    if controls.ndim != 2 or controls.shape[1] != 2:
        raise ValueError("controls must be a (T, 2) array of (a, delta)")
    out = np.empty((controls.shape[0], 4), dtype=np.float64)
    s = state
    for t in range(controls.shape[0]):
        s = step_rk4(s, Control(controls[t, 0], controls[t, 1]), params, dt)
        out[t, 0] = s.x
        out[t, 1] = s.y
        out[t, 2] = s.v
        out[t, 3] = s.theta
    return out


