import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apcm.controller import (
    CostContext,
    Obstacle,
    PhantomAgent,
    PlannerConfig,
    PlannerError,
    SafetyAction,
    _score_samples,
    make_box_obstacle,
    mppi_plan,
    safety_filter,
    shift_tape,
    softmin_weights,
    stage_cost,
)
from apcm.vehicle import Control, VehicleParams, VehicleState, rollout

ZERO_Q = replace(PlannerConfig(), q=(0.0,) * 4, qf=(0.0,) * 4, r=(0.0, 0.0))


def square_at(x, y, radius=1.0):
    # degenerate box: all four corners on the center, radius set by hand
    return Obstacle((x, y), np.full((4, 2), (x, y), dtype=float), radius)


def test_config_validation():
    with pytest.raises(PlannerError):
        PlannerConfig(method="frontier")
    with pytest.raises(PlannerError):
        PlannerConfig(samples=0)
    with pytest.raises(PlannerError):
        PlannerConfig(temperature=0.0)
    with pytest.raises(PlannerError):
        PlannerConfig(noise_a=-0.1)


def test_make_box_obstacle_geometry():
    ob = make_box_obstacle((2.0, 3.0), 4.0, 2.0)
    got = {tuple(v) for v in np.round(ob.vertices, 12)}
    assert got == {(4.0, 4.0), (4.0, 2.0), (0.0, 2.0), (0.0, 4.0)}
    assert ob.radius == pytest.approx(math.sqrt(5.0), rel=1e-15)
    rot = make_box_obstacle((0.0, 0.0), 4.0, 2.0, yaw=math.pi / 2.0)
    got = {tuple(v) for v in np.round(rot.vertices, 12)}
    assert got == {(-1.0, 2.0), (1.0, 2.0), (1.0, -2.0), (-1.0, -2.0)}


def test_tracking_term_hand_value():
    cfg = replace(PlannerConfig(), method="nominal",
                  q=(1.0, 2.0, 3.0, 4.0), qf=(2.0, 2.0, 2.0, 2.0),
                  r=(0.1, 0.2))
    state = np.array([1.0, -2.0, 0.5, math.pi / 2.0])
    ref_s = np.zeros(4)
    got = stage_cost(state, np.array([0.5, 0.1]), ref_s, np.zeros(2),
                     cfg, CostContext())
    # 1*1 + 2*4 + 3*0.25 + 4*(pi/2)^2 + 0.1*0.25 + 0.2*0.01
    assert got == pytest.approx(19.646604401089358, rel=1e-12)
    term = stage_cost(state, np.array([0.5, 0.1]), ref_s, np.zeros(2),
                      cfg, CostContext(), terminal=True)
    qf = cfg.qf[0]
    expect = qf * (1.0 + 4.0 + 0.25 + (math.pi / 2.0) ** 2) + 0.025 + 0.002
    assert term == pytest.approx(expect, rel=1e-12)


def test_obstacle_penalty_and_nominal_exemption():
    ctx = CostContext(obstacles=(square_at(1.0, 0.0),))
    state = np.zeros(4)
    cfg = replace(ZERO_Q, method="none")
    assert stage_cost(state, np.zeros(2), np.zeros(4), np.zeros(2), cfg, ctx) == 1e5
    cfg = replace(ZERO_Q, method="nominal")
    assert stage_cost(state, np.zeros(2), np.zeros(4), np.zeros(2), cfg, ctx) == 0.0


def test_proposed_reward_is_map_lookup():
    vals = np.arange(16, dtype=float).reshape(4, 4) / 15.0
    ctx = CostContext(apcm_values=vals, apcm_origin=(0.0, 0.0), apcm_resolution=1.0)
    cfg = replace(ZERO_Q, method="proposed", m_proposed=5.0)
    inside = np.array([2.5, 1.5, 0.0, 0.0])
    got = stage_cost(inside, np.zeros(2), np.zeros(4), np.zeros(2), cfg, ctx)
    assert got == pytest.approx(-5.0 * (6.0 / 15.0), rel=1e-15)
    outside = np.array([10.0, 10.0, 0.0, 0.0])
    assert stage_cost(outside, np.zeros(2), np.zeros(4), np.zeros(2), cfg, ctx) == 0.0
    assert stage_cost(inside, np.zeros(2), np.zeros(4), np.zeros(2), cfg,
                      CostContext()) == 0.0


def test_higgins_zero_crossing_value():
    # at range exactly r_fov the barrier exponent is 0, so each term is ln 2
    cfg = replace(ZERO_Q, method="higgins", m_higgins=3.0, r_fov=30.0)
    ctx = CostContext(obstacles=(square_at(30.0, 0.0),))
    got = stage_cost(np.zeros(4), np.zeros(2), np.zeros(4), np.zeros(2), cfg, ctx)
    assert got == pytest.approx(3.0 * math.log(2.0) ** 2, rel=1e-12)


def test_higgins_overflow_guard():
    # r_o=1, d=1, r_fov=3 puts the exponent at exactly 8
    ctx = CostContext(obstacles=(square_at(1.0, 0.0),))
    base = replace(ZERO_Q, method="higgins", m_higgins=1.0, r_fov=3.0, r_safe=0.5)
    guarded = replace(base, exp_guard=5.0)
    got = stage_cost(np.zeros(4), np.zeros(2), np.zeros(4), np.zeros(2),
                     guarded, ctx)
    assert got == 64.0
    soft = stage_cost(np.zeros(4), np.zeros(2), np.zeros(4), np.zeros(2), base, ctx)
    assert soft > 64.0
    assert (soft - 64.0) / 64.0 < 1e-3
    # the default threshold keeps the linearization error negligible
    assert abs(math.log1p(math.exp(30.0)) - 30.0) / 30.0 < 1e-14


def test_andersen_corner_bearing():
    verts = np.array([[10.0, 10.0], [10.0, -10.0], [11.0, 12.0], [11.0, -12.0]])
    ob = Obstacle((10.0, 0.0), verts, 2.0)
    cfg = replace(ZERO_Q, method="andersen", lambda_andersen=7.0)
    got = stage_cost(np.zeros(4), np.zeros(2), np.zeros(4), np.zeros(2),
                     cfg, CostContext(obstacles=(ob,)))
    assert got == pytest.approx(-7.0 * math.pi / 4.0, rel=1e-12)


def test_andersen_prunes_passed_and_picks_closest():
    cfg = replace(ZERO_Q, method="andersen", lambda_andersen=2.0)
    behind = CostContext(obstacles=(square_at(-5.0, 0.0),))
    assert stage_cost(np.zeros(4), np.zeros(2), np.zeros(4), np.zeros(2),
                      cfg, behind) == 0.0
    near = square_at(5.0, 3.0)
    far = square_at(9.0, 0.0)
    both = CostContext(obstacles=(far, near))
    got = stage_cost(np.zeros(4), np.zeros(2), np.zeros(4), np.zeros(2), cfg, both)
    assert got == pytest.approx(-2.0 * math.atan2(3.0, 5.0), rel=1e-12)


@pytest.mark.parametrize("method", ["none", "proposed", "higgins",
                                    "andersen", "nominal"])
def test_kernel_matches_stage_cost_sum(method):
    rng = np.random.default_rng(11)
    K, T = 40, 12
    cfg = replace(PlannerConfig(), horizon=T, samples=K, method=method,
                  m_proposed=4.0, m_higgins=0.2, lambda_andersen=3.0,
                  r_fov=12.0, r_safe=1.2)
    veh = cfg.vehicle
    obstacles = tuple(
        make_box_obstacle((rng.uniform(2, 14), rng.uniform(-4, 4)), 3.0, 1.6,
                          rng.uniform(-1, 1))
        for _ in range(3))
    vals = rng.uniform(0.0, 1.0, size=(30, 30))
    ctx = CostContext(obstacles=obstacles, apcm_values=vals,
                      apcm_origin=(-2.0, -6.0), apcm_resolution=0.4)
    x0 = np.array([0.0, 0.3, 6.0, 0.05])
    ref_u = np.column_stack([rng.uniform(-1, 1, T), rng.uniform(-0.3, 0.3, T)])
    ref_s = rollout(VehicleState(*x0), ref_u, veh, cfg.dt)
    applied = np.empty((K, T, 2))
    applied[:, :, 0] = np.clip(ref_u[None, :, 0] + rng.normal(0, 1.0, (K, T)),
                               veh.a_min, veh.a_max)
    applied[:, :, 1] = np.clip(ref_u[None, :, 1] + rng.normal(0, 0.15, (K, T)),
                               -veh.delta_max, veh.delta_max)

    from apcm.controller import _METHOD_IDS, _method_scale
    use_apcm = method == "proposed"
    out = np.empty(K)
    _score_samples(x0, applied, ref_s, ref_u,
                   np.asarray(cfg.q), np.asarray(cfg.qf), np.asarray(cfg.r),
                   np.array([ob.position for ob in obstacles]),
                   np.array([ob.radius for ob in obstacles]),
                   np.array([ob.vertices for ob in obstacles]),
                   cfg.r_safe, cfg.penalty, _METHOD_IDS[method],
                   _method_scale(cfg), cfg.r_fov, cfg.exp_guard,
                   vals if use_apcm else np.zeros((1, 1)),
                   ctx.apcm_origin[0], ctx.apcm_origin[1], ctx.apcm_resolution,
                   use_apcm, veh.wheelbase, cfg.dt, veh.v_min, veh.v_max, out)

    for k in range(0, K, 7):
        states = rollout(VehicleState(*x0), applied[k], veh, cfg.dt)
        want = sum(
            stage_cost(states[t], applied[k, t], ref_s[t], ref_u[t], cfg, ctx,
                       terminal=(t == T - 1))
            for t in range(T))
        assert out[k] == pytest.approx(want, rel=1e-9)


def test_zero_noise_returns_reference():
    cfg = replace(PlannerConfig(), samples=32, horizon=10,
                  noise_a=0.0, noise_delta=0.0, method="none")
    state = VehicleState(0.0, 0.0, 5.0, 0.0)
    ref_u = np.column_stack([np.full(10, 0.5), np.full(10, 0.1)])
    ref_s = rollout(state, ref_u, cfg.vehicle, cfg.dt)
    tape, planned, info = mppi_plan(state, ref_s, ref_u, cfg, CostContext(),
                                    np.random.default_rng(0))
    assert np.array_equal(tape, ref_u)
    assert np.array_equal(planned, ref_s)
    assert info["n_finite"] == 32


def test_same_seed_same_plan():
    cfg = replace(PlannerConfig(), samples=256, horizon=15)
    state = VehicleState(0.0, -1.75, 7.0, 0.0)
    ref_u = np.zeros((15, 2))
    ref_s = rollout(state, ref_u, cfg.vehicle, cfg.dt)
    ctx = CostContext(obstacles=(make_box_obstacle((8.0, 1.0), 4.8, 2.0),))
    tape_a, _, _ = mppi_plan(state, ref_s, ref_u, cfg, ctx,
                             np.random.default_rng(42))
    tape_b, _, _ = mppi_plan(state, ref_s, ref_u, cfg, ctx,
                             np.random.default_rng(42))
    tape_c, _, _ = mppi_plan(state, ref_s, ref_u, cfg, ctx,
                             np.random.default_rng(43))
    assert np.array_equal(tape_a, tape_b)
    assert not np.array_equal(tape_a, tape_c)


def test_tape_respects_actuation_limits():
    cfg = replace(PlannerConfig(), samples=128, horizon=12,
                  noise_a=50.0, noise_delta=5.0)
    state = VehicleState(0.0, 0.0, 5.0, 0.0)
    ref_u = np.zeros((12, 2))
    ref_s = rollout(state, ref_u, cfg.vehicle, cfg.dt)
    tape, _, _ = mppi_plan(state, ref_s, ref_u, cfg, CostContext(),
                           np.random.default_rng(1))
    veh = cfg.vehicle
    assert np.all(tape[:, 0] >= veh.a_min) and np.all(tape[:, 0] <= veh.a_max)
    assert np.all(np.abs(tape[:, 1]) <= veh.delta_max)


def test_all_samples_nonfinite_raises():
    cfg = replace(PlannerConfig(), samples=16, horizon=5,
                  penalty=math.inf, r_safe=1e9, method="none")
    state = VehicleState(0.0, 0.0, 5.0, 0.0)
    ref_u = np.zeros((5, 2))
    ref_s = rollout(state, ref_u, cfg.vehicle, cfg.dt)
    ctx = CostContext(obstacles=(square_at(50.0, 0.0),))
    with pytest.raises(PlannerError):
        mppi_plan(state, ref_s, ref_u, cfg, ctx, np.random.default_rng(3))


def test_softmin_weights_shift_invariant():
    costs = np.array([3.0, 7.0, 11.0, 3.0])
    assert np.array_equal(softmin_weights(costs, 1.0),
                          softmin_weights(costs + 1000.0, 1.0))
    w = softmin_weights(np.array([1.0, math.inf, 2.0]), 0.5)
    assert w[1] == 0.0
    assert w.sum() == pytest.approx(1.0, rel=1e-15)
    assert w[0] > w[2]


def test_planner_steers_off_blocked_reference():
    cfg = replace(PlannerConfig(), samples=1500, method="none")
    state = VehicleState(0.0, 0.0, 8.0, 0.0)
    T = cfg.horizon
    ref_s = np.column_stack([0.8 * np.arange(1, T + 1), np.zeros(T),
                             np.full(T, 8.0), np.zeros(T)])
    ref_u = np.zeros((T, 2))
    ctx = CostContext(obstacles=(make_box_obstacle((12.0, 0.0), 4.8, 2.0),))
    tape, planned, info = mppi_plan(state, ref_s, ref_u, cfg, ctx,
                                    np.random.default_rng(5))
    d = np.hypot(planned[:, 0] - 12.0, planned[:, 1])
    assert info["cost_min"] < cfg.penalty
    assert d.min() > 2.0


def test_shift_tape():
    tape = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(shift_tape(tape),
                          np.array([[3.0, 4.0], [5.0, 6.0], [5.0, 6.0]]))


def straight_plan(state, T=25, dt=0.1):
    xs = state.x + state.v * dt * np.arange(1, T + 1)
    return np.column_stack([xs, np.full(T, state.y), np.full(T, state.v),
                            np.zeros(T)])


def test_safety_filter_passes_without_phantoms():
    cfg = PlannerConfig()
    state = VehicleState(0.0, 0.0, 8.0, 0.0)
    tape = np.tile([0.3, 0.05], (cfg.horizon, 1))
    ctrl, act = safety_filter(state, tape, straight_plan(state), (), cfg)
    assert act.action == "pass"
    assert (ctrl.a, ctrl.delta) == (0.3, 0.05)


def test_safety_filter_hard_brakes_on_imminent_phantom():
    cfg = PlannerConfig()
    state = VehicleState(0.0, 0.0, 8.0, 0.0)
    tape = np.tile([0.5, 0.0], (cfg.horizon, 1))
    phantom = PhantomAgent((2.0, 0.5))
    ctrl, act = safety_filter(state, tape, straight_plan(state), (phantom,), cfg)
    assert act.action == "brake"
    assert ctrl.a == cfg.vehicle.a_min
    assert ctrl.delta == 0.0


def test_safety_filter_ignores_distant_phantom():
    cfg = PlannerConfig()
    state = VehicleState(0.0, 0.0, 8.0, 0.0)
    tape = np.tile([0.5, 0.0], (cfg.horizon, 1))
    phantom = PhantomAgent((10.0, 50.0))
    ctrl, act = safety_filter(state, tape, straight_plan(state), (phantom,), cfg)
    assert act.action == "pass"
    assert ctrl.a == 0.5


def test_safety_filter_limits_midrange_conflict():
    cfg = PlannerConfig()
    state = VehicleState(0.0, 0.0, 8.0, 0.0)
    tape = np.tile([0.0, 0.0], (cfg.horizon, 1))
    phantom = PhantomAgent((8.0, 2.5))
    ctrl, act = safety_filter(state, tape, straight_plan(state), (phantom,), cfg)
    assert act.action == "limit"
    assert cfg.vehicle.a_min < ctrl.a < 0.0


@settings(max_examples=80, deadline=None)
@given(
    px=st.floats(-5.0, 30.0), py=st.floats(-10.0, 10.0),
    v=st.floats(0.0, 15.0), a=st.floats(-6.0, 3.0),
)
def test_safety_filter_never_increases_acceleration(px, py, v, a):
    cfg = PlannerConfig()
    state = VehicleState(0.0, 0.0, v, 0.0)
    tape = np.tile([a, 0.0], (cfg.horizon, 1))
    plan = straight_plan(state)
    ctrl, _ = safety_filter(state, tape, plan, (PhantomAgent((px, py)),), cfg)
    assert ctrl.a <= a + 1e-12
    assert ctrl.a >= cfg.vehicle.a_min
