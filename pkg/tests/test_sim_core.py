from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reflexsim import sim_core as sc
from reflexsim.config import Config, GeometryConfig, SpawnConfig
from reflexsim.sim_core import Kind, Mode, Outcome

finite = st.floats(-50, 50, allow_nan=False)


def at_rest(cfg):
    return sc.initial_state(cfg.sim)


def obstacle(p, v=(0.0, 0.0), r=0.15, kind=Kind.THREAT):
    return sc.Obstacle(p_o=np.asarray(p, float), v_o=np.asarray(v, float), radius=np.array(r),
                       kind=np.array(int(kind)), spawn_time=np.array(0.0))


# ---------------------------------------------------------------- step


def test_zero_command_keeps_state_at_rest(cfg):
    s0 = at_rest(cfg)
    s1 = sc.step(s0, [0.0, 0.0, 0.0], Mode.LOW, cfg.sim)
    for name in ("p", "yaw", "v_world", "yaw_rate", "channel_vel", "channel_torque"):
        np.testing.assert_array_equal(getattr(s1, name), getattr(s0, name))


def test_high_mode_forward_accel_is_clamped(cfg):
    s1 = sc.step(at_rest(cfg), [10.0, 0.0, 0.0], Mode.HIGH, cfg.sim)
    assert s1.v_world[0] / cfg.sim.dt == pytest.approx(5.5, abs=1e-9)


def test_constant_deceleration_closed_form(cfg):
    s = at_rest(cfg)
    s.v_world = np.array([1.0, 0.0])
    for _ in range(50):
        s = sc.step(s, [-1.0, 0.0, 0.0], Mode.LOW, cfg.sim)
    # closed form: v = v0 - a t = 0, x = v0 t - a t^2 / 2 = 0.5
    assert np.linalg.norm(s.v_world) == pytest.approx(0.0, abs=1e-9)
    assert s.p[0] == pytest.approx(0.5, abs=1e-6)
    assert s.p[1] == pytest.approx(0.0, abs=1e-12)


def test_non_finite_command_rejected(cfg):
    with pytest.raises(sc.InvalidCommandError):
        sc.step(at_rest(cfg), [np.nan, 0.0, 0.0], Mode.LOW, cfg.sim)
    with pytest.raises(sc.InvalidCommandError):
        sc.step(at_rest(cfg), [0.0, np.inf, 0.0], Mode.HIGH, cfg.sim)


def test_clamp_soundness_over_random_commands(cfg):
    rng = np.random.default_rng(0)
    a = rng.normal(scale=20.0, size=(100_000, 3))
    mode = rng.integers(0, 2, size=100_000)
    out = sc.clamp_accel(a, mode, cfg.sim)
    ax, ay, aw, _, _ = sc.mode_limits(mode, cfg.sim)
    q = np.hypot(out[:, 0] / ax, out[:, 1] / ay)
    assert np.all(q <= 1.0 + 1e-9)
    low = mode == Mode.LOW
    assert np.all(np.hypot(out[low, 0], out[low, 1]) <= cfg.sim.low_accel + 1e-9)
    assert np.all(np.abs(out[~low, 0]) <= cfg.sim.high_accel_x + 1e-9)
    assert np.all(np.abs(out[~low, 1]) <= cfg.sim.high_accel_y + 1e-9)
    assert np.all(np.abs(out[:, 2]) <= aw + 1e-9)


@given(st.lists(finite, min_size=3, max_size=3), st.sampled_from([Mode.LOW, Mode.HIGH]))
def test_clamp_keeps_direction_and_inside_points(a, mode):
    cfg = Config()
    a = np.asarray(a)
    out = sc.clamp_accel(a, mode, cfg.sim)
    cross = a[0] * out[1] - a[1] * out[0]
    assert abs(cross) <= 1e-9 * max(1.0, np.hypot(a[0], a[1]))
    assert np.dot(a[:2], out[:2]) >= 0
    inside = sc.clamp_accel(out, mode, cfg.sim)
    np.testing.assert_allclose(inside, out, atol=1e-12)


def test_speed_never_exceeds_mode_cap(cfg):
    rng = np.random.default_rng(3)
    s = sc.initial_state(cfg.sim, (64,))
    mode = rng.integers(0, 2, size=64)
    for _ in range(400):
        s = sc.step(s, rng.normal(scale=6.0, size=(64, 3)), mode, cfg.sim)
        speed = np.linalg.norm(s.v_world, axis=1)
        vmax = np.where(mode == Mode.HIGH, cfg.sim.high_vmax, cfg.sim.low_vmax)
        assert np.all(speed <= vmax + 1e-9)
        assert np.all((s.yaw > -math.pi) & (s.yaw <= math.pi))
        assert s.channel_vel.shape == (64, 8) and s.channel_torque.shape == (64, 8)


def test_rolling_configuration_limits_lateral_accel(cfg):
    s = at_rest(cfg)
    s.v_world = np.array([3.0, 0.0])
    s = sc.step(s, [5.0, 0.0, 0.0], Mode.HIGH, cfg.sim)
    assert sc.wheel_power_fraction(s.channel_torque, s.channel_vel) > cfg.sim.rolling_power_fraction
    v0 = s.v_world.copy()
    s1 = sc.step(s, [0.0, 3.0, 0.0], Mode.HIGH, cfg.sim)
    lateral = (s1.v_world[1] - v0[1]) / cfg.sim.dt
    assert lateral == pytest.approx(cfg.sim.high_accel_y * cfg.sim.rolling_lateral_factor, rel=1e-9)


def test_wheel_lock_braking(cfg):
    s = at_rest(cfg)
    s.v_world = np.array([3.0, 0.0])
    s1 = sc.step(s, [-5.5, 0.0, 0.0], Mode.HIGH, cfg.sim)
    assert bool(s1.wheel_locked)
    np.testing.assert_array_equal(s1.channel_vel[:2], 0.0)
    decel = (3.0 - s1.v_world[0]) / cfg.sim.dt
    assert decel == pytest.approx(min(cfg.sim.high_accel_x, cfg.sim.friction * cfg.sim.gravity * 1.4), rel=1e-9)
    # LOW mode never locks
    s2 = sc.step(s, [-5.5, 0.0, 0.0], Mode.LOW, cfg.sim)
    assert not bool(s2.wheel_locked)


def test_locked_wheels_never_reverse(cfg):
    s = at_rest(cfg)
    s.v_world = np.array([0.06, 0.0])
    s1 = sc.step(s, [-5.5, 0.0, 0.0], Mode.HIGH, cfg.sim)
    assert s1.v_world[0] == 0.0


def test_gain_scales_command_before_clamp(cfg):
    dyn = sc.Dynamics.nominal(cfg.sim)
    dyn.gain = np.array(0.5)
    s1 = sc.step(at_rest(cfg), [1.0, 0.0, 0.0], Mode.LOW, cfg.sim, dyn=dyn)
    assert s1.v_world[0] / cfg.sim.dt == pytest.approx(0.5, rel=1e-9)


def test_push_acts_only_inside_window(cfg):
    dyn = sc.Dynamics.nominal(cfg.sim)
    dyn.push = np.array([0.0, 0.4])
    dyn.push_start, dyn.push_end = np.array(0.1), np.array(0.2)
    s = sc.step(at_rest(cfg), [0, 0, 0], Mode.LOW, cfg.sim, dyn=dyn, t=0.0)
    assert np.all(s.v_world == 0)
    s = sc.step(at_rest(cfg), [0, 0, 0], Mode.LOW, cfg.sim, dyn=dyn, t=0.1)
    assert s.v_world[1] == pytest.approx(0.4 * cfg.sim.dt)


def test_energy_bookkeeping_non_negative(cfg):
    rng = np.random.default_rng(5)
    s = sc.initial_state(cfg.sim, (32,))
    for _ in range(100):
        s = sc.step(s, rng.normal(scale=4.0, size=(32, 3)), rng.integers(0, 2, 32), cfg.sim)
        assert np.all(sc.total_power(s.channel_torque, s.channel_vel) >= 0)


# ---------------------------------------------------------------- collision geometry


def perimeter_distance(point, hl, hw, yaw=0.0, n=4000):
    """Brute-force oracle: distance to densely sampled rectangle edges, signed by containment."""
    s = np.linspace(-1.0, 1.0, n)
    edges = np.concatenate([
        np.stack([s * hl, np.full(n, hw)], 1), np.stack([s * hl, np.full(n, -hw)], 1),
        np.stack([np.full(n, hl), s * hw], 1), np.stack([np.full(n, -hl), s * hw], 1),
    ])
    c, sn = math.cos(yaw), math.sin(yaw)
    world = edges @ np.array([[c, sn], [-sn, c]])
    d = np.min(np.linalg.norm(world - point, axis=1))
    body = np.array([c * point[0] + sn * point[1], -sn * point[0] + c * point[1]])
    inside = abs(body[0]) < hl and abs(body[1]) < hw
    return -d if inside else d


def test_collision_distance_examples(cfg):
    geom = GeometryConfig(half_length=0.4, half_width=0.3)
    s = at_rest(cfg)
    assert float(sc.collision_distance(s, geom, obstacle([1.4, 0.0], r=0.2))) == pytest.approx(0.8, abs=1e-12)
    assert float(sc.collision_distance(s, geom, obstacle([0.4, 0.1], r=0.1))) == pytest.approx(-0.1, abs=1e-12)
    centre = float(sc.collision_distance(s, geom, obstacle([0.0, 0.0], r=0.15)))
    assert centre == pytest.approx(-(0.15 + 0.3))
    assert 0.8 == pytest.approx(perimeter_distance(np.array([1.4, 0.0]), 0.4, 0.3) - 0.2, abs=1e-3)


def test_collision_distance_matches_perimeter_sampling():
    rng = np.random.default_rng(11)
    cfg = Config()
    for _ in range(300):
        hl, hw = rng.uniform(0.1, 0.8, size=2)
        geom = GeometryConfig(half_length=hl, half_width=hw)
        s = at_rest(cfg)
        s.p = rng.uniform(-2, 2, size=2)
        s.yaw = np.array(rng.uniform(-math.pi, math.pi))
        p = s.p + rng.uniform(-2.5, 2.5, size=2)
        r = rng.uniform(0.05, 0.3)
        got = float(sc.collision_distance(s, geom, obstacle(p, r=r)))
        want = perimeter_distance(p - s.p, hl, hw, float(s.yaw)) - r
        assert got == pytest.approx(want, abs=1e-3)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-1e-2, 1e-2), st.floats(-1e-2, 1e-2),
       st.floats(-math.pi, math.pi))
def test_collision_distance_is_1_lipschitz(x, y, dx, dy, yaw):
    cfg = Config()
    s = at_rest(cfg)
    s.yaw = np.array(yaw)
    d0 = float(sc.collision_distance(s, cfg.geometry, obstacle([x, y])))
    d1 = float(sc.collision_distance(s, cfg.geometry, obstacle([x + dx, y + dy])))
    assert abs(d1 - d0) <= math.hypot(dx, dy) + 1e-12


def test_swept_clearance_catches_tunnelling(cfg):
    s = at_rest(cfg)
    o0 = obstacle([2.0, 0.0], v=[-150.0, 0.0])
    o1 = sc.step_obstacle(o0, cfg.sim.dt)  # jumps from x=2 to x=-1 in one step
    assert float(sc.collision_distance(s, cfg.geometry, o1)) > 0
    assert float(sc.swept_clearance(s, o0, s, o1, cfg.geometry)) < 0


def test_swept_clearance_matches_dense_interpolation():
    rng = np.random.default_rng(2)
    geom = GeometryConfig()
    for _ in range(200):
        a, b = rng.uniform(-2, 2, size=(2, 2))
        got = float(sc.segment_box_signed_distance(a, b, geom.half_length, geom.half_width))
        u = np.linspace(0, 1, 20001)[:, None]
        dense = sc.box_signed_distance(a + u * (b - a), geom.half_length, geom.half_width)
        want = dense.min()
        if want >= 0:
            assert got == pytest.approx(want, abs=1e-3)
        else:
            assert got <= 0.0


# ---------------------------------------------------------------- CPA


def dense_cpa(p, v, t_max=20.0):
    t = np.arange(0.0, t_max, 1e-3)
    d = np.linalg.norm(p[None] + t[:, None] * v[None], axis=1)
    k = int(np.argmin(d))
    return d[k], t[k]


@pytest.mark.parametrize("p,v,d,t", [
    ((5, 0), (-1, 0), 0.0, 5.0), ((3, 4), (0, -1), 3.0, 4.0), ((5, 0), (1, 0), 5.0, 0.0)])
def test_cpa_examples(p, v, d, t):
    pred = sc.cpa_predict(np.array(p, float), np.array(v, float))
    assert float(pred.d_min_pred) == pytest.approx(d, abs=1e-12)
    assert float(pred.t_cpa) == pytest.approx(t, abs=1e-12)
    dd, tt = dense_cpa(np.array(p, float), np.array(v, float))
    assert dd == pytest.approx(d, abs=1e-3)


def test_cpa_matches_dense_sampling():
    rng = np.random.default_rng(7)
    p = rng.uniform(-5, 5, size=(1000, 2))
    v = rng.uniform(-3, 3, size=(1000, 2))
    pred = sc.cpa_predict(p, v)
    for i in range(1000):
        d, _ = dense_cpa(p[i], v[i], t_max=float(pred.t_cpa[i]) + 1.0)
        assert float(pred.d_min_pred[i]) == pytest.approx(d, abs=1e-3)


def test_cpa_zero_velocity():
    pred = sc.cpa_predict(np.array([1.0, 2.0]), np.zeros(2))
    assert float(pred.t_cpa) == 0.0
    assert float(pred.d_min_pred) == pytest.approx(math.sqrt(5))


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_cpa_invariants(px, py, vx, vy):
    pred = sc.cpa_predict(np.array([px, py]), np.array([vx, vy]))
    assert float(pred.d_min_pred) >= 0 and float(pred.t_cpa) >= 0
    if px * vx + py * vy > 0:
        assert float(pred.t_cpa) == 0.0


# ---------------------------------------------------------------- spawning


def test_spawn_speed_matches_band():
    rng = np.random.default_rng(0)
    spawn = SpawnConfig()
    for _ in range(500):
        o = sc.spawn_obstacle(rng, (2.0, 3.0), GeometryConfig(), spawn, 0.15, kind=Kind.THREAT)
        d0 = float(np.linalg.norm(o.p_o))
        speed = float(np.linalg.norm(o.v_o))
        assert 3.0 <= d0 <= 5.0
        assert d0 / 3.0 - 1e-9 <= speed <= d0 / 2.0 + 1e-9
        assert 2.0 - 1e-9 <= float(o.reaction_time) <= 3.0 + 1e-9
    # drawn distance 4.0 in band [2, 3] -> speed in [1.33, 2.0]
    assert 4.0 / 3.0 == pytest.approx(1.33, abs=0.01)


def test_spawn_kind_invariants():
    rng = np.random.default_rng(1)
    spawn = SpawnConfig()
    for _ in range(300):
        still = sc.spawn_obstacle(rng, (1, 2), GeometryConfig(), spawn, 0.15, kind=Kind.STILL)
        assert float(np.linalg.norm(still.v_o)) < 0.05
        nc = sc.spawn_obstacle(rng, (0.0, 1.0), GeometryConfig(), spawn, 0.15, kind=Kind.NON_CENTRAL)
        assert float(sc.cpa_predict(nc.p_o, nc.v_o).d_min_pred) > 0.4


def test_spawn_nonthreat_fraction():
    rng = np.random.default_rng(2)
    kinds = [int(sc.spawn_obstacle(rng, (0, 3.5), GeometryConfig(), SpawnConfig(), 0.15).kind)
             for _ in range(10_000)]
    frac = np.mean([k != Kind.THREAT for k in kinds])
    assert frac == pytest.approx(0.05, abs=0.01)
    still = np.mean([k == Kind.STILL for k in kinds])
    assert still == pytest.approx(0.025, abs=0.008)


def test_spawn_angles_cover_circle():
    rng = np.random.default_rng(4)
    ang = [math.atan2(*sc.spawn_obstacle(rng, (1, 2), GeometryConfig(), SpawnConfig(), 0.15).p_o[::-1])
           for _ in range(4000)]
    hist, _ = np.histogram(ang, bins=8, range=(-math.pi, math.pi))
    assert hist.min() > 400


# ---------------------------------------------------------------- termination


def term(cfg, state, obs, t=1.0, min_clear=1.0, closing=True, geom=None):
    return int(sc.check_termination(state, geom or cfg.geometry, obs, t, min_clearance=min_clear,
                                    closing_seen=closing, cfg=cfg.sim))


def test_termination_outcomes(cfg):
    s = at_rest(cfg)
    assert term(cfg, s, obstacle([3, 0], [-1, 0]), min_clear=-0.01) == Outcome.COLLISION
    geom = GeometryConfig(delta_safe=0.2)
    assert term(cfg, s, obstacle([-3, 0], [-1, 0]), min_clear=0.3, geom=geom) == Outcome.SUCCESS
    assert term(cfg, s, obstacle([-3, 0], [-1, 0]), min_clear=0.15, geom=geom) == Outcome.RUNNING
    still = obstacle([4, 0], [0.0, 0.0], kind=Kind.STILL)
    assert term(cfg, s, still, t=cfg.sim.horizon, closing=False) == Outcome.TIMEOUT
    assert term(cfg, s, obstacle([3, 0], [-1, 0]), t=0.5) == Outcome.RUNNING


def test_instability_outcome(cfg):
    s = at_rest(cfg)
    s.v_world = np.array([1.3 * cfg.sim.low_vmax, 0.0])
    assert term(cfg, s, obstacle([3, 0], [-1, 0])) == Outcome.INSTABILITY
    s = at_rest(cfg)
    s.yaw_rate = np.array(9.0)
    assert term(cfg, s, obstacle([3, 0], [-1, 0])) == Outcome.INSTABILITY


def test_collision_takes_precedence(cfg):
    s = at_rest(cfg)
    s.v_world = np.array([5.0, 0.0])
    assert term(cfg, s, obstacle([0.3, 0], [-1, 0]), min_clear=-0.2, t=cfg.sim.horizon) == Outcome.COLLISION


def test_wrap_angle_range():
    a = np.linspace(-20, 20, 10001)
    w = sc.wrap_angle(a)
    assert np.all((w > -math.pi) & (w <= math.pi))
    np.testing.assert_allclose(np.cos(w), np.cos(a), atol=1e-9)
    assert float(sc.wrap_angle(-math.pi)) == pytest.approx(math.pi)
