from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reflexsim import threat as th
from reflexsim.config import ThreatConfig
from reflexsim.sim_core import cpa_predict

coord = st.floats(-10, 10, allow_nan=False)


def test_rar_examples():
    assert float(th.compute_rar([1.0, 0.0], [0.0, 1.0])) == 0.0
    assert float(th.compute_rar([3.0, 4.0], [0.0, 0.0])) == 0.0
    assert float(th.compute_rar([3.0, 4.0], [-3.0, -4.0])) == pytest.approx(5.0, abs=1e-12)


def test_rar_matches_finite_difference_of_range():
    rng = np.random.default_rng(0)
    h = 1e-4
    for _ in range(200):
        p, v = rng.uniform(-5, 5, size=(2, 2))
        if np.linalg.norm(p) < 0.1:
            continue
        fd = -(np.linalg.norm(p + h * v) - np.linalg.norm(p - h * v)) / (2 * h)
        assert float(th.compute_rar(p, v)) == pytest.approx(fd, abs=1e-6)


def test_rar_degenerate_geometry():
    with pytest.raises(th.DegenerateGeometryError):
        th.compute_rar([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(th.DegenerateGeometryError):
        th.threat_indicator([1e-7, 0.0], [1.0, 0.0], ThreatConfig())
    assert float(th.assess(np.zeros(2), np.ones(2), ThreatConfig()).kappa) == 0.0


def test_trigger_examples():
    t = ThreatConfig(v_th=1.5, d_th=1.0)
    assert bool(th.trigger([4.0, 0.0], [2.0, 0.0], t))
    assert bool(th.trigger([0.5, 0.0], [0.0, 0.0], t))
    assert not bool(th.trigger([4.0, 0.0], [0.1, 0.0], t))


def test_threat_indicator_examples():
    t = ThreatConfig(kappa_th=0.5, d_safe=0.4)
    assert bool(th.threat_indicator([4.0, 0.0], [-3.0, 0.0], t))
    # passes 2 m to the side: predicted miss distance exceeds d_safe
    assert not bool(th.threat_indicator([4.0, 2.0], [-3.0, 0.0], t))
    # closing slowly (kappa = 0.3) on a collision course
    assert not bool(th.threat_indicator([4.0, 0.0], [-0.3, 0.0], t))


@given(coord, coord, coord, coord, st.floats(0.01, 100))
def test_rar_scales_linearly_with_velocity(px, py, vx, vy, c):
    if math.hypot(px, py) <= 1e-3:
        return
    k1 = float(th.compute_rar([px, py], [vx, vy]))
    k2 = float(th.compute_rar([px, py], [c * vx, c * vy]))
    assert k2 == pytest.approx(c * k1, rel=1e-9, abs=1e-9)


@given(coord, coord, coord, coord, coord, coord)
def test_translation_invariance(px, py, vx, vy, sx, sy):
    robot = np.array([sx, sy])
    obs = robot + np.array([px, py])
    if math.hypot(px, py) <= 1e-3:
        return
    a = th.assess(obs - robot, np.array([vx, vy]), ThreatConfig())
    b = th.assess(np.array([px, py]), np.array([vx, vy]), ThreatConfig())
    assert float(a.kappa) == pytest.approx(float(b.kappa), abs=1e-9)
    assert bool(a.alpha) == bool(b.alpha)


def test_assess_agrees_with_straight_reevaluation():
    rng = np.random.default_rng(9)
    t = ThreatConfig()
    p = rng.uniform(-6, 6, size=(10_000, 2))
    v = rng.uniform(-4, 4, size=(10_000, 2))
    st_ = th.assess(p, v, t)
    for i in range(10_000):
        dist = math.hypot(*p[i])
        speed = math.hypot(*v[i])
        kappa = -(p[i] @ v[i]) / dist
        alpha = speed > t.v_th or dist < t.d_th
        d_pred = float(cpa_predict(p[i], v[i]).d_min_pred)
        xi = kappa > t.kappa_th and d_pred < t.d_safe
        assert bool(st_.alpha[i]) == alpha
        assert bool(st_.xi[i]) == xi
        assert st_.kappa[i] == pytest.approx(kappa, abs=1e-12)
