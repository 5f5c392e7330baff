import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumplab.errors import OutOfChart
from jumplab.geometry import (BallDomain, BallIntersection, BoundaryChart, ball_volume,
                              sphere_area, sphere_quadrature)
from jumplab.model import chart_rho


def test_sphere_constants():
    assert sphere_area(3) == pytest.approx(4 * math.pi, rel=1e-15)
    assert ball_volume(3, 0.5) == pytest.approx(4 / 3 * math.pi / 8, rel=1e-15)


def test_sphere_quadrature_integrates_polynomials():
    u, w = sphere_quadrature(3, 8)
    assert np.allclose(np.linalg.norm(u, axis=1), 1.0)
    assert w.sum() == pytest.approx(4 * math.pi, rel=1e-12)
    # second moment of u_1 over S^2 is 4 pi / 3
    assert np.sum(w * u[:, 0] ** 2) == pytest.approx(4 * math.pi / 3, rel=1e-10)


def test_ball_membership_and_delta():
    B = BallDomain(np.zeros(3), 0.5)
    assert B.contains(np.zeros(3))
    assert not B.contains(np.array([0.5, 0, 0]))
    assert B.delta(np.array([0.2, 0, 0])) == pytest.approx(0.3)
    assert B.distance(np.array([0.2, 0, 0])) == pytest.approx(0.3)


def test_ball_intersection():
    U = BallIntersection((BallDomain(np.zeros(3), 1.0), BallDomain(np.array([1.0, 0, 0]), 0.5)))
    assert U.contains(np.array([0.75, 0, 0]))
    assert not U.contains(np.array([0.4, 0, 0]))
    assert not U.contains(np.array([1.1, 0, 0]))


def test_chart_rho_examples():
    B = BallDomain(np.zeros(3), 1.0)
    ch = BoundaryChart.at(B, [0, 0, -1])
    assert np.allclose(ch.Q, [0, 0, -1])
    assert chart_rho(ch, ch.Q) == pytest.approx(0.0, abs=1e-15)
    assert chart_rho(ch, [0, 0, -0.9]) == pytest.approx(0.1, abs=1e-14)
    # chart point (0.1, 0, t): rho = t - phi(0.1) with the explicit sphere graph
    t = 0.05 + 1 - math.sqrt(1 - 0.01)
    u = np.array([0.1, 0.0, t])
    assert chart_rho(ch, u, frame="chart") == pytest.approx(0.05, abs=1e-14)
    y = ch.from_chart(u)
    assert chart_rho(ch, y) == pytest.approx(0.05, abs=1e-14)
    with pytest.raises(OutOfChart):
        chart_rho(ch, [0.5, 0, -0.8])


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3))
@settings(max_examples=50, deadline=None)
def test_chart_roundtrip(v):
    v = np.array(v)
    if np.linalg.norm(v) < 1e-3:
        return
    ch = BoundaryChart.at(BallDomain(np.array([0.1, 0.2, -0.3]), 0.5), v)
    y = np.array([0.05, -0.02, 0.11])
    assert np.allclose(ch.from_chart(ch.to_chart(y)), y, atol=1e-14)
    assert np.allclose(ch.frame @ ch.frame.T, np.eye(3), atol=1e-13)
    # the inward normal points to the center
    assert ch.inward_normal @ (ch.domain.center - ch.Q) > 0


def test_chart_constants():
    ch = BoundaryChart.at(BallDomain(np.zeros(3), 0.5), [1, 0, 0])
    R, R1 = 0.5, 0.5 / 8
    assert ch.M1 == pytest.approx(R * R / (R * R - R1 * R1) ** 1.5)
    assert ch.r0 == pytest.approx(R1 / (4 * (1 + ch.M1 ** 2)))
    assert ch.delta0 == pytest.approx(ch.r0 / 2)
    with pytest.raises(ValueError):
        BoundaryChart.at(BallDomain(np.zeros(3), 0.5), [1, 0, 0], R1=0.2)


def test_chart_box_membership():
    ch = BoundaryChart.at(BallDomain(np.zeros(3), 0.5), [1, 0, 0])
    box = ch.box(ch.delta0, ch.r0)
    inside = ch.normal_point(0.5 * ch.delta0)
    assert ch.in_box(inside, ch.delta0, ch.r0)
    assert box.contains(inside)
    assert not box.contains(ch.normal_point(2 * ch.delta0))
