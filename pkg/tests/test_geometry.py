import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import inside_ball, unit_vectors
from csda_transport import Ball, Ellipsoid, ImplicitDomain, SphereChart, boundary_quadrature
from csda_transport.errors import ArgumentError, ChartError
from csda_transport.geometry import rectify_ball_chart, unrectify_ball_chart

BALL = Ball()
TWIN = ImplicitDomain.from_ball(BALL)

unit = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: 0.1 < np.linalg.norm(v)).map(
    lambda v: np.asarray(v) / np.linalg.norm(v))
interior = st.tuples(*[st.floats(-0.55, 0.55)] * 3).map(np.asarray)


def test_escape_time_from_center_is_radius(rng):
    w = unit_vectors(rng, 50)
    assert np.allclose(BALL.escape_time(np.zeros((50, 3)), w), 1.0)


def test_escape_time_off_center():
    x, w = np.array([0.5, 0, 0]), np.array([1.0, 0, 0])
    assert BALL.escape_time(x, w) == pytest.approx(1.5, abs=1e-14)
    assert TWIN.escape_time(x, w) == pytest.approx(1.5, abs=1e-10)


def test_escape_time_vanishes_on_inflow_boundary():
    y, w = np.array([-1.0, 0, 0]), np.array([1.0, 0, 0])
    assert BALL.escape_time(y, w) == pytest.approx(0.0, abs=1e-14)


def test_chords():
    assert BALL.boundary_escape_time(np.array([-1.0, 0, 0]), np.array([1.0, 0, 0])) == pytest.approx(2.0)
    w = np.array([math.sqrt(0.5), math.sqrt(0.5), 0.0])
    y = np.array([0.0, -1.0, 0.0])
    assert BALL.boundary_escape_time(y, w) == pytest.approx(math.sqrt(2), abs=1e-12)
    assert TWIN.boundary_escape_time(y, w) == pytest.approx(math.sqrt(2), abs=1e-9)


def test_grazing_chord_shrinks():
    y = np.array([0.0, 0.0, 1.0])
    taus = [BALL.boundary_escape_time(y, np.array([math.cos(e), 0, -math.sin(e)])) for e in (1e-2, 1e-4, 1e-6)]
    assert taus[0] > taus[1] > taus[2] and taus[2] < 1e-5


def test_chord_rejects_wrong_side():
    with pytest.raises(ArgumentError):
        BALL.boundary_escape_time(np.array([-1.0, 0, 0]), np.array([-1.0, 0, 0]))


def test_escape_gradients_closed_form():
    dx, dw = BALL.escape_time_gradients(np.zeros(3), np.array([0.0, 0, 1]))
    assert np.allclose(dx, [0, 0, 1]) and np.allclose(dw, 0, atol=1e-12)
    dx, _ = BALL.escape_time_gradients(np.array([0.5, 0, 0]), np.array([1.0, 0, 0]))
    assert dx[0] == pytest.approx(1.0)


def test_escape_gradients_match_finite_differences(rng):
    x, w = inside_ball(rng, 100, 0.8), unit_vectors(rng, 100)
    a, _ = BALL.escape_time_gradients(x, w)
    b, _ = TWIN.escape_time_gradients(x, w)
    assert np.max(np.abs(a - b)) < 1e-5


@settings(max_examples=60, deadline=None)
@given(interior, unit)
def test_ray_cast_agrees_with_closed_form(x, w):
    assert abs(BALL.escape_time(x, w) - TWIN.escape_time(x, w)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(interior, unit)
def test_escape_point_lies_on_sphere(x, w):
    t = BALL.escape_time(x, w)
    assert np.linalg.norm(x - t * w) == pytest.approx(1.0, abs=1e-12)


def test_boundary_measures():
    q = boundary_quadrature(BALL, (32, 16), (16, 8))
    assert q.total_measure() == pytest.approx(16 * np.pi ** 2, rel=1e-3)
    assert q.inflow_measure() == pytest.approx(8 * np.pi ** 2, rel=1e-3)
    assert q.inflow_flux_measure() == pytest.approx(4 * np.pi ** 2, rel=1e-6)


def test_ellipsoid_volume_and_normals():
    e = Ellipsoid([1.0, 2.0, 0.5])
    assert e.volume() == pytest.approx(4 / 3 * np.pi * 1.0)
    assert np.allclose(e.normal(np.array([1.0, 0, 0])), [1, 0, 0], atol=1e-6)
    assert e.escape_time(np.zeros(3), np.array([0.0, 1, 0])) == pytest.approx(2.0, abs=1e-9)


def test_quadrature_volume_of_generic_domain():
    assert TWIN.volume() == pytest.approx(4 / 3 * np.pi, rel=1e-9)


@pytest.mark.parametrize("rule", ["gauss", "midpoint"])
def test_sphere_chart_weights_sum_to_area(rule):
    ch = SphereChart(16, 8, rule)
    assert ch.weights.sum() == pytest.approx(4 * np.pi)
    assert np.allclose(np.linalg.norm(ch.directions, axis=1), 1.0)


def test_gauss_chart_needs_even_theta():
    with pytest.raises(ArgumentError):
        SphereChart(8, 3, "gauss")


def test_rectifying_chart_examples():
    p = rectify_ball_chart(np.array([0.0, 0, 1]), np.array([0.0, 0, -1]))
    assert p.normal_dot == pytest.approx(-1) and p.b_tilde[2] == pytest.approx(2) and p.inflow
    p = rectify_ball_chart(np.array([0.0, 0, 1]), np.array([1.0, 0, 0]))
    assert p.normal_dot == 0 and p.b_tilde[2] == 0
    p = rectify_ball_chart(np.array([0.0, 0, 0.5]), np.array([1.0, 0, 0]))
    assert np.allclose(p.z, [0, 0, 0.75])
    assert np.allclose(unrectify_ball_chart(p.z), [0, 0, 0.5])
    with pytest.raises(ChartError):
        rectify_ball_chart(np.array([0.0, 0, -0.5]), np.array([1.0, 0, 0]))


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0.05, 0.6), unit)
def test_rectifying_chart_round_trip(a, b, c, w):
    x = np.array([a, b, c])
    z = rectify_ball_chart(x, w).z
    assert np.allclose(unrectify_ball_chart(z), x, atol=1e-12)


def test_non_unit_direction_rejected():
    with pytest.raises(ArgumentError):
        BALL.escape_time(np.zeros(3), np.array([1.0, 1.0, 0]))


def test_closed_form_angular_gradients_match_ray_casting(rng):
    x, w = inside_ball(rng, 100, 0.8), unit_vectors(rng, 100)
    _, a = BALL.escape_time_gradients(x, w)
    _, b = TWIN.escape_time_gradients(x, w)
    assert np.max(np.abs(a - b)) < 1e-5
