import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csda_transport import (Ball, BoundaryGrid, PhaseField, PhaseGrid, fubini_check,
                            grid_interpolant, inner, l2_norm, moment, trace_norm)
from csda_transport.errors import DataError
from csda_transport.phase_fields import energy_nodes, sphere_derivatives

BALL = Ball()
GRID = PhaseGrid.reference(BALL)
BGRID = BoundaryGrid.build(BALL, (32, 16), (16, 8), 3, (0.0, 1.0))
L2_ONE = np.sqrt(16 * np.pi ** 2 / 3)  # frozen oracle: sqrt(|B| 4 pi m(I))


def test_l2_of_constants():
    assert l2_norm(1.0, GRID) == pytest.approx(L2_ONE, rel=1e-9)
    assert l2_norm(0.0, GRID) == 0.0


def test_l2_of_energy():
    f = PhaseField(lambda x, w, E: E + 0 * x[..., 0])
    assert l2_norm(f, GRID) == pytest.approx(L2_ONE / np.sqrt(3), rel=1e-9)


def test_non_finite_values_rejected():
    with pytest.raises(DataError):
        l2_norm(PhaseField(lambda x, w, E: np.nan + 0 * E), GRID)


def test_trace_norms():
    assert trace_norm(1.0, BGRID) == pytest.approx(2 * np.pi, rel=1e-9)
    assert trace_norm(0.0, BGRID, ("m1", 1)) == 0.0


def test_trace_norm_m11_weight():
    # (2/R) int_{dB} y1^2 dsigma over the inflow hemisphere of directions: 2 (4 pi / 3) 2 pi
    val = trace_norm(1.0, BGRID, ("m1", 1)) ** 2
    assert val == pytest.approx(16 * np.pi ** 2 / 3, rel=1e-3)


def test_moment_examples():
    assert np.allclose(moment(1.0, GRID), 4 * np.pi)
    assert np.allclose(moment(PhaseField(lambda x, w, E: w[..., 2] + 0 * E), GRID), 0, atol=1e-12)
    psi = PhaseField(lambda x, w, E: 1 - np.exp(-BALL.escape_time(x, w)) + 0 * E)
    assert moment(psi, GRID, points=np.zeros((1, 3)))[0] == pytest.approx(4 * np.pi * (1 - np.exp(-1)))


def test_fubini_examples():
    r = fubini_check(1.0, GRID, BGRID)
    assert r.volume == pytest.approx(16 * np.pi ** 2 / 3, rel=1e-9) and r.gap < 1e-3
    assert fubini_check(0.0, GRID, BGRID).gap == 0.0
    assert fubini_check(PhaseField(lambda x, w, E: x[..., 0] ** 2 + 0 * E), GRID, BGRID).gap < 1e-3


def test_inner_is_symmetric():
    f = PhaseField(lambda x, w, E: x[..., 0] + w[..., 1] * E)
    g = PhaseField(lambda x, w, E: 1 + x[..., 2] * w[..., 0])
    assert inner(f, g, GRID) == pytest.approx(inner(g, f, GRID))


@pytest.mark.parametrize("comp", [0, 2])
def test_sphere_laplacian_of_first_harmonics(comp):
    w = np.array([[0.3, 0.4, np.sqrt(0.75)], [0.6, -0.48, 0.64]])
    d = sphere_derivatives(PhaseField(lambda x, w, E: w[..., comp] + 0 * E), np.zeros((2, 3)), w,
                           np.zeros(2), step=1e-3)
    assert np.allclose(d.laplacian, -2 * w[:, comp], rtol=1e-4)


def test_sphere_derivatives_of_constant():
    w = np.array([[0.0, 0.6, 0.8]])
    d = sphere_derivatives(1.0, np.zeros((1, 3)), w, np.zeros(1))
    assert np.allclose(d.grad, 0) and np.allclose(d.laplacian, 0)


@pytest.mark.parametrize("rule", ["simpson", "midpoint"])
def test_energy_rules_integrate_linear(rule):
    E, wE = energy_nodes((0.0, 2.0), 5, rule)
    assert wE.sum() == pytest.approx(2.0) and (wE * E).sum() == pytest.approx(2.0)


def test_grid_interpolant_reproduces_nodes():
    grid = PhaseGrid.build(BALL, 8, (8, 4), 3)
    vals = grid.evaluate(PhaseField(lambda x, w, E: x[..., 0] + w[..., 2] * E))
    interp = grid_interpolant(grid, vals)
    assert np.allclose(grid.evaluate(interp), vals, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_l2_norm_is_homogeneous_and_integrates_linearly(a, b):
    grid = PhaseGrid.build(BALL, 6, (8, 4), 3)
    f = PhaseField(lambda x, w, E: x[..., 0] * w[..., 1] + E)
    g = PhaseField(lambda x, w, E: 1 + x[..., 2] ** 2 + 0 * E)
    assert l2_norm(PhaseField(lambda x, w, E: a * f(x, w, E)), grid) == pytest.approx(abs(a) * l2_norm(f, grid))
    lhs = grid.integrate(a * grid.evaluate(f) + b * grid.evaluate(g))
    rhs = a * grid.integrate(grid.evaluate(f)) + b * grid.integrate(grid.evaluate(g))
    assert lhs == pytest.approx(rhs, abs=1e-9)
