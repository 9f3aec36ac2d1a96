import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import inside_ball, unit_vectors
from csda_transport import Ball, Ellipsoid, PhaseField, compatibility_check, conormal_probe
from csda_transport.diagnostics import (TERMS, boundary_moment, decomposition_check,
                                        derivative_decomposition, lemma_conv_integral,
                                        tangential_fields_ball, weight_m, weight_upper_bound)
from csda_transport.errors import UnsupportedDomainError

BALL = Ball()


def test_weight_examples():
    y, w = np.array([-1.0, 0, 0]), np.array([1.0, 0, 0])
    assert weight_m(BALL, "m1", 1, y, w) == pytest.approx(2.0)
    assert weight_m(BALL, "m1", 2, y, w) == pytest.approx(0.0, abs=1e-14)
    assert weight_m(BALL, "m1", 1, y, w, method="quadrature") == pytest.approx(2.0, rel=1e-9)


def _inflow_pairs(rng, n):
    y, w = unit_vectors(rng, 4 * n), unit_vectors(rng, 4 * n)
    w = np.where((np.sum(y * w, 1) > 0)[:, None], -w, w)
    keep = np.abs(np.sum(y * w, 1)) > 0.05
    return y[keep][:n], w[keep][:n]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_m2_upper_bounds_hold(seed):
    y, w = _inflow_pairs(np.random.default_rng(seed), 100)
    for j in (1, 2):
        assert np.all(weight_m(BALL, "m2", j, y, w) <= weight_upper_bound(BALL, "m2", j, y, w) * (1 + 1e-12))


def test_tangential_fields():
    A1, _, A3 = tangential_fields_ball(np.array([[0.0, 0, 1], [1.0, 0, 0]]))
    assert np.allclose(A1, [[-2, 0, 0], [0, 0, 2]])
    assert np.allclose(np.sum(A1 * [[0, 0, 1], [1, 0, 0]], 1), 0)
    assert np.allclose(A3, 0)
    with pytest.raises(UnsupportedDomainError):
        tangential_fields_ball(np.zeros((1, 3)), Ellipsoid([1.0, 2.0, 1.0]))


def test_tangential_fields_are_tangent_on_sphere(rng):
    y = unit_vectors(rng, 200)
    A1, A2, A3 = tangential_fields_ball(y)
    for A in (A1, A2, A3):
        assert np.max(np.abs(np.sum(A * y, 1))) < 1e-12


def test_conormal_probe_of_constant_is_zero():
    assert conormal_probe(1.0, 2, resolutions=(4, 8, 16)).verdict == "bounded"


@pytest.mark.parametrize("k, q, expected", [(0, 1.0, "bounded"), (0, 1.5, "divergent"),
                                            (1, 2.5, "divergent"), (3, 2.5, "bounded")])
def test_lemma_examples(k, q, expected):
    rep = lemma_conv_integral(k, q, samples=50_000, seed=1, moment_orders=())
    assert rep.verdict == expected


def test_boundary_moment_constant():
    m = boundary_moment(0.0, 100_000, 3)
    assert m["exact"] == pytest.approx(8 * np.pi ** 2)
    assert m["alternative_constant"] == pytest.approx(8 * np.pi)
    assert abs(m["value"] - m["exact"]) < 4 * m["stderr"]


def test_decomposition_vanishing_terms(rng):
    x, w, E = inside_ball(rng, 50, 0.8), unit_vectors(rng, 50), rng.uniform(size=50)
    f = PhaseField(lambda x, w, E: 1 + x[..., 0] + 0 * E)
    for name in ("h1", "q2"):
        assert np.allclose(derivative_decomposition(BALL, 1.0, f, 0.7, name, 1)(x, w, E), 0)
    for name in ("q1", "q2", "q3"):
        assert np.allclose(derivative_decomposition(BALL, 1.0, f, 0.0, name, 2)(x, w, E), 0)


def test_decomposition_matches_difference_quotient(rng):
    x, w, E = inside_ball(rng, 100, 0.9), unit_vectors(rng, 100), np.full(100, 0.5)
    chk = decomposition_check(BALL, 1.0, 1.0, 0.0, 1, x, w, E)
    assert chk.fraction_within >= 0.95
    h3 = derivative_decomposition(BALL, 1.0, 1.0, 0.0, "h3", 1)(x, w, E)
    dt, _ = BALL.escape_time_gradients(x, w)
    assert np.allclose(h3, np.exp(-BALL.escape_time(x, w)) * dt[:, 0], atol=1e-8)
    assert set(TERMS) == {"h1", "h2", "h3", "q1", "q2", "q3"}


def test_compatibility_examples():
    h = PhaseField(lambda x, w, E: 1 + x[..., 0] * w[..., 1] + 0 * E)
    g = PhaseField(lambda x, w, E: (1 - E) * h(x, w, E))
    rep = compatibility_check(h, g, 1.0, 0.0, BALL, 1.0, order=1)
    assert rep.passed and rep.defects[0] == 0 and rep.defects[1] < 1e-8
    bad = compatibility_check(0.0, 1.0, 1.0, 0.0, BALL, 1.0, order=0)
    assert not bad.passed and bad.defects[0] == pytest.approx(2 * np.pi, rel=1e-6)
