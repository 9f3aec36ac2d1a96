import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csda_transport import (Ball, CollisionModel, PhaseField, PhaseGrid, apply_collision,
                            coercivity_margin, constant_kernel, range_map, rutherford_kernel,
                            schur_bounds)
from csda_transport.errors import KinematicsError, ModelError
from csda_transport.physics import (gamma_circle, kernel_integrals, mu, rutherford_row_integral,
                                    rutherford_sigma2, shifted_kernel)

BALL = Ball()
QUAD = PhaseGrid.build(BALL, 6, (16, 8), 3)
PTS = (np.array([[0.1, 0.2, 0.3], [-0.4, 0.0, 0.2]]), np.array([[0.0, 0, 1], [0.6, 0.8, 0]]),
       np.array([0.3, 0.7]))


def test_mu_examples():
    assert mu(1.0, 1.0) == 1.0
    assert mu(2.0, 1.0) == pytest.approx(np.sqrt(2 / 3), abs=5e-6)
    assert mu(1e6, 1.0) == pytest.approx(np.sqrt(1 / 3), rel=1e-5)
    with pytest.raises(KinematicsError):
        mu(1.0, 2.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1.0))
def test_mu_is_a_cosine(E_in, frac):
    m = mu(E_in, E_in * frac)
    assert 0 < m <= 1 + 1e-15


def test_gamma_circle_geometry():
    s = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    w = np.array([0.0, 0, 1])
    pts = gamma_circle(None, None, w, s, _cosine=0.5)
    assert np.allclose(pts[:, 2], 0.5) and np.allclose(pts[:, 0] ** 2 + pts[:, 1] ** 2, 0.75)
    assert np.allclose(pts.mean(axis=0), 0.5 * w, atol=1e-14)
    assert np.allclose(gamma_circle(1.0, 1.0, w, s), w)


def test_rutherford_values():
    w = np.array([0.0, 0, 1])
    assert rutherford_sigma2(np.zeros(3), w, w, 1.0) == pytest.approx(4 / 9)
    assert rutherford_sigma2(np.zeros(3), w, w, 1.0, sigma0=0.0) == 0.0
    with pytest.raises(ModelError):
        rutherford_sigma2(np.zeros(3), w, w, 1.0, q=0.0)


def test_rutherford_row_integral_matches_quadrature():
    grid = PhaseGrid.build(BALL, 4, (64, 32), 3, interval=(1.0, 2.0))
    m = CollisionModel(sigma_t=1.0, a=0.0, K2=rutherford_kernel(1.0, 1.0))
    row, _ = kernel_integrals(m, "K2", *PTS[:2], np.array([1.5, 1.5]), grid)
    assert np.allclose(row, rutherford_row_integral(1.5), rtol=1e-3)


@pytest.mark.parametrize("kind, expected", [("K2", 4 * np.pi), ("K1", 4 * np.pi), ("K3", 2 * np.pi)])
def test_constant_kernels_on_one(kind, expected):
    c0 = 0.3
    m = CollisionModel(sigma_t=1.0, a=0.0, **{kind: constant_kernel(kind, c0)})
    out = apply_collision(m, kind, 1.0, QUAD)(*PTS)
    assert np.allclose(out, expected * c0, rtol=1e-9)


def test_schur_constant_kernel_saturates():
    c0 = 0.05
    rep = schur_bounds(CollisionModel(sigma_t=1.0, a=0.0, K2=constant_kernel("K2", c0)), "K2", QUAD,
                       n_mc=100, n_probes=3)
    assert rep.M1 == pytest.approx(4 * np.pi * c0) and rep.M2 == pytest.approx(4 * np.pi * c0)
    assert rep.rayleigh[0] == pytest.approx(rep.certificate, rel=1e-9)
    assert max(rep.rayleigh) <= rep.certificate * (1 + 1e-9)
    zero = schur_bounds(CollisionModel(sigma_t=1.0, a=0.0, K2=constant_kernel("K2", 0.0)), "K2",
                        QUAD, n_mc=50, n_probes=1)
    assert zero.certificate == 0.0


def test_coercivity_margins():
    m = CollisionModel(sigma_t=2.0, a=0.0, K2=constant_kernel("K2", 1 / (8 * np.pi)))
    assert coercivity_margin(m, QUAD, n_mc=50).margin == pytest.approx(1.5)
    assert coercivity_margin(CollisionModel(sigma_t=0.7, a=0.0), QUAD, n_mc=50).margin == pytest.approx(0.7)
    neg = CollisionModel(sigma_t=0.0, a=0.0, K2=constant_kernel("K2", 0.1))
    assert coercivity_margin(neg, QUAD, n_mc=50).margin == pytest.approx(-0.4 * np.pi)


def test_range_map_examples():
    unit = range_map(1.0, 1.0)
    E = np.linspace(0, 1, 11)
    assert np.allclose(unit.R(E), E) and unit.r_max == pytest.approx(1.0)
    assert np.allclose(unit.inverse(E), E, atol=1e-12)
    lin = range_map(lambda E: 1.0 + E, 1.0)
    assert lin.r_max == pytest.approx(np.log(2), abs=1e-7)
    rng = np.random.default_rng(3)
    Er = rng.uniform(0, 1, 100)
    assert np.max(np.abs(lin.inverse(lin.R(Er)) - Er)) < 1e-8
    with pytest.raises(ModelError):
        range_map(lambda E: E - 0.5, 1.0)


def test_shifted_kernel_rules():
    m = CollisionModel(sigma_t=1.0, a=1.0, K1=constant_kernel("K1", 0.2), K2=constant_kernel("K2", 0.1))
    assert shifted_kernel(m, 0.0) is m
    sh = shifted_kernel(m, 1.0)
    a = apply_collision(m, "K2", PhaseField(lambda x, w, E: x[..., 0] + E), QUAD)(*PTS)
    b = apply_collision(sh, "K2", PhaseField(lambda x, w, E: x[..., 0] + E), QUAD)(*PTS)
    assert np.array_equal(a, b)
    grid = PhaseGrid.build(BALL, 4, (8, 4), 41, energy_rule="simpson")
    row, _ = kernel_integrals(sh, "K1", PTS[0], PTS[1], PTS[2], grid)
    exact = 0.2 * 4 * np.pi * np.exp(PTS[2]) * (1 - np.exp(-1.0))
    assert np.allclose(row, exact, rtol=1e-5)
