import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import inside_ball, unit_vectors
from csda_transport import (Ball, CollisionModel, PhaseField, PhaseGrid, RayQuadrature,
                            SolverConfig, apply_transport_operator, assemble_fbar,
                            constant_kernel, lift_inflow, neumann_solve, p_inverse,
                            solve_conv_scatter, solve_csda_explicit)
from csda_transport.errors import (ArgumentError, CompatibilityError, ConfigurationError,
                                   ConvergenceError, RayError)
from csda_transport.solvers import operator_values

BALL = Ball()


@pytest.fixture
def probes(rng):
    n = 400
    return inside_ball(rng, n, 0.95), unit_vectors(rng, n), rng.uniform(size=n)


def test_ray_quadrature_integrates_smooth_rows():
    rq = RayQuadrature()
    L = np.array([0.5, 1.0, 2.0])
    val = rq.integrate(lambda idx, s: np.exp(-s), L)
    assert np.allclose(val, 1 - np.exp(-L), rtol=1e-12)


def test_ray_quadrature_reports_failure():
    rq = RayQuadrature(panels=2, order=2, max_doublings=1)
    with pytest.raises(RayError):
        rq.integrate(lambda idx, s: 1.0 / np.sqrt(np.abs(s - 0.3) + 1e-12), np.array([1.0]))


def test_escape_exponential(probes):
    x, w, E = probes
    psi = solve_conv_scatter(BALL, 1.0, 1.0, 0.0)
    assert np.max(np.abs(psi(x, w, E) - (1 - np.exp(-BALL.escape_time(x, w))))) < 1e-12


def test_constant_inflow_is_transported(probes):
    assert np.allclose(solve_conv_scatter(BALL, 0.0, 0.0, 2.5)(*probes), 2.5)


def test_conv_scatter_manufactured(probes):
    x, w, E = probes
    f = PhaseField(lambda x, w, E: w[..., 0] + x[..., 0] + 0 * E)
    g = PhaseField(lambda x, w, E: x[..., 0] + 0 * E)
    psi = solve_conv_scatter(BALL, 1.0, f, g)
    assert np.max(np.abs(psi(x, w, E) - x[:, 0])) < 1e-9


def test_csda_explicit_examples(probes):
    x, w, E = probes
    u = solve_csda_explicit(BALL, 1.0, 0.0, 1.0, 0.0, 1.0)
    assert np.max(np.abs(u(x, w, E) - np.minimum(1 - E, BALL.escape_time(x, w)))) < 1e-9
    assert np.all(solve_csda_explicit(BALL, 1.0, 0.0, 0.0, 0.0, 1.0)(x, w, E) == 0)
    g = PhaseField(lambda x, w, E: 1.0 - E + 0 * x[..., 0])
    v = solve_csda_explicit(BALL, 1.0, 0.0, 1.0, g, 1.0)
    assert np.max(np.abs(v(x, w, E) - (1 - E))) < 1e-9


def test_csda_explicit_rejects_incompatible_inflow():
    with pytest.raises(CompatibilityError):
        solve_csda_explicit(BALL, 1.0, 0.0, 1.0, 1.0, 1.0)


def test_p_inverse_constant_data(probes):
    x, w, E = probes
    a, sig, C, c1 = 1.0, 1.0, 4.0, 0.7
    beta = a * C + sig
    u = p_inverse(BALL, a, sig, C, c1, 1.0)
    ex = c1 / beta * (1 - np.exp(-beta * np.minimum((1 - E) / a, BALL.escape_time(x, w))))
    assert np.max(np.abs(u(x, w, E) - ex)) < 1e-9
    assert np.all(p_inverse(BALL, a, sig, C, 0.0, 1.0)(x, w, E) == 0)


def test_lift_examples(probes):
    x, w, E = probes
    assert np.all(lift_inflow(BALL, 1.0)(x, w, E) == 1.0)
    assert np.allclose(lift_inflow(BALL, 1.0, damping=1.0)(x, w, E), np.exp(-BALL.escape_time(x, w)))
    with pytest.raises(ArgumentError):
        lift_inflow(BALL, 1.0, damping=-1.0)


def test_lift_is_constant_along_rays(probes):
    x, w, E = probes
    Lg = lift_inflow(BALL, PhaseField(lambda x, w, E: x[..., 0] + 0 * E))
    x = x * 0.9
    h = 1e-5
    d = (Lg(x + h * w, w, E) - Lg(x - h * w, w, E)) / (2 * h)
    assert np.max(np.abs(d)) < 1e-8


def test_fbar_examples(probes):
    x, w, E = probes
    grid = PhaseGrid.build(BALL, 4, (8, 4), 3)
    m = CollisionModel(sigma_t=0.8, a=1.5)
    f = PhaseField(lambda x, w, E: x[..., 1] * w[..., 2] + E)
    fb, _ = assemble_fbar(BALL, f, 0.0, m, 0.0, grid, (0.0, 1.0))
    assert np.array_equal(fb(x, w, E), f(x, w, E))
    g = PhaseField(lambda x, w, E: 1.0 - E + 0 * x[..., 0])
    fb, _ = assemble_fbar(BALL, 0.0, g, m, 0.0, grid, (0.0, 1.0),
                          dg_dE=PhaseField(constant=-1.0))
    assert np.allclose(fb(x, w, E), -1.5 - 0.8 * (1 - E))


@settings(max_examples=15, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 2))
def test_fbar_is_linear(alpha, beta, C):
    rng = np.random.default_rng(0)
    x, w, E = inside_ball(rng, 30, 0.9), unit_vectors(rng, 30), rng.uniform(size=30)
    grid = PhaseGrid.build(BALL, 4, (8, 4), 3)
    m = CollisionModel(sigma_t=1.0, a=1.0, K2=constant_kernel("K2", 0.05))
    f1 = PhaseField(lambda x, w, E: x[..., 0] + E)
    f2 = PhaseField(lambda x, w, E: w[..., 1] * x[..., 2] + 0 * E)
    g = PhaseField(lambda x, w, E: (1 - E) * (1 + x[..., 1]))
    iv = (0.0, 1.0)
    comb = PhaseField(lambda x, w, E: alpha * f1(x, w, E) + beta * f2(x, w, E))
    lhs = assemble_fbar(BALL, comb, g, m, C, grid, iv)[0](x, w, E)
    rhs = (alpha * assemble_fbar(BALL, f1, 0.0, m, C, grid, iv)[0](x, w, E)
           + beta * assemble_fbar(BALL, f2, 0.0, m, C, grid, iv)[0](x, w, E)
           + assemble_fbar(BALL, 0.0, g, m, C, grid, iv)[0](x, w, E))
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_transport_operator_examples(probes):
    x, w, E = probes
    psi = PhaseField(lambda x, w, E: 1 - np.exp(-BALL.escape_time(x, w)) + 0 * E)
    m = CollisionModel(sigma_t=1.0, a=0.0)
    vals, _ = operator_values(m, psi, BALL, x * 0.9, w, E, (0.0, 1.0))
    assert np.max(np.abs(vals - 1)) < 1e-5
    const = apply_transport_operator(CollisionModel(sigma_t=1.7, a=0.0), 3.0, BALL, (0.0, 1.0))
    assert np.allclose(const(x, w, E), 5.1)
    diff = apply_transport_operator(CollisionModel(sigma_t=0.0, a=0.0, c=1.0),
                                    PhaseField(lambda x, w, E: w[..., 2] + 0 * E), BALL, (0.0, 1.0))
    keep = np.abs(w[:, 2]) < 0.95
    assert np.allclose(diff(x, w, E)[keep], -2 * w[keep, 2], atol=1e-4)


SMALL = dict(star=(5, 5, 8), n_energy=5)


def test_neumann_without_kernel_is_one_term(probes):
    x, w, E = probes
    m = CollisionModel(sigma_t=1.0, a=1.0)
    rep = neumann_solve(BALL, m, 1.0, 0.0, (0.0, 1.0), SolverConfig(C=0.0, **SMALL),
                        residual_probes=10)
    direct = solve_csda_explicit(BALL, 1.0, 1.0, 1.0, 0.0, 1.0)
    assert rep.terms == 1
    assert np.max(np.abs(rep.solution(x[:50], w[:50], E[:50]) - direct(x[:50], w[:50], E[:50]))) < 1e-6


def test_neumann_contracts_at_certified_rate():
    m = CollisionModel(sigma_t=1.0, a=1.0, K2=constant_kernel("K2", 0.02))
    rep = neumann_solve(BALL, m, 1.0, 0.0, (0.0, 1.0), SolverConfig(C="auto", **SMALL),
                        residual_probes=20)
    assert rep.converged and rep.certificate < 0.5
    assert max(rep.ratios) <= rep.certificate * 1.01
    d = rep.to_dict()
    assert d["terms"] == rep.terms and len(d["ratios"]) == len(d["increments"]) - 1


def test_neumann_reports_partial_result():
    m = CollisionModel(sigma_t=1.0, a=1.0, K2=constant_kernel("K2", 0.02))
    with pytest.raises(ConvergenceError) as info:
        neumann_solve(BALL, m, 1.0, 0.0, (0.0, 1.0), SolverConfig(C=1.0, max_terms=2, **SMALL),
                      residual_probes=5)
    assert info.value.payload["report"].terms == 2


def test_solver_config_validation():
    with pytest.raises(ConfigurationError):
        SolverConfig(lift_damping=0.5)
    with pytest.raises(ArgumentError):
        SolverConfig(max_terms=0)
