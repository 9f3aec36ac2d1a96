import numpy as np
import pytest
from hypothesis import given, strategies as st

from csda_transport import (Ball, PhaseField, PhaseGrid, ProbeReport, fractional_seminorm, l2_norm,
                            sobolev_norm_estimate, verdict)

BALL = Ball()
PSI = PhaseField(lambda x, w, E: 1 - np.exp(-BALL.escape_time(x, w)) + 0 * E)


@pytest.mark.parametrize("orders", [(1, 0, 0), (2, 0, 0), (1, 1, 1)])
def test_constant_field_norm_is_l2(orders):
    grid = PhaseGrid.build(BALL, 8, (8, 4), 3)
    est = sobolev_norm_estimate(1.0, grid, orders)
    assert est.norm == pytest.approx(l2_norm(1.0, grid), rel=1e-12)


def test_h1_estimate_of_linear_field():
    grid = PhaseGrid.build(BALL, 16, (8, 4), 3)
    f = PhaseField(lambda x, w, E: x[..., 0] + 0 * E)
    # ||x1||^2 + ||1||^2 over B x S x [0,1]
    exact = np.sqrt(4 * np.pi * (4 * np.pi / 15) + 16 * np.pi ** 2 / 3)
    assert sobolev_norm_estimate(f, grid, (1, 0, 0)).norm == pytest.approx(exact, rel=1e-3)


def test_escape_exponential_h1_values_are_frozen():
    # independent grid-refinement oracle of this estimator: the exact H1 norm is 9.60699
    grid = PhaseGrid.build(BALL, 64, (8, 4), 1, energy_rule="midpoint")
    est = sobolev_norm_estimate(PSI, grid, (1, 0, 0))
    assert est.norm == pytest.approx(9.182099244968317, rel=1e-9)
    assert abs(est.norm / 9.60699 - 1) < 0.05


def test_fractional_seminorm_examples():
    assert fractional_seminorm(1.0, BALL, 0.5, samples=2000).value == 0.0
    f = PhaseField(lambda x, w, E: x[..., 0] ** 2 + 0 * E)
    a = fractional_seminorm(f, BALL, 0.5, samples=40_000, seed=1)
    b = fractional_seminorm(f, BALL, 0.5, samples=80_000, seed=2)
    assert abs(a.value - b.value) < 4 * np.hypot(a.stderr, b.stderr)


def test_fractional_seminorm_of_escape_exponential_grows():
    vals = [fractional_seminorm(PSI, BALL, 1.6, cutoff=c, samples=40_000, seed=0).value
            for c in (2 / 16, 2 / 32, 2 / 64)]
    assert verdict(vals) == "divergent"


@pytest.mark.parametrize("values, expected", [
    ([1.0, 1.01, 1.02], "bounded"),
    ([1.0, 1.5, 2.5], "divergent"),
    ([1.0, 1.1, 1.1], "inconclusive"),
    ([0.0, 0.0, 0.0], "bounded"),
    ([0.0, 1.0, 2.0], "inconclusive"),
    ([1.0, np.nan, 1.0], "inconclusive"),
])
def test_verdict_rules(values, expected):
    assert verdict(values) == expected


@given(st.floats(0.1, 100), st.floats(1.2, 3), st.floats(1.2, 3))
def test_growing_sequences_are_divergent(v0, r1, r2):
    assert verdict([v0, v0 * r1, v0 * r1 * r2]) == "divergent"


@given(st.floats(0.1, 100), st.floats(0.5, 1.05), st.floats(0.5, 1.05))
def test_settled_sequences_are_bounded(v0, r1, r2):
    assert verdict([v0, v0 * r1, v0 * r1 * r2]) == "bounded"


def test_probe_report_dict():
    d = ProbeReport("q", [16, 32, 64], [1.0, 2.0, 4.0]).to_dict()
    assert d["ratios"] == [2.0, 2.0] and d["verdict"] == "divergent"
