"""Verification suites: deterministic property checks reported as JSON rows.

Every row is ``{id, anchor, status, measured, bound, tolerance}``.  ``anchor``
names the property being exercised.  All randomness derives from the seed.
"""
import json
import math

import numpy as np

from .diagnostics import (boundary_moment, conormal_probe, decomposition_check,
                          lemma_conv_integral, weight_m, weight_upper_bound)
from .geometry import Ball, ImplicitDomain, boundary_quadrature
from .phase_fields import BoundaryGrid, PhaseField, PhaseGrid, fubini_check, l2_norm, trace_norm
from .physics import (CollisionModel, coercivity_margin, constant_kernel, random_field,
                      range_map, rutherford_kernel, schur_bounds)
from .sobolev import sobolev_probe
from .solvers import (SolverConfig, neumann_solve, p_inverse, solve_conv_scatter,
                      solve_csda_explicit)

SUITES = ("geometry", "norms", "physics", "solvers", "diagnostics")


def _row(cid, anchor, passed, measured, bound, tol, **extra):
    out = {"id": cid, "anchor": anchor, "status": "pass" if passed else "fail",
           "measured": measured, "bound": bound, "tolerance": tol}
    out.update(extra)
    return out


def _inside(rng, n, radius=1.0):
    x = rng.normal(size=(n, 3))
    return x * (radius * rng.uniform(size=n) ** (1 / 3) / np.linalg.norm(x, axis=1))[:, None]


def _dirs(rng, n):
    w = rng.normal(size=(n, 3))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def escape_solution(ball):
    return PhaseField(lambda x, w, E: 1.0 - np.exp(-ball.escape_time(x, w)) + 0 * np.asarray(E),
                      name="1 - exp(-t)")


# ---------------------------------------------------------------------------

def suite_geometry(seed):
    rng = np.random.default_rng(seed)
    ball = Ball()
    twin = ImplicitDomain.from_ball(ball)
    x, w = _inside(rng, 2000, 0.999), _dirs(rng, 2000)
    err = float(np.max(np.abs(ball.escape_time(x, w) - twin.escape_time(x, w))))
    rows = [_row("geometry.ray_cast_equivalence", "escape time: closed form vs ray casting",
                 err <= 1e-9, err, 1e-9, 0.0)]
    for name, dom in (("ball", ball), ("implicit", twin)):
        q = boundary_quadrature(dom, (32, 16), (16, 8))
        m = q.inflow_flux_measure()
        rel = abs(m / (4 * np.pi ** 2) - 1)
        rows.append(_row(f"geometry.inflow_flux_measure.{name}", "inflow flux measure of the unit ball",
                         rel <= 1e-6, m, 4 * np.pi ** 2, 1e-6))
    dx, _ = ball.escape_time_gradients(x[:200] * 0.9, w[:200])
    dxf, _ = twin.escape_time_gradients(x[:200] * 0.9, w[:200])
    gerr = float(np.max(np.abs(dx - dxf)))
    rows.append(_row("geometry.escape_gradient", "escape-time gradient: closed form vs differences",
                     gerr <= 1e-5, gerr, 1e-5, 0.0))
    return rows


def suite_norms(seed):
    ball = Ball()
    rows = []
    bg = BoundaryGrid.build(ball, (32, 16), (16, 8), 3, (0.0, 1.0))
    grids = [PhaseGrid.build(ball, n, (16, 8), 5) for n in (16, 32)]
    fields = {"one": PhaseField(constant=1.0),
              "x1_squared": PhaseField(lambda x, w, E: x[..., 0] ** 2 + 0 * np.asarray(E)),
              "gaussian": PhaseField(lambda x, w, E: np.exp(-2 * np.sum((x - 0.2) ** 2, -1))
                                     * (1 + 0.5 * w[..., 2]) + 0 * np.asarray(E))}
    for name, f in fields.items():
        gaps = [fubini_check(f, g, bg).gap for g in grids]
        ok = gaps[0] < 1e-3 and (gaps[1] <= gaps[0] or gaps[1] < 1e-12)
        rows.append(_row(f"norms.fubini.{name}", "volume integral equals boundary-ray integral",
                         ok, gaps, 1e-3, 0.0))
    t = trace_norm(1.0, bg)
    rows.append(_row("norms.trace_of_one", "trace norm of the constant one", abs(t / (2 * np.pi) - 1) < 1e-9,
                     t, 2 * np.pi, 1e-9))
    l2 = l2_norm(1.0, grids[0])
    ex = math.sqrt(4 / 3 * np.pi * 4 * np.pi)
    rows.append(_row("norms.l2_of_one", "L2 norm of the constant one", abs(l2 / ex - 1) < 1e-9, l2, ex, 1e-9))
    return rows


def suite_physics(seed, rutherford_probes=20):
    ball = Ball()
    rows = []
    quad = PhaseGrid.build(ball, 8, (16, 8), 3)
    m = CollisionModel(sigma_t=2.0, a=0.0, K2=constant_kernel("K2", 0.04))
    rep = schur_bounds(m, "K2", quad, n_mc=500, seed=seed, n_probes=1)
    rel = abs(rep.rayleigh_max / rep.certificate - 1)
    rows.append(_row("physics.schur_saturation.constant", "Schur certificate is attained by constants",
                     rel <= 0.005, rep.rayleigh_max, rep.certificate, 0.005))
    qr = PhaseGrid.build(ball, 6, (16, 8), 3, interval=(1.0, 2.0))
    mr = CollisionModel(sigma_t=1.0, a=0.0, K2=rutherford_kernel(1.0, 1.0))
    rr = schur_bounds(mr, "K2", qr, n_mc=500, seed=seed, n_probes=rutherford_probes,
                      refine_check=False)
    rows.append(_row("physics.schur_bound.rutherford", "random-field Rayleigh quotients stay below the certificate",
                     rr.rayleigh_max <= rr.certificate * 1.01, rr.rayleigh_max, rr.certificate, 0.01))
    mc = CollisionModel(sigma_t=1.5 + 4 * np.pi * 0.1, a=0.0, K2=constant_kernel("K2", 0.1))
    cr = coercivity_margin(mc, quad, n_mc=500, seed=seed, n_probes=10)
    rows.append(_row("physics.coercivity", "quadratic form exceeds the margin",
                     min(cr.probes) >= 1.5 - 0.02, min(cr.probes), 1.5, 0.02))
    rm = range_map(lambda E: 1.0 / (1.0 + E), 1.0)
    E = np.linspace(0, 1, 101)
    err = float(np.max(np.abs(rm.R(E) - (E + 0.5 * E ** 2))))
    rows.append(_row("physics.range_map", "range integral of the stopping power", err < 1e-8, err, 1e-8, 0.0))
    return rows


def suite_solvers(seed, p_fields=5):
    ball = Ball()
    rng = np.random.default_rng(seed)
    rows = []
    x, w, E = _inside(rng, 10_000), _dirs(rng, 10_000), rng.uniform(size=10_000)
    psi = solve_conv_scatter(ball, 1.0, 1.0, 0.0)
    err = float(np.max(np.abs(psi(x, w, E) - escape_solution(ball)(x, w, E))))
    rows.append(_row("solvers.closed_form", "absorbing ball with unit source", err < 1e-6, err, 1e-6, 0.0))
    u = solve_csda_explicit(ball, 1.0, 0.0, 1.0, 0.0, 1.0)
    ex = np.minimum(1.0 - E[:2000], ball.escape_time(x[:2000], w[:2000]))
    err = float(np.max(np.abs(u(x[:2000], w[:2000], E[:2000]) - ex)))
    rows.append(_row("solvers.csda_explicit", "unit source with unit stopping power", err < 1e-9, err, 1e-9, 0.0))
    grid = PhaseGrid.build(ball, 8, (8, 4), 3)
    bound = math.sqrt(3.0 / 5.0)
    ratios = []
    for _ in range(p_fields):
        h = random_field(rng, ball)
        ratios.append(l2_norm(p_inverse(ball, 1.0, 1.0, 4.0, h, 1.0), grid) / l2_norm(h, grid))
    rows.append(_row("solvers.p_inverse_bound", "inverse streaming operator norm bound",
                     max(ratios) <= bound * 1.01, max(ratios), bound, 0.01))
    m = CollisionModel(sigma_t=1.0, a=1.0, K2=constant_kernel("K2", 0.02))
    rep = neumann_solve(ball, m, 1.0, 0.0, (0.0, 1.0),
                        SolverConfig(C="auto", star=(5, 5, 8), n_energy=5), residual_probes=50,
                        seed=seed)
    rows.append(_row("solvers.neumann_contraction", "series increments contract at the certified rate",
                     rep.observed_ratio <= rep.certificate * 1.01, rep.observed_ratio,
                     rep.certificate, 0.01, terms=rep.terms))
    return rows


def suite_diagnostics(seed, heavy=True):
    ball = Ball()
    rng = np.random.default_rng(seed)
    rows = []
    y = _dirs(rng, 3000)
    w = _dirs(rng, 3000)
    w = np.where((np.sum(y * w, 1) > 0)[:, None], -w, w)
    keep = np.abs(np.sum(y * w, 1)) > 0.05
    y, w = y[keep][:1000], w[keep][:1000]
    worst, ub_ok = 0.0, True
    for kind, js in (("m1", (1, 2, 3)), ("m2", (1, 2))):
        for j in js:
            c = weight_m(ball, kind, j, y, w)
            q = weight_m(ball, kind, j, y, w, method="quadrature")
            scale = np.maximum(np.abs(c), 1e-12)
            worst = max(worst, float(np.max(np.abs(c - q) / scale)))
            if kind == "m2":
                ub_ok &= bool(np.all(c <= weight_upper_bound(ball, kind, j, y, w)))
    rows.append(_row("diagnostics.weight_closed_forms", "ball weights: closed form vs quadrature",
                     worst < 1e-6, worst, 1e-6, 0.0))
    rows.append(_row("diagnostics.weight_upper_bounds", "angular weights below their upper bounds",
                     ub_ok, ub_ok, True, 0.0))
    mism = []
    for k in range(4):
        for q in (0.5, 1.0, 1.5, 2.0, 2.5):
            rep = lemma_conv_integral(k, q, samples=100_000, seed=seed, moment_orders=())
            expect = "bounded" if k - 2 * q + 3 > 0 else "divergent"
            if rep.verdict != expect:
                mism.append([k, q, rep.verdict])
    rows.append(_row("diagnostics.convergence_matrix", "integrability criterion on 20 cases",
                     not mism, len(mism), 0, 0, mismatches=mism))
    mom = boundary_moment(0.0, 200_000, seed)
    z = abs(mom["value"] - mom["exact"]) / mom["stderr"]
    rows.append(_row("diagnostics.boundary_moment", "inflow phase measure of the unit sphere",
                     z <= 3.0, mom["value"], mom["exact"], 3 * mom["stderr"],
                     alternative_constant=mom["alternative_constant"]))
    x = _inside(rng, 300, 0.9)
    chk = decomposition_check(ball, 1.0, 1.0, 0.0, 1, x, _dirs(rng, 300), np.full(300, 0.5))
    rows.append(_row("diagnostics.decomposition", "six-term split matches the difference quotient",
                     chk.fraction_within >= 0.95, chk.fraction_within, 0.95, 1e-4))
    if heavy:
        psi = escape_solution(ball)
        for k, expect in ((2, "bounded"), (3, "divergent")):
            rep = conormal_probe(psi, k)
            rows.append(_row(f"diagnostics.conormal_order{k}", "tangential derivative indicator",
                             rep.verdict == expect, rep.values, expect, 0.0, ratios=rep.ratios))
        for orders, expect in (((1, 0, 0), "bounded"), ((2, 0, 0), "divergent")):
            rep = sobolev_probe(psi, ball, orders, directions=(8, 4), n_energy=1,
                                energy_rule="midpoint")
            rows.append(_row(f"diagnostics.sobolev_{''.join(map(str, orders))}",
                             "spatial regularity indicator", rep.verdict == expect, rep.values,
                             expect, 0.0, ratios=rep.ratios))
    return rows


def run_suite(name, seed=0):
    """Rows of one suite or of ``'all'``."""
    table = {"geometry": suite_geometry, "norms": suite_norms, "physics": suite_physics,
             "solvers": suite_solvers, "diagnostics": suite_diagnostics}
    if name == "all":
        rows = []
        for s in SUITES:
            rows += table[s](seed)
        return rows
    if name not in table:
        raise KeyError(name)
    return table[name](seed)


def _clean(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_clean(x) for x in v]
    return v


def report_json(rows, suite, seed):
    """Deterministic JSON text (sorted keys, fixed separators)."""
    doc = {"suite": suite, "seed": seed, "passed": all(r["status"] == "pass" for r in rows),
           "rows": _clean(rows)}
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"
