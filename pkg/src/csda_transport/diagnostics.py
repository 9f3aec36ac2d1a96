"""Boundary weights, tangential fields, regularity indicators and identity checks."""
from dataclasses import dataclass, field
import math

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import ArgumentError, ResolutionError, SingularityError, UnsupportedDomainError
from .geometry import Ball, SphereChart, _check_unit, _dot
from .phase_fields import BoundaryGrid, PhaseField, as_field, pairwise_sum, radial_nodes
from .probes import ProbeReport, verdict

__all__ = ["ProbeReport", "verdict", "weight_m", "weight_m_closed", "weight_m_quadrature",
           "weight_upper_bound", "tangential_fields_ball", "tangential_derivative",
           "conormal_probe", "lemma_conv_integral", "boundary_moment",
           "derivative_decomposition", "decomposition_check", "compatibility_check"]

GRAZING_CUTOFF = 0.05


# ---------------------------------------------------------------------------
# boundary weights
# ---------------------------------------------------------------------------

def _check_kind(kind, j):
    if kind not in ("m1", "m2"):
        raise ArgumentError(f"unknown weight kind {kind!r}")
    top = 3 if kind == "m1" else 2
    if j not in range(1, top + 1):
        raise ArgumentError(f"weight index for {kind} must be in 1..{top}")


def weight_m_closed(ball, kind, j, y, w):
    """Closed forms on a ball; ``m1`` is ``+inf`` on the grazing set.

    ``j`` is 1-based: ``m1`` uses ``x_j``, ``m2`` uses the chart angles
    ``phi`` (``j=1``) and ``theta`` (``j=2``).
    """
    _check_kind(kind, j)
    y = np.asarray(y, dtype=float) - ball.center
    w = _check_unit(w)
    yw = np.abs(_dot(y, w))
    if kind == "m1":
        with np.errstate(divide="ignore"):
            return np.where(yw > 0, 2.0 * y[..., j - 1] ** 2 / np.where(yw > 0, yw, 1.0), np.inf)
    if j == 1:
        rot = -y[..., 0] * w[..., 1] + y[..., 1] * w[..., 0]
        return 8.0 / 3.0 * rot ** 2 * yw
    rho = np.sqrt(w[..., 0] ** 2 + w[..., 1] ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        polar = (_dot(y, w) * w[..., 2] - y[..., 2]) / rho
    return 8.0 / 3.0 * polar ** 2 * yw


def weight_m_quadrature(domain, kind, j, y, w, panels=8, order=4):
    """Composite Gauss quadrature of ``int_0^{tau_-} |dt(y + s w, w)|^2 ds``."""
    _check_kind(kind, j)
    y = np.asarray(y, dtype=float)
    w = _check_unit(w)
    y, w = np.broadcast_arrays(y, w)
    shape = y.shape[:-1]
    Y, W = y.reshape(-1, 3), w.reshape(-1, 3)
    tau = domain.boundary_escape_time(Y, W, side="-")
    g, gw = leggauss(order)
    base = (np.arange(panels)[:, None] + 0.5 * (g[None, :] + 1)).reshape(-1) / panels
    wb = np.tile(0.5 * gw, panels) / panels
    s = tau[:, None] * base[None, :]
    X = Y[:, None, :] + s[..., None] * W[:, None, :]
    Wb = np.broadcast_to(W[:, None, :], X.shape)
    dx, dw = domain.escape_time_gradients(X.reshape(-1, 3), Wb.reshape(-1, 3))
    d = (dx[..., j - 1] if kind == "m1" else dw[..., j - 1]).reshape(s.shape)
    return (np.sum(d * d * wb[None, :], axis=1) * tau).reshape(shape)


def weight_m(domain, kind, j, y, w, method="auto"):
    """Boundary weight ``m_{1,j}`` or ``m_{2,j}`` at inflow points.

    ``method='auto'`` uses the closed form on a :class:`Ball` and quadrature
    otherwise.  On a ball the quadrature path is also available for cross
    checks.  Grazing pairs return ``+inf`` for ``m1`` on the closed-form path.
    """
    _check_kind(kind, j)
    if method not in ("auto", "closed", "quadrature"):
        raise ArgumentError(f"unknown method {method!r}")
    if method == "closed" and not isinstance(domain, Ball):
        raise UnsupportedDomainError("closed-form weights exist for balls only")
    if method == "closed" or (method == "auto" and isinstance(domain, Ball)):
        return weight_m_closed(domain, kind, j, y, w)
    y = np.asarray(y, dtype=float)
    wn = _dot(_check_unit(w), domain.normal(y))
    if np.any(np.abs(wn) < 1e-10):
        raise SingularityError("weight quadrature requested at a grazing pair",
                               {"count": int(np.count_nonzero(np.abs(wn) < 1e-10))})
    return weight_m_quadrature(domain, kind, j, y, w)


def weight_upper_bound(ball, kind, j, y, w):
    """Bounds ``(8/3) R^2 |y.w|`` for ``m_{2,1}`` and ``24 R^2 |y.w|`` for ``m_{2,2}``."""
    if kind != "m2" or j not in (1, 2):
        raise ArgumentError("upper bounds are stated for m2 only")
    y = np.asarray(y, dtype=float) - ball.center
    c = 8.0 / 3.0 if j == 1 else 72.0 / 3.0
    return c * ball.radius ** 2 * np.abs(_dot(y, _check_unit(w)))


# ---------------------------------------------------------------------------
# tangential fields on the unit ball
# ---------------------------------------------------------------------------

def _require_unit_ball(domain):
    if domain is None:
        return
    if not isinstance(domain, Ball) or domain.radius != 1.0 or np.any(domain.center != 0):
        raise UnsupportedDomainError("tangential fields are implemented for the unit ball")


def tangential_fields_ball(x, domain=None):
    """Coefficient vectors ``A1 = 2(-x3, 0, x1)``, ``A2 = 2(0, -x3, x2)`` and ``(1 - |x|^2) e3``."""
    _require_unit_ball(domain)
    x = np.asarray(x, dtype=float)
    z = np.zeros(x.shape[:-1])
    A1 = 2 * np.stack([-x[..., 2], z, x[..., 0]], axis=-1)
    A2 = 2 * np.stack([z, -x[..., 2], x[..., 1]], axis=-1)
    A3 = np.stack([z, z, 1.0 - _dot(x, x)], axis=-1)
    return A1, A2, A3


def _rotate(x, j, alpha):
    """Flow of ``A_j / 2`` for ``j`` in {1, 2}: rotation in the ``(x_j, x_3)`` plane."""
    c, s = np.cos(alpha), np.sin(alpha)
    out = np.array(x, dtype=float, copy=True)
    a = j - 1
    out[..., a] = c * x[..., a] - s * x[..., 2]
    out[..., 2] = s * x[..., a] + c * x[..., 2]
    return out


_FLOW_STENCILS = {1: ((-1, 1), (-0.5, 0.5)),
                  2: ((-1, 0, 1), (1.0, -2.0, 1.0)),
                  3: ((-2, -1, 1, 2), (-0.5, 1.0, -1.0, 0.5))}


def tangential_derivative(f, j, x, w, E, step=1e-3, order=1, domain=None):
    """``F_j^order f`` by finite differences.

    ``j = 1, 2`` difference along the rotation flow (which stays inside the
    ball); ``j = 3`` uses a centered difference along ``(1 - |x|^2) e3``,
    ``order = 1`` only.
    """
    _require_unit_ball(domain)
    f = as_field(f)
    x = np.asarray(x, dtype=float)
    if j in (1, 2):
        if order not in _FLOW_STENCILS:
            raise ArgumentError("flow derivatives are tabulated for orders 1..3")
        offs, coef = _FLOW_STENCILS[order]
        return sum(c * f(_rotate(x, j, o * step), w, E) for o, c in zip(offs, coef)) * (2.0 / step) ** order
    if j == 3:
        if order != 1:
            raise ArgumentError("F3 is available at first order only")
        A3 = tangential_fields_ball(x)[2]
        return (f(x + step * A3, w, E) - f(x - step * A3, w, E)) / (2 * step)
    raise ArgumentError("tangential field index must be 1, 2 or 3")


def conormal_probe(f, order, domain=None, resolutions=(16, 32, 64), j=1, n_radial=24,
                   spatial=(16, 8), directions=(8, 32), interval=(0.0, 1.0), n_energy=1):
    """Refinement indicator for ``||F_j^order f||_{L2}`` on the unit ball.

    The quadrature is fixed across levels: a graded star-shaped spatial rule
    and, at every spatial node, a direction chart whose pole points along
    ``x/|x|`` so the grazing band ``w . x = 0`` is resolved.  Only the
    difference step changes: ``diameter / (4 n)`` at resolution ``n``.
    """
    domain = domain or Ball()
    _require_unit_ball(domain)
    if order not in (1, 2, 3):
        raise ArgumentError("order must be 1, 2 or 3")
    if j not in (1, 2):
        raise ArgumentError("the probe uses the rotation fields F1 or F2")
    f = as_field(f)
    pts, wts = radial_nodes(domain, n_radial, spatial, graded=True)
    chart = SphereChart(*directions)
    n = np.linalg.norm(pts, axis=1, keepdims=True)
    axis = np.where(n > 0, pts / np.where(n > 0, n, 1.0), np.array([0.0, 0.0, 1.0]))
    W = chart.local_directions(axis)                           # (nx, nw, 3)
    E0, Em = interval
    g, gw = leggauss(n_energy)
    En = E0 + 0.5 * (Em - E0) * (g + 1)
    wE = 0.5 * (Em - E0) * gw
    X = pts[:, None, :]
    values = []
    for res in resolutions:
        step = domain.diameter / (4 * res)
        if step < 1e-7:
            raise ResolutionError("difference step below the floating-point floor",
                                  {"resolution": res, "step": step})
        total = 0.0
        for Ek, wk in zip(En, wE):
            v = tangential_derivative(f, j, X, W, Ek, step, order)
            v = np.broadcast_to(v, W.shape[:-1])
            total += wk * pairwise_sum(np.einsum("xw,x,w->x", v * v, wts, chart.weights))
        values.append(math.sqrt(max(total, 0.0)))
    return ProbeReport(f"||F{j}^{order} f||", list(resolutions), values,
                       extra={"steps": [domain.diameter / (4 * r) for r in resolutions]})


# ---------------------------------------------------------------------------
# convergence-criterion integral on the unit ball
# ---------------------------------------------------------------------------

def _lemma_sample(k, q, eps, u, v):
    """Integrand samples of the reduced ``(s, mu)`` integral in polar coordinates.

    ``r = 1 - s^2``, ``mu = |w . x| / |x|``; around the singular corner
    ``sqrt(2) s = rho cos(a)`` and ``mu = rho sin(a)`` with ``log rho``
    uniform on ``[log sqrt(eps), log sqrt(3)]``.  Points with
    ``D = (w.x)^2 + 1 - |x|^2 < eps`` are dropped (``D <= rho^2`` so none is
    lost below ``rho = sqrt(eps)``).
    """
    lo, hi = 0.5 * math.log(eps), 0.5 * math.log(3.0)
    rho = np.exp(lo + (hi - lo) * u)
    a = 0.5 * np.pi * v
    s = rho * np.cos(a) / math.sqrt(2.0)
    mu = rho * np.sin(a)
    r = 1.0 - s * s
    D = s * s * (2.0 - s * s) + r * r * mu * mu       # 1 - r^2 (1 - mu^2) without cancellation
    keep = (s <= 1.0) & (mu <= 1.0) & (D >= eps)
    Ds = np.where(keep, D, 1.0)
    val = 2.0 * s * r ** (2 + k) * mu ** k * Ds ** (-q)
    jac = rho * rho / math.sqrt(2.0) * (hi - lo) * (0.5 * np.pi)
    return np.where(keep, 16.0 * np.pi ** 2 * val * jac, 0.0)


def lemma_conv_integral(k, q, resolutions=(16, 32, 64), samples=200_000, seed=0,
                        moment_orders=(0.0,), moment_samples=200_000):
    """Truncated Monte Carlo estimates of ``int_{G x S} |w.x|^k / ((w.x)^2 + 1 - |x|^2)^q``.

    Level ``n`` keeps the region ``(w.x)^2 + 1 - |x|^2 >= 2^-n``.  A finite
    integral settles (ratios near 1); a divergent one grows at least like
    the logarithm of the cutoff, which doubles between levels.  The same
    uniform variates are reused at every level.  The report's ``extra``
    holds the boundary moments from :func:`boundary_moment`.
    """
    if not (isinstance(k, (int, np.integer)) and k >= 0):
        raise ArgumentError("k must be a nonnegative integer")
    if not q > 0:
        raise ArgumentError("q must be positive")
    rng = np.random.default_rng(seed)
    u, v = rng.random(samples), rng.random(samples)
    vals, errs = [], []
    for n in resolutions:
        x = _lemma_sample(int(k), float(q), 2.0 ** (-n), u, v)
        vals.append(float(np.mean(x)))
        errs.append(float(np.std(x) / math.sqrt(samples)))
    moments = {str(s): boundary_moment(s, moment_samples, seed + 1) for s in moment_orders}
    return ProbeReport(f"lemma_integral(k={k}, q={q})", list(resolutions), vals, errs,
                       extra={"criterion": int(np.sign(k - 2 * q + 3)),
                              "cutoffs": [2.0 ** (-n) for n in resolutions],
                              "boundary_moment": moments})


def boundary_moment(s, samples=200_000, seed=0):
    """Monte Carlo ``M(s) = int_{inflow} |w.y|^s dsigma(y) dw`` on the unit sphere.

    Returns a dict with the estimate, its standard error, the exact value
    ``8 pi^2 / (s + 1)`` and the alternative constant ``8 pi / (s + 1)``.
    """
    if not s > -1:
        raise ArgumentError("the boundary moment is finite only for s > -1")
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(samples, 3))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    w = rng.normal(size=(samples, 3))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    c = _dot(y, w)
    x = np.where(c < 0, np.abs(c) ** s, 0.0) * 16 * np.pi ** 2
    return {"s": float(s), "value": float(np.mean(x)),
            "stderr": float(np.std(x) / math.sqrt(samples)),
            "exact": 8 * np.pi ** 2 / (s + 1), "alternative_constant": 8 * np.pi / (s + 1)}


# ---------------------------------------------------------------------------
# six-term split of the spatial derivative
# ---------------------------------------------------------------------------

TERMS = ("h1", "h2", "h3", "q1", "q2", "q3")


def _fd_x(fn, j, pts, w, E, h):
    e = np.zeros(3)
    e[j - 1] = h
    return (fn(pts + e, w, E) - fn(pts - e, w, E)) / (2 * h)


def _ray(panels, order):
    g, gw = leggauss(order)
    base = (np.arange(panels)[:, None] + 0.5 * (g[None, :] + 1)).reshape(-1) / panels
    return base, np.tile(0.5 * gw, panels) / panels


def derivative_decomposition(domain, sigma, f, g, which, j, dsigma_dx=None, df_dx=None,
                             grad_g=None, step=1e-5, panels=16, order=4):
    """One of the six terms of ``d psi / dx_j`` for the convection-scattering solution.

    ``which`` is one of ``h1, h2, h3`` (source part) or ``q1, q2, q3``
    (inflow part).  Derivatives of ``Sigma`` and ``f`` in ``x_j`` and the
    tangential gradient of ``g`` are used when given (as callables returning
    the scalar ``x_j`` derivative, or the 3-vector gradient for ``g``);
    otherwise finite differences with step ``step`` are taken, which evaluate
    ``Sigma`` and ``f`` up to ``step`` outside the domain.  The tangential
    term falls back to differentiating ``g`` along the exit-point map
    ``x -> x - t(x, w) w``.  Pairs whose exit point satisfies
    ``|w . nu| <= 0.05`` evaluate to NaN.
    """
    if which not in TERMS:
        raise ArgumentError(f"unknown term {which!r}")
    if j not in (1, 2, 3):
        raise ArgumentError("j must be 1, 2 or 3")
    sig, f, g = as_field(sigma, "Sigma"), as_field(f, "f"), as_field(g, "g")
    base, wb = _ray(panels, order)
    h = float(step)

    def dsig(p, w, E):
        if dsigma_dx is not None:
            return np.asarray(dsigma_dx(p, w, E), float)
        if sig.constant is not None:
            return np.zeros(np.broadcast_shapes(np.shape(p)[:-1], np.shape(E)))
        return _fd_x(sig, j, p, w, E, h)

    def dfx(p, w, E):
        if df_dx is not None:
            return np.asarray(df_dx(p, w, E), float)
        if f.constant is not None:
            return np.zeros(np.broadcast_shapes(np.shape(p)[:-1], np.shape(E)))
        return _fd_x(f, j, p, w, E, h)

    def depth(X, W, E, s, integrand):
        """``int_0^s integrand(x - s' w) ds'`` for ``s`` of shape ``(n, m)``."""
        sp = s[..., None] * base
        y = X[:, None, None, :] - sp[..., None] * W[:, None, None, :]
        return np.sum(np.broadcast_to(integrand(y, W[:, None, None, :], E[:, None, None]),
                                      sp.shape) * wb, axis=-1) * s

    def fn(x, w, E):
        x = np.asarray(x, float)
        w = _check_unit(w)
        E = np.asarray(E, float)
        shape = np.broadcast_shapes(x.shape[:-1], w.shape[:-1], E.shape)
        X = np.broadcast_to(x, shape + (3,)).reshape(-1, 3)
        W = np.broadcast_to(w, shape + (3,)).reshape(-1, 3)
        Ev = np.broadcast_to(E, shape).reshape(-1)
        t = domain.escape_time(X, W)
        y = X - t[:, None] * W
        graze = np.abs(_dot(W, domain.normal(y))) <= GRAZING_CUTOFF
        ok = ~graze
        out = np.full(len(t), np.nan)
        if not np.any(ok):
            return out.reshape(shape)
        X, W, Ev, t, y = X[ok], W[ok], Ev[ok], t[ok], y[ok]
        dt = domain.escape_time_gradients(X, W)[0][:, j - 1]
        tau_t = depth(X, W, Ev, t[:, None], sig)[:, 0]
        if which in ("h1", "h2"):
            s = t[:, None] * base[None, :]
            p = X[:, None, :] - s[..., None] * W[:, None, :]
            att = np.exp(-depth(X, W, Ev, s, sig))
            if which == "h1":
                weight = -depth(X, W, Ev, s, dsig) * np.broadcast_to(
                    f(p, W[:, None, :], Ev[:, None]), s.shape)
            else:
                weight = np.broadcast_to(dfx(p, W[:, None, :], Ev[:, None]), s.shape)
            val = np.sum(att * weight * wb, axis=1) * t
        elif which == "h3":
            val = np.exp(-tau_t) * f(y, W, Ev) * dt
        elif which == "q1":
            val = -sig(y, W, Ev) * dt * np.exp(-tau_t) * g(y, W, Ev)
        elif which == "q2":
            val = -depth(X, W, Ev, t[:, None], dsig)[:, 0] * np.exp(-tau_t) * g(y, W, Ev)
        else:
            if g.constant is not None:
                val = np.zeros(len(t))
            elif grad_g is not None:
                v = np.eye(3)[j - 1] - dt[:, None] * W
                val = np.exp(-tau_t) * _dot(np.asarray(grad_g(y, W, Ev), float), v)
            else:
                e = np.eye(3)[j - 1] * h
                yp = (X + e) - domain.escape_time(X + e, W)[:, None] * W
                ym = (X - e) - domain.escape_time(X - e, W)[:, None] * W
                val = np.exp(-tau_t) * (g(yp, W, Ev) - g(ym, W, Ev)) / (2 * h)
        out[ok] = np.broadcast_to(val, out[ok].shape)
        return out.reshape(shape)

    return PhaseField(fn, name=f"{which}_{j}")


@dataclass
class DecompositionCheck:
    total: np.ndarray
    reference: np.ndarray
    excluded: int
    max_error: float
    fraction_within: float

    def to_dict(self):
        return {"excluded": self.excluded, "max_error": self.max_error,
                "fraction_within": self.fraction_within}


def decomposition_check(domain, sigma, f, g, j, x, w, E, psi=None, step=1e-5, tol=1e-4, **kw):
    """Compare the six-term sum with a centered difference of ``psi`` in ``x_j``.

    ``psi`` defaults to the convection-scattering solution of the same data.
    """
    if psi is None:
        from .solvers import solve_conv_scatter
        psi = solve_conv_scatter(domain, sigma, f, g)
    psi = as_field(psi)
    total = sum(derivative_decomposition(domain, sigma, f, g, name, j, step=step, **kw)(x, w, E)
                for name in TERMS)
    x = np.asarray(x, float)
    e = np.eye(3)[j - 1] * step
    inside = domain.contains(x + e) & domain.contains(x - e)
    ref = np.full(total.shape, np.nan)
    xs = np.broadcast_to(x, total.shape + (3,))
    ws = np.broadcast_to(w, total.shape + (3,))
    Es = np.broadcast_to(E, total.shape)
    ok = inside & np.isfinite(total)
    ref[ok] = (psi(xs[ok] + e, ws[ok], Es[ok]) - psi(xs[ok] - e, ws[ok], Es[ok])) / (2 * step)
    err = np.abs(total[ok] - ref[ok])
    return DecompositionCheck(total, ref, int(np.count_nonzero(~ok)),
                              float(err.max()) if err.size else 0.0,
                              float(np.mean(err <= tol)) if err.size else 1.0)


# ---------------------------------------------------------------------------
# compatibility at the top energy
# ---------------------------------------------------------------------------

@dataclass
class CompatibilityReport:
    defects: dict
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {"defects": {str(k): float(v) for k, v in self.defects.items()},
                "tolerance": self.tolerance, "passed": self.passed}


def compatibility_check(f, g, a, sigma, domain, E_max, order=1, tol=1e-8, bgrid=None,
                        dg_dE=None, step=1e-6):
    """Defects of the compatibility conditions at ``E_max``.

    Order 0 measures ``g(., ., E_max)``; order 1 additionally measures
    ``-a dg/dE + (Sigma - da/dE) g - f`` on the inflow boundary at
    ``E_max``.  Each defect is the trace norm
    ``(int |.|^2 |w . nu| dsigma dw)^(1/2)`` at the single energy ``E_max``.
    """
    if order not in (0, 1):
        raise ArgumentError("order must be 0 or 1")
    f, g, sig = as_field(f, "f"), as_field(g, "g"), as_field(sigma, "Sigma")
    bgrid = bgrid or BoundaryGrid.build(domain, (16, 8), (16, 8), interval=(0.0, E_max))
    y, w, flux = bgrid.y, bgrid.w, bgrid.flux
    Em = np.full(bgrid.area.shape, float(E_max))

    def norm(v):
        v = np.broadcast_to(v, flux.shape)
        return float(np.sqrt(pairwise_sum(v * v * flux)))

    g0 = g(y, w, Em)
    defects = {0: norm(g0)}
    if order == 1:
        if dg_dE is not None:
            dg = as_field(dg_dE)(y, w, Em)
        else:
            dg = (1.5 * g0 - 2 * g(y, w, Em - step) + 0.5 * g(y, w, Em - 2 * step)) / step
        if callable(a):
            av = np.asarray(a(Em), float)
            da = (1.5 * av - 2 * np.asarray(a(Em - step)) + 0.5 * np.asarray(a(Em - 2 * step))) / step
        else:
            av, da = float(a), 0.0
        defects[1] = norm(-av * dg + (sig(y, w, Em) - da) * g0 - f(y, w, Em))
    passed = all(v <= tol for v in defects.values())
    return CompatibilityReport(defects, tol, passed)
