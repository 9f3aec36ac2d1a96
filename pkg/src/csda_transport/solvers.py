"""Explicit characteristic solutions and the shifted Neumann-series solver.

Every solution is returned as a closure-backed
:class:`~csda_transport.phase_fields.PhaseField`; integrals along the
backward characteristic ``s -> x - s w`` are computed by composite
Gauss-Legendre quadrature.
"""
from dataclasses import dataclass, field
import math

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.ndimage import map_coordinates

from .errors import (ArgumentError, CompatibilityError, ConfigurationError,
                     ConvergenceError, NonContractionError, RayError)
from .geometry import SphereChart, _dot
from .phase_fields import (BoundaryGrid, PhaseField, PhaseGrid, as_field, l2_norm,
                           pairwise_sum, sphere_derivatives, trace_norm)
from .physics import apply_collision_sum, range_map, schur_bounds

ROW_CHUNK = 1 << 13


# ---------------------------------------------------------------------------
# ray quadrature
# ---------------------------------------------------------------------------

@dataclass
class RayQuadrature:
    """Composite Gauss-Legendre rule along rays of length at most ``diameter``.

    ``panels`` panels of ``order`` points each; with ``adaptive`` the panel
    count doubles until the relative change drops below ``rtol`` (plus
    ``atol``), at most ``max_doublings`` times.
    """

    panels: int = 32
    order: int = 4
    rtol: float = 1e-9
    atol: float = 1e-13
    adaptive: bool = True
    max_doublings: int = 6

    def nodes(self, L, panels):
        """Nodes ``(n, panels*order)`` and weights on ``[0, L]``."""
        g, gw = leggauss(self.order)
        base = (np.arange(panels)[:, None] + 0.5 * (g[None, :] + 1)).reshape(-1) / panels
        wb = np.tile(0.5 * gw, panels) / panels
        L = np.asarray(L, dtype=float)
        return L[:, None] * base[None, :], L[:, None] * wb[None, :]

    def integrate(self, F, L, payload=None):
        """``int_0^{L_i} F(i, s) ds`` for every row ``i``.

        ``F(idx, s)`` receives row indices and an ``(len(idx), m)`` array of
        abscissae and must return values of the same shape.
        """
        L = np.asarray(L, dtype=float)
        n = len(L)
        out = np.empty(n)
        for a in range(0, n, ROW_CHUNK):
            idx = np.arange(a, min(a + ROW_CHUNK, n))
            out[idx] = self._integrate_rows(F, L, idx, payload)
        return out

    def _rule(self, F, L, idx, panels):
        s, w = self.nodes(L[idx], panels)
        return np.sum(F(idx, s) * w, axis=1)

    def _integrate_rows(self, F, L, idx, payload):
        P = self.panels
        cur = self._rule(F, L, idx, P)
        if not self.adaptive:
            return cur
        todo = np.arange(len(idx))
        for _ in range(self.max_doublings):
            P *= 2
            new = self._rule(F, L, idx[todo], P)
            done = np.abs(new - cur[todo]) <= self.rtol * np.abs(new) + self.atol
            cur[todo] = new
            todo = todo[~done]
            if todo.size == 0:
                return cur
        bad = idx[todo[0]]
        info = {"panels": P, "row": int(bad)}
        if payload is not None:
            info.update({k: np.asarray(v)[bad].tolist() for k, v in payload.items()})
        raise RayError("ray quadrature did not converge", info)


def _flatten(x, w, E):
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    E = np.asarray(E, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], w.shape[:-1], E.shape)
    X = np.broadcast_to(x, shape + (3,)).reshape(-1, 3)
    W = np.broadcast_to(w, shape + (3,)).reshape(-1, 3)
    Ev = np.broadcast_to(E, shape).reshape(-1)
    return X, W, Ev, shape


def _const(f):
    f = as_field(f)
    return f.constant


def optical_depth(sigma, X, W, E, s, panels=4, order=8):
    """``int_0^s Sigma(x - s' w, w, E) ds'`` for an array ``s`` of shape ``(n, m)``."""
    sig = as_field(sigma)
    if sig.constant is not None:
        return sig.constant * s
    g, gw = leggauss(order)
    base = (np.arange(panels)[:, None] + 0.5 * (g[None, :] + 1)).reshape(-1) / panels
    wb = np.tile(0.5 * gw, panels) / panels
    sp = s[..., None] * base                       # (n, m, k)
    y = X[:, None, None, :] - sp[..., None] * W[:, None, None, :]
    vals = sig(y, W[:, None, None, :], E[:, None, None])
    return np.sum(vals * wb, axis=-1) * s


# ---------------------------------------------------------------------------
# explicit solutions
# ---------------------------------------------------------------------------

def solve_conv_scatter(domain, sigma, f, g, ray=None):
    """Solution of ``w . grad psi + Sigma psi = f`` with inflow data ``g``.

    ``psi(x, w, E) = int_0^t e^{-tau(s)} f(x - s w, w, E) ds + e^{-tau(t)} g(x - t w, w, E)``
    where ``t`` is the backward escape time and ``tau`` the optical depth.
    """
    ray = ray or RayQuadrature()
    sig, f, g = as_field(sigma, "Sigma"), as_field(f, "f"), as_field(g, "g")

    def fn(x, w, E):
        X, W, Ev, shape = _flatten(x, w, E)
        t = domain.escape_time(X, W)
        val = np.zeros(len(t))
        if f.constant != 0.0:
            def F(idx, s):
                y = X[idx, None, :] - s[..., None] * W[idx, None, :]
                att = np.exp(-optical_depth(sig, X[idx], W[idx], Ev[idx], s))
                return att * f(y, W[idx, None, :], Ev[idx, None])
            val += ray.integrate(F, t, {"x": X, "w": W})
        if g.constant != 0.0:
            y = X - t[:, None] * W
            tau = optical_depth(sig, X, W, Ev, t[:, None])[:, 0]
            val += np.exp(-tau) * g(y, W, Ev)
        return val.reshape(shape)

    return PhaseField(fn, name="conv_scatter")


def _trace_at_energy(g, bgrid, E):
    v = as_field(g)(bgrid.y, bgrid.w, np.full(len(bgrid.area), float(E)))
    return float(np.sqrt(pairwise_sum(np.broadcast_to(v, bgrid.area.shape) ** 2 * bgrid.flux)))


def solve_csda_explicit(domain, a, sigma, f, g, E_max, ray=None, range_nodes=4001,
                        compat_tol=1e-8, bgrid=None):
    """Explicit solution of ``-d(a psi)/dE + w . grad psi + Sigma psi = f`` on ``I = [0, E_max]``.

    ``a`` depends on ``E`` only (number or callable), ``Sigma`` on ``(x, w)``
    only.  The solution vanishes at ``E_max`` and equals ``g`` on the inflow
    boundary.  Raises :class:`CompatibilityError` if ``g(., ., E_max)`` is
    not zero within ``compat_tol`` in the trace norm.
    """
    ray = ray or RayQuadrature()
    sig, f, g = as_field(sigma, "Sigma"), as_field(f, "f"), as_field(g, "g")
    if g.constant is None or g.constant != 0.0:
        bgrid = bgrid or BoundaryGrid.build(domain, (8, 4), (8, 4), interval=(0.0, E_max))
        defect = _trace_at_energy(g, bgrid, E_max)
        if defect > compat_tol:
            raise CompatibilityError("inflow data does not vanish at the top energy",
                                     {"trace_norm_at_Em": defect})
    a_const = None if callable(a) else float(a)
    rm = None if a_const is not None else range_map(a, E_max, range_nodes)
    r_max = E_max / a_const if a_const is not None else rm.r_max

    def R(E):
        return E / a_const if a_const is not None else rm.R(E)

    def Rinv(r):
        return np.clip(r * a_const, 0.0, E_max) if a_const is not None else rm.inverse(np.minimum(r, rm.r_max))

    def A(E):
        return np.full(np.shape(E), a_const) if a_const is not None else np.asarray(a(E), float)

    def fn(x, w, E):
        X, W, Ev, shape = _flatten(x, w, E)
        if np.any(Ev < -1e-14) or np.any(Ev > E_max + 1e-14):
            raise ArgumentError("energy outside [0, E_max]")
        t = domain.escape_time(X, W)
        RE = R(Ev)
        room = r_max - RE
        val = np.zeros(len(t))
        if f.constant != 0.0:
            L = np.maximum(np.minimum(room, t), 0.0)

            def F(idx, s):
                Es = Rinv(RE[idx, None] + s)
                y = X[idx, None, :] - s[..., None] * W[idx, None, :]
                att = np.exp(-optical_depth(sig, X[idx], W[idx], Ev[idx], s))
                return att * A(Es) * f(y, W[idx, None, :], Es)
            val += ray.integrate(F, L, {"x": X, "w": W})
        if g.constant != 0.0:
            hit = room - t >= 0           # Heaviside with threshold at 0
            if np.any(hit):
                i = np.flatnonzero(hit)
                Et = Rinv(RE[i] + t[i])
                y = X[i] - t[i, None] * W[i]
                tau = optical_depth(sig, X[i], W[i], Ev[i], t[i, None])[:, 0]
                val[i] += np.exp(-tau) * A(Et) * g(y, W[i], Et)
        return (val / A(Ev)).reshape(shape)

    return PhaseField(fn, name="csda_explicit")


def p_inverse(domain, a, sigma, C, h, E_max, ray=None):
    """Inverse of the shifted streaming operator with zero inflow and terminal data.

    ``u(x, w, E) = int_0^{min(eta(E), t)} exp(-int_0^s (C a + Sigma)) h(x - s w, w, E + a s) ds``
    with ``eta(E) = (E_max - E) / a``.  ``Sigma`` may depend on ``(x, w)``.
    """
    if a <= 0:
        raise ArgumentError("stopping power must be positive")
    if C < 0:
        raise ArgumentError("shift rate must be nonnegative")
    ray = ray or RayQuadrature()
    sig, h = as_field(sigma, "Sigma"), as_field(h, "h")
    a, C = float(a), float(C)

    def fn(x, w, E):
        X, W, Ev, shape = _flatten(x, w, E)
        if h.constant == 0.0:
            return np.zeros(shape)
        t = domain.escape_time(X, W)
        L = np.maximum(np.minimum((E_max - Ev) / a, t), 0.0)

        def F(idx, s):
            y = X[idx, None, :] - s[..., None] * W[idx, None, :]
            att = np.exp(-C * a * s - optical_depth(sig, X[idx], W[idx], Ev[idx], s))
            return att * h(y, W[idx, None, :], Ev[idx, None] + a * s)
        return ray.integrate(F, L, {"x": X, "w": W}).reshape(shape)

    return PhaseField(fn, name="P^-1 h")


def lift_inflow(domain, g, damping=0.0):
    """``(L g)(x, w, E) = exp(-damping t) g(x - t w, w, E)``; constant along characteristics when ``damping = 0``."""
    g = as_field(g, "g")
    lam = float(damping)
    if lam < 0:
        raise ArgumentError("lift damping must be nonnegative")

    def fn(x, w, E):
        X, W, Ev, shape = _flatten(x, w, E)
        if g.constant is not None and lam == 0.0:
            return np.full(shape, g.constant)
        t = domain.escape_time(X, W)
        return (np.exp(-lam * t) * g(X - t[:, None] * W, W, Ev)).reshape(shape)

    return PhaseField(fn, name="L g")


def energy_derivative(g, interval, step=None):
    """Central difference in ``E`` (one-sided within one step of the interval ends)."""
    g = as_field(g)
    E0, Em = interval
    h = step if step is not None else 1e-5 * (Em - E0)

    def fn(x, w, E):
        E = np.asarray(E, dtype=float)
        lo, hi = E - h, E + h
        c = (lo >= E0) & (hi <= Em)
        fw = ~c & (lo < E0)
        out = np.where(c, (g(x, w, np.where(c, hi, E)) - g(x, w, np.where(c, lo, E))) / (2 * h), 0.0)
        f0 = g(x, w, E)
        f1 = g(x, w, np.where(fw, E + h, np.where(c, E, E - h)))
        f2 = g(x, w, np.where(fw, E + 2 * h, np.where(c, E, E - 2 * h)))
        one = np.where(fw, (-1.5 * f0 + 2 * f1 - 0.5 * f2) / h, (1.5 * f0 - 2 * f1 + 0.5 * f2) / h)
        return np.where(c, out, one)

    return PhaseField(fn, name=f"d/dE {g.name}")


def shift_data(f, C, sign=1.0):
    """``exp(sign C E) f``."""
    f = as_field(f)
    if C == 0 or f.constant == 0.0:
        return f
    return PhaseField(lambda x, w, E: np.exp(sign * C * np.asarray(E, float)) * f(x, w, E),
                      name=f"e^({sign}CE){f.name}")


def assemble_fbar(domain, f, g, model, C, quad, interval, dg_dE=None, include_kernel=True):
    """Modified source for the shifted problem with homogeneous inflow data.

    ``fbar = f_C + a dE(L g_C) - (C a + Sigma) L g_C + K2 (L g_C)`` with the
    undamped lift.  ``dg_dE`` is used when given, otherwise a finite
    difference.  Returns ``(fbar, parts)`` where ``parts`` holds the
    closure part and the kernel part separately.
    """
    a = model.a_constant()
    if a is None:
        raise ConfigurationError("the shifted solver needs a constant stopping power")
    f, g = as_field(f, "f"), as_field(g, "g")
    fC = shift_data(f, C)
    sig = model.sigma_field()
    if g.constant == 0.0:
        return fC, {"closure": fC, "kernel": None, "lift": PhaseField(constant=0.0)}
    dg = as_field(dg_dE) if dg_dE is not None else energy_derivative(g, interval)
    gC = shift_data(g, C)
    # d/dE (e^{CE} g) = e^{CE} (C g + dg/dE)
    dgC = PhaseField(lambda x, w, E: np.exp(C * np.asarray(E, float)) * (C * g(x, w, E) + dg(x, w, E)))
    LgC = lift_inflow(domain, gC)
    LdgC = lift_inflow(domain, dgC)

    def closure(x, w, E):
        lv = LgC(x, w, E)
        return fC(x, w, E) + a * LdgC(x, w, E) - (C * a + sig(x, w, E)) * lv

    part = PhaseField(closure, name="fbar closure part")
    kern = None
    if include_kernel and model.K2 is not None:
        kern = apply_collision_sum(_only_k2(model), LgC, quad)
        total = part + kern
    else:
        total = part
    return total, {"closure": part, "kernel": kern, "lift": LgC}


def _only_k2(model):
    from dataclasses import replace
    return replace(model, K1=None, K3=None)


# ---------------------------------------------------------------------------
# transport operator
# ---------------------------------------------------------------------------

def operator_values(model, psi, domain, x, w, E, interval, quad=None, step=1e-4,
                    angle_step=1e-3, form="csda"):
    """Pointwise finite-difference value of the transport operator and a one-sided flag.

    ``form='csda'`` uses ``-d(a psi)/dE``; ``form='forward'`` uses
    ``+a dpsi/dE``.  Collision terms use ``quad`` for the in-scatter
    integrals when the model has kernels.
    """
    psi = as_field(psi)
    X, W, Ev, shape = _flatten(x, w, E)
    E0, Em = interval
    h = float(step)
    out = np.zeros(len(Ev))
    flag = np.zeros(len(Ev), dtype=bool)
    # streaming
    xp, xm = X + h * W, X - h * W
    okp, okm = domain.contains(xp), domain.contains(xm)
    c = okp & okm
    f0 = psi(X, W, Ev)
    d = np.zeros(len(Ev))
    if np.any(c):
        d[c] = (psi(xp[c], W[c], Ev[c]) - psi(xm[c], W[c], Ev[c])) / (2 * h)
    fw = ~c & okp & domain.contains(X + 2 * h * W)
    if np.any(fw):
        d[fw] = (-1.5 * f0[fw] + 2 * psi(xp[fw], W[fw], Ev[fw])
                 - 0.5 * psi(X[fw] + 2 * h * W[fw], W[fw], Ev[fw])) / h
    bw = ~c & ~fw & okm & domain.contains(X - 2 * h * W)
    if np.any(bw):
        d[bw] = (1.5 * f0[bw] - 2 * psi(xm[bw], W[bw], Ev[bw])
                 + 0.5 * psi(X[bw] - 2 * h * W[bw], W[bw], Ev[bw])) / h
    flag |= ~c
    out += d
    # energy term
    a_fun = model.a
    has_a = callable(a_fun) or float(a_fun) != 0.0
    if has_a:
        def aval(E_):
            return model.a_value(X, E_)
        hE = h * (Em - E0)
        if form == "csda":
            q = lambda E_: aval(E_) * psi(X, W, E_)
        elif form == "forward":
            q = lambda E_: psi(X, W, E_)
        else:
            raise ArgumentError(f"unknown operator form {form!r}")
        cE = (Ev - hE >= E0) & (Ev + hE <= Em)
        dq = np.where(cE, (q(np.where(cE, Ev + hE, Ev)) - q(np.where(cE, Ev - hE, Ev))) / (2 * hE), 0.0)
        lowE = ~cE & (Ev - hE < E0)
        sgn = np.where(lowE, 1.0, -1.0)
        q0 = q(Ev)
        q1 = q(np.clip(Ev + sgn * hE, E0, Em))
        q2 = q(np.clip(Ev + 2 * sgn * hE, E0, Em))
        one = sgn * (-1.5 * q0 + 2 * q1 - 0.5 * q2) / hE
        dq = np.where(cE, dq, one)
        flag |= ~cE
        out += -dq if form == "csda" else aval(Ev) * dq
    # angular diffusion and drift
    cc, dd = model.c, model.d
    has_c = callable(cc) or float(cc) != 0.0
    if has_c or dd is not None:
        sd = sphere_derivatives(psi, X, W, Ev, angle_step)
        if has_c:
            cv = cc(X, Ev) if callable(cc) else float(cc)
            out += cv * sd.laplacian
        if dd is not None:
            dv = np.asarray(dd(X, W, Ev) if callable(dd) else dd, dtype=float)
            out += np.sum(dv * sd.grad, axis=-1)
        flag |= np.asarray(sd.one_sided)
    out += np.broadcast_to(model.sigma_field()(X, W, Ev), out.shape) * f0
    if model.kernels:
        if quad is None:
            raise ConfigurationError("collision terms need an in-scatter quadrature")
        out -= np.broadcast_to(apply_collision_sum(model, psi, quad)(X, W, Ev), out.shape)
    return out.reshape(shape), flag.reshape(shape)


def apply_transport_operator(model, psi, domain, interval, quad=None, step=1e-4,
                             angle_step=1e-3, form="csda"):
    """``T psi`` as a closure field (see :func:`operator_values`)."""
    def fn(x, w, E):
        return operator_values(model, psi, domain, x, w, E, interval, quad, step,
                               angle_step, form)[0]
    return PhaseField(fn, name=f"T({as_field(psi).name})")


# ---------------------------------------------------------------------------
# Neumann-series solver
# ---------------------------------------------------------------------------

@dataclass
class SolverConfig:
    """Parameters of :func:`neumann_solve`.

    ``C`` is a nonnegative number or ``'auto'``.  ``ray_panels`` and
    ``ray_order`` fix the (non-adaptive) characteristic quadrature of the
    iteration; ``star`` is ``(n_r, n_theta, n_phi)`` of the spatial
    interpolation grid, ``directions`` the direction chart and ``n_energy``
    the number of energy nodes (endpoints included).
    """

    C: object = "auto"
    max_terms: int = 40
    tol: float = 1e-10
    ray_panels: int = 8
    ray_order: int = 2
    lift_damping: float = 0.0
    star: tuple = (9, 9, 16)
    directions: tuple = (8, 4)
    n_energy: int = 9
    target_certificate: float = 0.5
    max_shift: float = 2.0 ** 20

    def __post_init__(self):
        if self.max_terms < 1:
            raise ArgumentError("max_terms must be at least 1")
        if not self.tol > 0:
            raise ArgumentError("tolerance must be positive")
        if self.C != "auto" and float(self.C) < 0:
            raise ArgumentError("shift rate must be nonnegative or 'auto'")
        if self.lift_damping != 0.0:
            raise ConfigurationError("the Neumann path uses the undamped lift")


@dataclass
class SolveReport:
    solution: PhaseField
    increments: list
    certificate: float
    certificate_h1: float
    observed_ratio: float
    terms: int
    converged: bool
    C: float
    residual_l2: float = float("nan")
    apriori: tuple = (float("nan"), float("nan"))
    kernel_trace_norm: float = float("nan")
    schur: dict = field(default_factory=dict)

    @property
    def ratios(self):
        inc = self.increments
        return [inc[i + 1] / inc[i] for i in range(len(inc) - 1) if inc[i] > 0]

    def to_dict(self):
        return {"increments": [float(v) for v in self.increments],
                "ratios": [float(r) for r in self.ratios],
                "certificate": float(self.certificate),
                "certificate_h1": float(self.certificate_h1),
                "observed_ratio": float(self.observed_ratio),
                "terms": int(self.terms),
                "converged": bool(self.converged),
                "C": float(self.C),
                "residual_l2": float(self.residual_l2),
                "apriori": [float(v) for v in self.apriori],
                "kernel_trace_norm": float(self.kernel_trace_norm),
                "schur": self.schur}


class StarGrid:
    """Interpolation grid ``x = c + r rho(u) u`` with ``r`` in [0, 1] and ``u`` on a uniform lat-long net."""

    def __init__(self, domain, n_r, n_theta, n_phi):
        if min(n_r, n_theta) < 2 or n_phi < 3:
            raise ArgumentError("star grid too small")
        self.domain = domain
        self.r = np.linspace(0.0, 1.0, n_r)
        self.theta = np.linspace(0.0, np.pi, n_theta)
        self.phi = np.arange(n_phi) * 2 * np.pi / n_phi
        T, P = np.meshgrid(self.theta, self.phi, indexing="ij")
        u = SphereChart.h(P, T)
        self.rho = domain.radial_extent(u)                        # (n_theta, n_phi)
        self.points = (domain.center + self.r[:, None, None, None] * self.rho[None, ..., None]
                       * u[None]).reshape(-1, 3)
        self.shape = (n_r, n_theta, n_phi)
        # trapezoid volume weights r^2 rho^3 dr sin(theta) dtheta dphi
        wr = np.full(n_r, 1.0 / (n_r - 1))
        wr[[0, -1]] *= 0.5
        wt = np.full(n_theta, np.pi / (n_theta - 1))
        wt[[0, -1]] *= 0.5
        w = (wr[:, None, None] * self.r[:, None, None] ** 2 * self.rho[None] ** 3
             * (wt * np.sin(self.theta))[None, :, None] * (2 * np.pi / n_phi))
        self.weights = w.reshape(-1)

    def coordinates(self, y):
        """Fractional grid indices ``(r, theta, phi)`` of points ``y``."""
        d = y - self.domain.center
        n = np.linalg.norm(d, axis=-1)
        safe = np.where(n > 0, n, 1.0)
        u = d / safe[..., None]
        u = np.where((n > 0)[..., None], u, np.array([0.0, 0.0, 1.0]))
        phi, theta = SphereChart.inverse(u)
        rho = self.domain.radial_extent(u)
        r = np.clip(n / rho, 0.0, 1.0)
        n_r, n_t, n_p = self.shape
        return (r * (n_r - 1), theta / np.pi * (n_t - 1), phi / (2 * np.pi) * n_p)


class _GridFunction:
    """Piecewise-linear interpolant of values on ``StarGrid x directions x energies``."""

    def __init__(self, star, energies, values):
        self.star = star
        self.E = energies
        v = values.reshape(star.shape + values.shape[1:])          # (r, th, ph, w, E)
        self.v = np.concatenate([v, v[:, :, :1]], axis=2)          # periodic pad in phi
        self.dE = energies[1] - energies[0]

    def at(self, k, coords, E):
        """Values for direction node ``k`` at star coordinates and energies."""
        ci = (*coords, (np.asarray(E) - self.E[0]) / self.dE)
        return map_coordinates(self.v[:, :, :, k, :], [np.ravel(c) for c in
                               np.broadcast_arrays(*ci)], order=1, mode="nearest").reshape(
            np.broadcast_shapes(*[np.shape(c) for c in ci]))

    def moment(self, weights):
        m = np.einsum("rtpwe,w->rtpe", self.v, weights)
        return m


def _certificates(model, quad, a, sig, C, diam, mI):
    rep = schur_bounds(_only_k2(model), "K2", quad, n_mc=500, n_probes=1, refine_check=False)
    factor = math.sqrt((a * diam + mI) / (a * (a * C + sig)))
    l2 = factor * math.sqrt(rep.M1 * rep.M2)
    if model.K2.constant is not None:
        m1p = m2p = 0.0
    else:
        m1p = float(model.constants.get("M1p", np.nan))
        m2p = float(model.constants.get("M2p", np.nan))
    h1 = factor * math.sqrt(2.0) * math.sqrt(3 * m1p * m2p + rep.M1 * rep.M2)
    return l2, h1, {"M1": rep.M1, "M2": rep.M2, "M1p": m1p, "M2p": m2p}


def choose_shift(model, quad, a, sig, diam, mI, target=0.5, cap=2.0 ** 20):
    """Smallest ``C`` in {1, 2, 4, ...} whose certificate is at most ``target``.

    The derivative-norm certificate is used when derivative Schur constants
    are known; otherwise the L2 one.
    """
    C = 1.0
    while C <= cap:
        l2, h1, _ = _certificates(model, quad, a, sig, C, diam, mI)
        cert = h1 if np.isfinite(h1) else l2
        if cert <= target:
            return C
        C *= 2
    raise NonContractionError("no admissible shift makes the certificate small enough",
                              {"cap": cap})


def neumann_solve(domain, model, f, g, interval, config=None, dg_dE=None, residual_probes=200,
                  seed=0):
    """Solve ``-a dpsi/dE + w . grad psi + Sigma psi - K2 psi = f`` with inflow ``g`` and ``psi(E_max) = 0``.

    ``a`` and ``Sigma`` are positive constants and ``K2`` is the only kernel.
    The shifted unknown ``phi = e^{CE} psi`` is written as
    ``u + L g_C`` and ``u = sum_k (P^-1 K2)^k P^-1 fbar`` is summed on a
    star grid (linear interpolation in space and energy, direction nodes
    kept exact).  Returns a :class:`SolveReport`.
    """
    cfg = config or SolverConfig()
    a = model.a_constant()
    sig = model.sigma_constant()
    if a is None or sig is None or a <= 0 or sig <= 0:
        raise ConfigurationError("the Neumann path needs positive constant a and Sigma")
    if model.K1 is not None or model.K3 is not None:
        raise ConfigurationError("the Neumann path supports the K2 kernel only")
    E0, Em = map(float, interval)
    mI = Em - E0
    f, g = as_field(f, "f"), as_field(g, "g")
    star = StarGrid(domain, *cfg.star)
    chart = SphereChart(*cfg.directions)
    E = np.linspace(E0, Em, cfg.n_energy)
    wE = np.full(len(E), E[1] - E[0])
    wE[[0, -1]] *= 0.5
    quad = PhaseGrid(domain, star.points, star.weights, chart, E, wE, (E0, Em), cfg.star[0])
    has_k = model.K2 is not None
    if has_k:
        if cfg.C == "auto":
            C = choose_shift(model, quad, a, sig, domain.diameter, mI, cfg.target_certificate,
                             cfg.max_shift)
        else:
            C = float(cfg.C)
        cert, cert_h1, schur = _certificates(model, quad, a, sig, C, domain.diameter, mI)
    else:
        C = 0.0 if cfg.C == "auto" else float(cfg.C)
        cert, cert_h1, schur = 0.0, 0.0, {}
    ray = RayQuadrature(panels=cfg.ray_panels, order=cfg.ray_order, adaptive=False)
    fbar_cl, parts = assemble_fbar(domain, f, g, model, C, quad, (E0, Em), dg_dE,
                                   include_kernel=False)
    LgC = parts["lift"]
    W = chart.directions
    nx, nw, ne = len(star.points), len(W), len(E)
    beta = C * a + sig
    xw = star.points[:, None, None, :]

    def node_values(field_):
        return np.broadcast_to(field_(xw, W[None, :, None, :], E[None, None, :]), (nx, nw, ne))

    def kernel_nodes(U):
        """K2 applied at the grid nodes (direction quadrature of the chart)."""
        if model.K2.constant is not None:
            m = np.einsum("xwe,w->xe", U, chart.weights)
            return np.broadcast_to(model.K2.constant * m[:, None, :], U.shape).copy()
        out = np.empty_like(U)
        for j in range(nw):
            s = np.broadcast_to(model.K2(star.points[:, None, None, :], W[None, :, None, :],
                                         W[j], E[None, None, :]), U.shape)
            out[:, j, :] = np.einsum("xke,k,xke->xe", s, chart.weights, U)
        return out

    def p_inv_grid(S):
        """P^-1 of the interpolant of S, evaluated at all nodes."""
        gf = _GridFunction(star, E, S)
        out = np.empty((nx, nw, ne))
        X = np.repeat(star.points, ne, axis=0)
        Ev = np.tile(E, nx)
        for k in range(nw):
            Wk = np.broadcast_to(W[k], X.shape)
            t = domain.escape_time(X, Wk)
            L = np.maximum(np.minimum((Em - Ev) / a, t), 0.0)
            s, ws = ray.nodes(L, ray.panels)
            y = X[:, None, :] - s[..., None] * W[k]
            val = gf.at(k, star.coordinates(y), np.minimum(Ev[:, None] + a * s, Em))
            out[:, k, :] = np.sum(np.exp(-beta * s) * val * ws, axis=1).reshape(nx, ne)
        return out

    weights = quad.weights()

    def norm(U):
        return math.sqrt(max(pairwise_sum((U * U * weights).sum(axis=(1, 2))), 0.0))

    V0 = node_values(LgC) if (has_k and g.constant != 0.0) else np.zeros((nx, nw, ne))
    U = np.asarray(node_values(p_inverse(domain, a, sig, C, fbar_cl, Em, ray)), dtype=float)
    if has_k and np.any(V0):
        U = U + p_inv_grid(kernel_nodes(V0))
    increments = [norm(U)]
    total = U.copy()
    prev_sum = np.zeros_like(U)
    converged = not has_k
    terms = 1
    while has_k and terms < cfg.max_terms:
        if increments[-1] <= cfg.tol * max(norm(total), 1e-300):
            converged = True
            break
        prev_sum = total.copy()
        U = p_inv_grid(kernel_nodes(U))
        increments.append(norm(U))
        total = total + U
        terms += 1
    else:
        if has_k and increments[-1] <= cfg.tol * max(norm(total), 1e-300):
            converged = True
    # closure: P^-1 [fbar_cl + K2(V0 + prev_sum)] + L g_C, then undo the shift
    src = kernel_nodes(V0 + prev_sum) if has_k else None
    gf = _GridFunction(star, E, src) if has_k else None
    base = p_inverse(domain, a, sig, C, fbar_cl, Em, ray)

    def phi_fn(x, w, E_):
        X, Wv, Ev, shape = _flatten(x, w, E_)
        val = base(X, Wv, Ev)
        if has_k:
            val = val + _p_inv_kernel_closure(domain, model, chart, gf, X, Wv, Ev, a, beta, Em, ray)
        val = val + LgC(X, Wv, Ev)
        return (np.exp(-C * Ev) * val).reshape(shape)

    psi = PhaseField(phi_fn, name="neumann")
    ratios = [increments[i + 1] / increments[i] for i in range(len(increments) - 1) if increments[i] > 0]
    report = SolveReport(psi, increments, cert, cert_h1, max(ratios) if ratios else 0.0,
                         terms, converged, C, schur=schur)
    if has_k and g.constant != 0.0:
        bq = BoundaryGrid.build(domain, (8, 4), (8, 4), interval=(E0, Em))
        kl = apply_collision_sum(_only_k2(model), LgC, quad)
        report.kernel_trace_norm = trace_norm(kl, bq)
    psi_nodes = quad.evaluate(psi)
    norm_psi = math.sqrt(max(quad.integrate(psi_nodes ** 2), 0.0))
    norm_f = l2_norm(f, quad)
    bq_data = BoundaryGrid.build(domain, (8, 4), (8, 4), interval=(E0, Em))
    norm_g = trace_norm(g, bq_data) if g.constant != 0.0 else 0.0
    report.apriori = (norm_psi, norm_f + norm_g)
    if residual_probes > 0:
        report.residual_l2 = _residual_l2(domain, model, psi, f, (E0, Em), quad,
                                          residual_probes, seed)
    if not converged:
        raise ConvergenceError("Neumann series hit the term limit", {"report": report})
    return report


def _residual_l2(domain, model, psi, f, interval, quad, n, seed):
    """Monte Carlo L2 norm of ``T psi - f`` over interior phase points."""
    rng = np.random.default_rng(seed)
    R = domain.bounding_radius
    pts = []
    while sum(len(p) for p in pts) < n:
        y = domain.center + rng.uniform(-R, R, size=(4 * n, 3))
        pts.append(y[domain.level(y) > 1e-3 * R * R])
    X = np.concatenate(pts)[:n]
    W = rng.normal(size=(n, 3))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    E0, Em = interval
    Ev = rng.uniform(E0, Em, size=n)
    Tpsi, _ = operator_values(model, psi, domain, X, W, Ev, interval, quad, form="csda")
    r = Tpsi - as_field(f)(X, W, Ev)
    return float(np.sqrt(np.mean(r * r) * domain.volume() * 4 * np.pi * (Em - E0)))


def _p_inv_kernel_closure(domain, model, chart, gf, X, W, Ev, a, beta, Em, ray):
    """``P^-1`` of the interpolated kernel source at arbitrary points."""
    t = domain.escape_time(X, W)
    L = np.maximum(np.minimum((Em - Ev) / a, t), 0.0)
    s, ws = ray.nodes(L, ray.panels)
    y = X[:, None, :] - s[..., None] * W[:, None, :]
    Es = np.minimum(Ev[:, None] + a * s, Em)
    coords = gf.star.coordinates(y)
    # direction node values of the source; non-node directions need the kernel itself
    match = _match_nodes(W, chart.directions)
    val = np.zeros(s.shape)
    if model.K2.constant is not None or np.all(match >= 0):
        if np.all(match >= 0):
            for k in np.unique(match):
                i = match == k
                val[i] = gf.at(k, tuple(c[i] for c in coords), Es[i])
            return np.sum(np.exp(-beta * s) * val * ws, axis=1)
        # constant kernel: the source is identical for every direction
        val = gf.at(0, coords, Es)
        return np.sum(np.exp(-beta * s) * val * ws, axis=1)
    raise ConfigurationError("off-node directions need a direction-independent kernel source")


def _match_nodes(W, nodes, tol=1e-12):
    d = np.abs(W[:, None, :] - nodes[None, :, :]).max(axis=-1)
    k = np.argmin(d, axis=1)
    return np.where(d[np.arange(len(W)), k] <= tol, k, -1)
