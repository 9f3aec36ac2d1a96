"""Convex-domain geometry.

Escape times, their derivatives, outward normals, latitude-longitude sphere
charts, boundary quadrature on ``dG x S`` and the single rectifying chart of
the unit ball near ``e3``.

Conventions
-----------
* ``t(x, w)`` is the *backward* escape time: the smallest ``s > 0`` with
  ``x - s w`` outside ``G``.
* ``tau_minus(y, w)`` (``w . nu(y) < 0``) is the forward chord length from an
  inflow point; ``tau_plus(y, w)`` (``w . nu(y) > 0``) the backward one.
* All functions broadcast over leading axes; points and directions carry a
  trailing axis of length 3.
"""
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import ArgumentError, ChartError, DomainError, SingularityError

UNIT_TOL = 1e-9
# analytic gradients are refused below this fraction of R**2
GRAZING_TOL = 1e-10
BISECTION_TOL = 1e-12


def _check_unit(w):
    w = np.asarray(w, dtype=float)
    norm = np.linalg.norm(w, axis=-1)
    if np.any(np.abs(norm - 1.0) > UNIT_TOL):
        raise ArgumentError("direction is not a unit vector",
                            {"max_deviation": float(np.max(np.abs(norm - 1.0)))})
    return w


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def orthonormal_frame(w):
    """Deterministic ``(u, v)`` completing ``w`` to a right-handed frame.

    ``u`` is built from the coordinate axis least aligned with ``w`` so the
    frame is continuous away from ties and reproducible bit-for-bit.
    """
    w = np.asarray(w, dtype=float)
    axis = np.argmin(np.abs(w), axis=-1)
    e = np.zeros(w.shape)
    np.put_along_axis(e, axis[..., None], 1.0, axis=-1)
    u = e - _dot(e, w)[..., None] * w
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    v = np.cross(w, u)
    return u, v


# ---------------------------------------------------------------------------
# domains
# ---------------------------------------------------------------------------

class ConvexDomain:
    """Common interface of the convex domains.

    Subclasses supply ``level`` (positive inside), ``center``,
    ``bounding_radius`` and ``diameter``; the generic escape-time machinery
    here is a vectorised bisection along the ray.
    """

    center = np.zeros(3)
    bounding_radius = 1.0
    diameter = 2.0
    kind = "abstract"

    def level(self, x):
        raise NotImplementedError

    def contains(self, x, closed=True):
        lv = self.level(x)
        scale = self.bounding_radius ** 2
        return lv >= -1e-12 * scale if closed else lv > 0

    def _check_inside(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(self.contains(x)):
            raise DomainError("point outside the closed domain")
        return x

    # -- ray casting --------------------------------------------------------

    def ray_exit(self, x, d, tol=BISECTION_TOL):
        """Distance ``s`` at which ``x + s d`` leaves the domain (bisection).

        ``x`` must lie in the closed domain.  For a convex domain the set of
        ``s >= 0`` with ``x + s d`` inside is an interval, so bisection on the
        sign of the level function brackets its right end.
        """
        x = np.asarray(x, dtype=float)
        d = np.asarray(d, dtype=float)
        x, d = np.broadcast_arrays(x, d)
        shape = x.shape[:-1]
        lo = np.zeros(shape)
        hi = np.full(shape, np.linalg.norm(x - self.center, axis=-1)
                     + self.bounding_radius * (1 + 1e-9))
        target = tol * self.bounding_radius
        while True:
            width = hi - lo
            if np.all(width <= target):
                break
            mid = 0.5 * (lo + hi)
            inside = self.level(x + mid[..., None] * d) > 0
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        return 0.5 * (lo + hi)

    def escape_time(self, x, w):
        w = _check_unit(w)
        x = self._check_inside(x)
        return self.ray_exit(x, -w)

    def normal(self, y, step=None):
        h = step if step is not None else 1e-6 * self.bounding_radius
        y = np.asarray(y, dtype=float)
        grad = np.empty(y.shape)
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            grad[..., j] = (self.level(y + e) - self.level(y - e)) / (2 * h)
        n = -grad
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def boundary_escape_time(self, y, w, side="-"):
        """Chord length ``tau_-`` (``side='-'``) or ``tau_+`` (``side='+'``)."""
        w = _check_unit(w)
        y = np.asarray(y, dtype=float)
        wn = _dot(w, self.normal(y))
        if side == "-":
            if np.any(wn > 0):
                raise ArgumentError("tau_- needs inflow directions (w . nu <= 0)")
            return self._boundary_chord(y, w)
        if side == "+":
            if np.any(wn < 0):
                raise ArgumentError("tau_+ needs outflow directions (w . nu >= 0)")
            return self._boundary_chord(y, -w)
        raise ArgumentError(f"unknown side {side!r}")

    def _boundary_chord(self, y, d):
        # nudge inside so bisection starts from an interior point
        return self.ray_exit(y, d)

    def radial_extent(self, u):
        """Distance from ``center`` to the boundary along unit ``u``."""
        u = np.asarray(u, dtype=float)
        c = np.broadcast_to(self.center, u.shape)
        return self.ray_exit(c, u)

    def escape_time_gradients(self, x, w, step=None):
        """Centered finite differences of ``t`` in ``x`` and in chart angles.

        Returns ``(dt_dx, dt_dw)`` with trailing axes 3 and 2; the angular
        derivatives are ``d/dphi`` and ``d/dtheta`` of ``t(x, h(phi, theta))``.
        """
        w = _check_unit(w)
        x = self._check_inside(x)
        h = step if step is not None else 1e-6 * self.bounding_radius
        dx = np.empty(np.broadcast_shapes(x.shape, w.shape))
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            dx[..., j] = (self.ray_exit(x + e, -w) - self.ray_exit(x - e, -w)) / (2 * h)
        phi, theta = SphereChart.inverse(w)
        dw = np.empty(dx.shape[:-1] + (2,))
        dw[..., 0] = (self.ray_exit(x, -SphereChart.h(phi + h, theta))
                      - self.ray_exit(x, -SphereChart.h(phi - h, theta))) / (2 * h)
        dw[..., 1] = (self.ray_exit(x, -SphereChart.h(phi, theta + h))
                      - self.ray_exit(x, -SphereChart.h(phi, theta - h))) / (2 * h)
        return dx, dw

    def volume(self, n=64):
        """``int_S rho(u)^3 / 3 du`` on an ``(n, n/2)`` Gauss chart."""
        chart = SphereChart(n, 2 * max(n // 4, 1))
        return float(np.sum(chart.weights * self.radial_extent(chart.directions) ** 3) / 3.0)


class Ball(ConvexDomain):
    """Open ball; every geometric quantity has a closed form."""

    kind = "ball"

    def __init__(self, center=(0.0, 0.0, 0.0), radius=1.0):
        if radius <= 0:
            raise ArgumentError("radius must be positive")
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.bounding_radius = self.radius
        self.diameter = 2.0 * self.radius

    def __repr__(self):
        return f"Ball(center={tuple(self.center)}, radius={self.radius})"

    def level(self, x):
        r = np.asarray(x, dtype=float) - self.center
        return self.radius ** 2 - _dot(r, r)

    def normal(self, y, step=None):
        return (np.asarray(y, dtype=float) - self.center) / self.radius

    def _discriminant(self, x, w):
        r = x - self.center
        xw = _dot(r, w)
        return xw, xw ** 2 + self.radius ** 2 - _dot(r, r)

    def escape_time(self, x, w):
        w = _check_unit(w)
        x = self._check_inside(x)
        xw, disc = self._discriminant(x, w)
        return np.maximum(xw + np.sqrt(np.maximum(disc, 0.0)), 0.0)

    def _boundary_chord(self, y, d):
        # chord through y along d: 2 |(y - c) . d|
        return 2.0 * np.abs(_dot(np.asarray(y, dtype=float) - self.center, d))

    def radial_extent(self, u):
        u = np.asarray(u, dtype=float)
        return np.full(u.shape[:-1], self.radius)

    def escape_time_gradients(self, x, w, step=None):
        """Closed-form ``dt/dx_j`` and chart derivatives ``dt/dphi``, ``dt/dtheta``."""
        w = _check_unit(w)
        x = self._check_inside(x)
        x, w = np.broadcast_arrays(x, w)
        r = x - self.center
        xw, disc = self._discriminant(x, w)
        bad = disc < GRAZING_TOL * self.radius ** 2
        if np.any(bad):
            raise SingularityError(
                "escape-time gradient requested on the grazing set",
                {"count": int(np.count_nonzero(bad)),
                 "min_discriminant": float(np.min(disc)),
                 "first_index": tuple(int(i) for i in np.argwhere(bad)[0])})
        root = np.sqrt(disc)
        dx = w + (xw[..., None] * w - r) / root[..., None]
        factor = 1.0 + xw / root
        # the w-gradient of t is factor * r; project on the chart tangents
        t_phi, t_theta = SphereChart.tangent_frame(w)
        dw = np.stack([_dot(r, t_phi) * factor, _dot(r, t_theta) * factor], axis=-1)
        return dx, dw

    def volume(self, n=None):
        return 4.0 / 3.0 * np.pi * self.radius ** 3

    def area(self):
        return 4.0 * np.pi * self.radius ** 2


class ImplicitDomain(ConvexDomain):
    """Convex domain ``{x : r(x) > 0}`` given by a level function.

    The caller declares convexity and a C1 boundary; ``bounding_radius``
    must bound ``|x - center|`` over the domain, and ``center`` must be an
    interior point (boundary quadrature projects radially from it).
    """

    kind = "implicit"

    def __init__(self, level, bounding_radius, center=(0.0, 0.0, 0.0), diameter=None):
        self._level = level
        self.center = np.asarray(center, dtype=float)
        self.bounding_radius = float(bounding_radius)
        self.diameter = float(diameter) if diameter is not None else 2.0 * self.bounding_radius
        if not self.level(self.center) > 0:
            raise ArgumentError("center must lie inside the domain")

    def level(self, x):
        return np.asarray(self._level(np.asarray(x, dtype=float)), dtype=float)

    @classmethod
    def from_ball(cls, ball):
        """Ray-cast twin of a ball, used as an independent oracle."""
        c, R = ball.center.copy(), ball.radius
        return cls(lambda x: R ** 2 - np.sum((x - c) ** 2, axis=-1), R, center=c,
                   diameter=2 * R)


class Ellipsoid(ImplicitDomain):
    """Axis-aligned ellipsoid ``sum ((x_i - c_i) / a_i)^2 < 1`` (ray-cast escape times)."""

    kind = "ellipsoid"

    def __init__(self, semi_axes, center=(0.0, 0.0, 0.0)):
        a = np.asarray(semi_axes, dtype=float)
        if a.shape != (3,) or np.any(a <= 0):
            raise ArgumentError("ellipsoid needs three positive semi-axes")
        self.semi_axes = a
        c = np.asarray(center, dtype=float)
        super().__init__(lambda x: 1.0 - np.sum(((x - c) / a) ** 2, axis=-1), float(a.max()),
                         center=c, diameter=2.0 * float(a.max()))

    def __repr__(self):
        return f"Ellipsoid(semi_axes={self.semi_axes.tolist()}, center={self.center.tolist()})"

    def volume(self, n=None):
        return 4.0 / 3.0 * np.pi * float(np.prod(self.semi_axes))


# ---------------------------------------------------------------------------
# sphere chart
# ---------------------------------------------------------------------------

@dataclass
class SphereChart:
    """Latitude-longitude chart ``h(phi, theta)`` with nodes off the poles.

    ``rule='midpoint'`` uses uniform ``theta`` cells with exact cell areas as
    weights (needed by chart finite differences); ``rule='gauss'`` places
    Gauss-Legendre nodes in ``cos(theta)`` on each hemisphere separately, so
    polynomial integrands and hemisphere masks are integrated exactly.
    ``phi`` is always the uniform midpoint rule.
    """

    n_phi: int = 8
    n_theta: int = 4
    rule: str = "gauss"
    phi: np.ndarray = field(init=False, repr=False)
    theta: np.ndarray = field(init=False, repr=False)
    directions: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_phi < 2 or self.n_theta < 2:
            raise ArgumentError("sphere chart needs at least 2 nodes per axis")
        dphi = 2 * np.pi / self.n_phi
        self.phi = (np.arange(self.n_phi) + 0.5) * dphi
        if self.rule == "midpoint":
            dth = np.pi / self.n_theta
            edges = np.arange(self.n_theta + 1) * dth
            self.theta = edges[:-1] + 0.5 * dth
            wth = np.cos(edges[:-1]) - np.cos(edges[1:])
        elif self.rule == "gauss":
            if self.n_theta % 2:
                raise ArgumentError("gauss sphere rule needs an even n_theta")
            g, gw = leggauss(self.n_theta // 2)
            mu = np.concatenate([0.5 * (g + 1), -0.5 * (g + 1)])
            wth = np.concatenate([0.5 * gw, 0.5 * gw])
            order = np.argsort(-mu)
            mu, wth = mu[order], wth[order]
            self.theta = np.arccos(mu)
        else:
            raise ArgumentError(f"unknown sphere rule {self.rule!r}")
        P, T = np.meshgrid(self.phi, self.theta, indexing="ij")
        self.directions = self.h(P, T).reshape(-1, 3)
        self.weights = np.outer(np.full(self.n_phi, dphi), wth).reshape(-1)

    @property
    def size(self):
        return self.n_phi * self.n_theta

    @staticmethod
    def h(phi, theta):
        phi, theta = np.broadcast_arrays(np.asarray(phi, float), np.asarray(theta, float))
        st = np.sin(theta)
        return np.stack([np.cos(phi) * st, np.sin(phi) * st, np.cos(theta)], axis=-1)

    @staticmethod
    def inverse(w):
        w = np.asarray(w, dtype=float)
        phi = np.mod(np.arctan2(w[..., 1], w[..., 0]), 2 * np.pi)
        theta = np.arccos(np.clip(w[..., 2], -1.0, 1.0))
        return phi, theta

    @staticmethod
    def tangent_frame(w):
        """Chart tangent vectors ``(dh/dphi, dh/dtheta)`` at direction ``w``."""
        w = np.asarray(w, dtype=float)
        phi, theta = SphereChart.inverse(w)
        t1 = np.stack([-w[..., 1], w[..., 0], np.zeros(w.shape[:-1])], axis=-1)
        t2 = np.stack([np.cos(phi) * np.cos(theta), np.sin(phi) * np.cos(theta),
                       -np.sin(theta)], axis=-1)
        return t1, t2

    def local_directions(self, axis):
        """Chart nodes rotated so the chart pole points along ``axis``.

        Returns an array of shape ``axis.shape[:-1] + (size, 3)``; node ``k``
        has ``w . axis = cos(theta_k)`` exactly.
        """
        axis = np.asarray(axis, dtype=float)
        u, v = orthonormal_frame(axis)
        d = self.directions
        return (d[:, 0, None] * u[..., None, :] + d[:, 1, None] * v[..., None, :]
                + d[:, 2, None] * axis[..., None, :])


# ---------------------------------------------------------------------------
# boundary quadrature
# ---------------------------------------------------------------------------

@dataclass
class BoundaryQuadrature:
    """Weighted nodes on ``dG x S``.

    For each surface node ``y_i`` the direction nodes are a sphere chart
    whose pole is aligned with ``nu(y_i)``; the inflow set ``w . nu < 0`` is
    therefore exactly the southern half of the chart.
    """

    points: np.ndarray       # (Ny, 3)
    normals: np.ndarray      # (Ny, 3)
    dsigma: np.ndarray       # (Ny,)
    directions: np.ndarray   # (Ny, Nw, 3)
    domega: np.ndarray       # (Nw,)
    cosine: np.ndarray       # (Nw,)  w . nu, identical for every y

    @property
    def inflow(self):
        return self.cosine < 0

    def total_measure(self):
        return float(np.sum(self.dsigma) * np.sum(self.domega))

    def inflow_measure(self):
        return float(np.sum(self.dsigma) * np.sum(self.domega[self.inflow]))

    def inflow_flux_measure(self):
        m = self.inflow
        return float(np.sum(self.dsigma) * np.sum(np.abs(self.cosine[m]) * self.domega[m]))

    def inflow_nodes(self):
        """Flattened inflow nodes ``(y, w, nu, area_weight, flux_weight)``."""
        m = self.inflow
        ny, nw = len(self.dsigma), int(np.count_nonzero(m))
        y = np.repeat(self.points, nw, axis=0)
        nu = np.repeat(self.normals, nw, axis=0)
        w = self.directions[:, m, :].reshape(-1, 3)
        area = np.outer(self.dsigma, self.domega[m]).reshape(-1)
        flux = np.outer(self.dsigma, self.domega[m] * np.abs(self.cosine[m])).reshape(-1)
        assert len(area) == ny * nw
        return y, w, nu, area, flux


def boundary_quadrature(domain, surface=(16, 8), directions=(8, 8)):
    """Boundary quadrature with ``surface`` and ``directions`` chart sizes.

    Each is ``(n_phi, n_theta)`` of a Gauss latitude-longitude chart.  The
    surface is parametrised radially from ``domain.center``:
    ``y = c + rho(u) u`` with ``d sigma = rho**2 / |u . nu| dOmega_u``.
    """
    s_chart = SphereChart(*surface, rule="gauss")
    d_chart = SphereChart(*directions, rule="gauss")
    u = s_chart.directions
    rho = domain.radial_extent(u)
    y = domain.center + rho[:, None] * u
    nu = domain.normal(y)
    dsigma = rho ** 2 / np.abs(_dot(u, nu)) * s_chart.weights
    dirs = d_chart.local_directions(nu)
    return BoundaryQuadrature(points=y, normals=nu, dsigma=dsigma, directions=dirs,
                              domega=d_chart.weights.copy(),
                              cosine=d_chart.directions[:, 2].copy())


# ---------------------------------------------------------------------------
# rectifying chart of the unit ball near e3
# ---------------------------------------------------------------------------

@dataclass
class ChartPoint:
    z: np.ndarray
    b_tilde: np.ndarray
    inflow: np.ndarray       # b~_3 > 0
    normal_dot: np.ndarray   # w . nu(x) with nu(x) = x (meaningful on the sphere)


def rectify_ball_chart(x, w):
    """Evaluate ``h(x) = (x1, x2, 1 - |x|^2)`` and the transported advection field.

    ``b~(z, w) = (w . grad h_1, w . grad h_2, w . grad h_3)`` at ``x = h^{-1}(z)``,
    i.e. ``(w1, w2, -2 w . x)``.  On the unit sphere ``w . nu < 0`` exactly
    when ``b~_3 > 0``.
    """
    x = np.asarray(x, dtype=float)
    w = _check_unit(w)
    if np.any(x[..., 2] <= 0):
        raise ChartError("point outside the chart patch (needs x3 > 0)")
    if np.any(_dot(x, x) > 1 + 1e-12):
        raise ChartError("point outside the closed unit ball")
    x, w = np.broadcast_arrays(x, w)
    z = np.stack([x[..., 0], x[..., 1], 1.0 - _dot(x, x)], axis=-1)
    b = np.stack([w[..., 0], w[..., 1], -2.0 * _dot(w, x)], axis=-1)
    return ChartPoint(z=z, b_tilde=b, inflow=b[..., 2] > 0, normal_dot=_dot(w, x))


def unrectify_ball_chart(z):
    """Inverse chart ``h^{-1}(z) = (z1, z2, sqrt(1 - z3 - z1^2 - z2^2))``."""
    z = np.asarray(z, dtype=float)
    arg = 1.0 - z[..., 2] - z[..., 0] ** 2 - z[..., 1] ** 2
    if np.any(arg < -1e-14):
        raise ChartError("z outside the image of the chart")
    return np.stack([z[..., 0], z[..., 1], np.sqrt(np.maximum(arg, 0.0))], axis=-1)
