"""Phase-space grids, fields and the quadrature-based norms on them.

A field is either a closure ``fn(x, w, E)`` that broadcasts over leading
axes (``x`` and ``w`` carry a trailing axis of length 3) or a block of values
sampled on a :class:`PhaseGrid`.  Closures are the primary representation:
every explicit solution formula in the toolkit returns one.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import numbers

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.ndimage import map_coordinates

from .errors import ArgumentError, DataError
from .geometry import BoundaryQuadrature, SphereChart, boundary_quadrature

_THREADS = 1
CHUNK_VALUES = 1 << 21


def set_threads(n):
    """Cap the worker threads used for chunked evaluation (1 = serial)."""
    global _THREADS
    _THREADS = max(1, int(n))


def get_threads():
    return _THREADS


def _map_chunks(func, n, chunk):
    """Apply ``func(start, stop)`` over ``range(n)`` in fixed chunks, in order."""
    bounds = [(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    if _THREADS == 1 or len(bounds) == 1:
        return [func(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=_THREADS) as pool:
        return list(pool.map(lambda ab: func(*ab), bounds))


def pairwise_sum(values):
    """Fixed-order tree reduction of a 1-D array (bit-stable across runs)."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        return 0.0
    while v.size > 1:
        if v.size % 2:
            v = np.append(v, 0.0)
        v = v[0::2] + v[1::2]
    return float(v[0])


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

class PhaseField:
    """Real-valued field on ``G x S x I``.

    Parameters
    ----------
    fn : callable or None
        ``fn(x, w, E)`` with broadcasting semantics.
    constant : float, optional
        Marks the field as constant; solvers use closed forms for it.
    grid, values :
        Sampled backing.  A sampled field can only be evaluated on its grid.
    """

    def __init__(self, fn=None, *, constant=None, grid=None, values=None, name="",
                 provenance=""):
        if fn is None and constant is None and values is None:
            raise ArgumentError("field needs a closure, a constant or sampled values")
        if values is not None:
            values = np.asarray(values, dtype=float)
            if grid is None or values.shape != grid.shape:
                raise ArgumentError("sampled values must match the grid shape")
        if constant is not None and fn is None:
            c = float(constant)
            fn = lambda x, w, E: np.full(np.broadcast_shapes(
                np.shape(x)[:-1], np.shape(w)[:-1], np.shape(E)), c)
        self.fn = fn
        self.constant = None if constant is None else float(constant)
        self.grid = grid
        self.values = values
        self.name = name
        self.provenance = provenance

    @property
    def is_sampled(self):
        return self.values is not None and self.fn is None

    def __call__(self, x, w, E):
        if self.fn is None:
            raise ArgumentError(f"sampled field {self.name!r} has no off-grid evaluation")
        x = np.asarray(x, dtype=float)
        w = np.asarray(w, dtype=float)
        E = np.asarray(E, dtype=float)
        out = np.asarray(self.fn(x, w, E), dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], w.shape[:-1], E.shape)
        return np.broadcast_to(out, shape)

    def on(self, grid):
        """Values on ``grid`` (shape ``grid.shape``)."""
        if self.values is not None and grid is self.grid:
            return self.values
        return grid.evaluate(self)

    # linear combinations stay closures
    def _combine(self, other, op, name):
        if isinstance(other, numbers.Real):
            other = PhaseField(constant=float(other))
        if not isinstance(other, PhaseField):
            return NotImplemented
        const = None
        if self.constant is not None and other.constant is not None:
            const = op(self.constant, other.constant)
        f, g = self, other
        return PhaseField(lambda x, w, E: op(f(x, w, E), g(x, w, E)), name=name)._with_const(const)

    def _with_const(self, c):
        self.constant = c
        return self

    def __add__(self, other):
        return self._combine(other, np.add, f"({self.name}+...)")

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, np.subtract, f"({self.name}-...)")

    def __mul__(self, other):
        if isinstance(other, numbers.Real):
            a, f = float(other), self
            out = PhaseField(lambda x, w, E: a * f(x, w, E), name=f"{a}*{self.name}")
            if self.constant is not None:
                out.constant = a * self.constant
            return out
        return self._combine(other, np.multiply, f"({self.name}*...)")

    __rmul__ = __mul__

    def __neg__(self):
        return -1.0 * self

    def __repr__(self):
        kind = "constant" if self.constant is not None else ("sampled" if self.is_sampled else "closure")
        return f"PhaseField({self.name!r}, {kind})"


def as_field(value, name=""):
    """Coerce a number, closure or field into a :class:`PhaseField`."""
    if isinstance(value, PhaseField):
        return value
    if isinstance(value, numbers.Real):
        return PhaseField(constant=float(value), name=name or repr(value))
    if callable(value):
        return PhaseField(value, name=name or getattr(value, "__name__", ""))
    raise ArgumentError(f"cannot interpret {value!r} as a field")


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

def energy_nodes(interval, n, rule="simpson"):
    """Uniform nodes on ``[E0, Em]`` with their quadrature weights.

    ``'simpson'`` puts ``n`` (odd, >= 3) nodes on the closed interval and is
    exact for cubics; ``'midpoint'`` puts ``n`` cell centres and is exact for
    linear integrands.
    """
    E0, Em = map(float, interval)
    if not E0 < Em:
        raise ArgumentError("energy interval must satisfy E0 < Em")
    if rule == "midpoint":
        if n < 1:
            raise ArgumentError("need at least one energy node")
        dE = (Em - E0) / n
        return E0 + (np.arange(n) + 0.5) * dE, np.full(n, dE)
    if rule == "simpson":
        if n < 3 or n % 2 == 0:
            raise ArgumentError("simpson energy rule needs an odd node count >= 3")
        E = np.linspace(E0, Em, n)
        w = np.ones(n)
        w[1:-1:2], w[2:-1:2] = 4.0, 2.0
        return E, w * (Em - E0) / (3 * (n - 1))
    raise ArgumentError(f"unknown energy rule {rule!r}")


def radial_nodes(domain, n_radial, spatial, graded=False):
    """Star-shaped product rule: Gauss in ``r`` along rays from the center.

    ``graded=True`` substitutes ``r = rho (1 - u**2)`` before the Gauss rule
    in ``u``; an inverse square-root singularity at the boundary then
    becomes a smooth integrand.
    """
    chart = SphereChart(*spatial, rule="gauss")
    g, gw = leggauss(n_radial)
    s, sw = 0.5 * (g + 1), 0.5 * gw
    if graded:
        s, sw = 1.0 - s ** 2, 2.0 * s * sw
    u = chart.directions
    rho = domain.radial_extent(u)
    r = rho[:, None] * s[None, :]
    pts = domain.center + r[..., None] * u[:, None, :]
    wts = chart.weights[:, None] * rho[:, None] * sw[None, :] * r ** 2
    return pts.reshape(-1, 3), wts.reshape(-1)


def cartesian_nodes(domain, n, subsamples=4):
    """Tensor grid on the bounding box clipped to ``G``.

    Cells cut by the boundary keep the inside fraction of their volume
    (estimated with ``subsamples**3`` points) and move their node to the
    centroid of the inside part.
    """
    R = domain.bounding_radius
    h = 2 * R / n
    ax = -R + (np.arange(n) + 0.5) * h
    X = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3) + domain.center
    corners = np.array([[i, j, k] for i in (-.5, .5) for j in (-.5, .5) for k in (-.5, .5)]) * h
    inside_c = domain.level(X[:, None, :] + corners[None]) > 0
    full = inside_c.all(axis=1)
    pts, wts = [X[full]], [np.full(np.count_nonzero(full), h ** 3)]
    cut = ~full
    if np.any(cut):
        sub = (np.arange(subsamples) + 0.5) / subsamples - 0.5
        offs = np.stack(np.meshgrid(sub, sub, sub, indexing="ij"), -1).reshape(-1, 3) * h
        Y = X[cut][:, None, :] + offs[None]
        ins = domain.level(Y) > 0
        frac = ins.mean(axis=1)
        keep = frac > 0
        cnt = ins.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            cen = np.where(cnt > 0, (Y * ins[..., None]).sum(axis=1) / np.maximum(cnt, 1), 0.0)
        pts.append(cen[keep])
        wts.append(frac[keep] * h ** 3)
    return np.concatenate(pts), np.concatenate(wts)


@dataclass
class PhaseGrid:
    """Tensor-product quadrature on ``G x S x I``.

    Use :meth:`build` rather than the constructor.  ``resolution`` is the
    nominal number of cells across the diameter; it fixes the finite
    difference step ``diameter / resolution`` used by the regularity
    estimators.
    """

    domain: object
    points: np.ndarray
    volume_weights: np.ndarray
    chart: SphereChart
    energies: np.ndarray
    energy_weights: np.ndarray
    interval: tuple
    resolution: int
    spatial: str = "radial"
    layout: dict = None
    energy_rule: str = "simpson"

    @classmethod
    def build(cls, domain, resolution=16, directions=(8, 4), n_energy=3,
              interval=(0.0, 1.0), spatial="graded", sphere_rule="gauss",
              energy_rule="simpson"):
        if resolution < 2:
            raise ArgumentError("resolution must be at least 2")
        layout = None
        if spatial in ("radial", "graded"):
            n_r = max(resolution // 2, 2)
            n_th = max(2 * ((resolution // 2 + 1) // 2), 2)
            pts, wts = radial_nodes(domain, n_r, (max(resolution, 2), n_th),
                                    graded=spatial == "graded")
            layout = {"n_radial": n_r, "spatial_chart": (max(resolution, 2), n_th),
                      "graded": spatial == "graded"}
        elif spatial == "cartesian":
            pts, wts = cartesian_nodes(domain, resolution)
        else:
            raise ArgumentError(f"unknown spatial rule {spatial!r}")
        E, wE = energy_nodes(interval, n_energy, energy_rule)
        return cls(domain=domain, points=pts, volume_weights=wts,
                   chart=SphereChart(*directions, rule=sphere_rule),
                   energies=E, energy_weights=wE,
                   interval=(float(interval[0]), float(interval[1])),
                   resolution=int(resolution), spatial=spatial, layout=layout,
                   energy_rule=energy_rule)

    @classmethod
    def reference(cls, domain, interval=(0.0, 1.0)):
        """Reference resolution used by the examples and acceptance checks."""
        return cls.build(domain, resolution=16, directions=(16, 8), n_energy=5,
                         interval=interval)

    @property
    def directions(self):
        return self.chart.directions

    @property
    def direction_weights(self):
        return self.chart.weights

    @property
    def shape(self):
        return (len(self.points), self.chart.size, len(self.energies))

    @property
    def size(self):
        n = 1
        for s in self.shape:
            n *= s
        return n

    @property
    def step(self):
        return self.domain.diameter / self.resolution

    @property
    def measure_of_I(self):
        return self.interval[1] - self.interval[0]

    def weights(self):
        return (self.volume_weights[:, None, None] * self.chart.weights[None, :, None]
                * self.energy_weights[None, None, :])

    def total_weight(self):
        return float(np.sum(self.volume_weights) * np.sum(self.chart.weights)
                     * np.sum(self.energy_weights))

    def _chunk(self):
        per = self.chart.size * len(self.energies)
        return max(1, CHUNK_VALUES // max(per, 1))

    def evaluate(self, f):
        f = as_field(f)
        if f.is_sampled:
            if f.grid is not self:
                raise ArgumentError("sampled field lives on a different grid")
            return f.values
        if f.constant is not None:
            return np.full(self.shape, f.constant)
        w = self.directions[None, :, None, :]
        E = self.energies[None, None, :]

        def block(a, b):
            return f(self.points[a:b, None, None, :], w, E)

        return np.concatenate(_map_chunks(block, len(self.points), self._chunk()), axis=0)

    def integrate(self, values):
        v = np.asarray(values, dtype=float)
        # contract E and w first: per-x partial sums, then a fixed-order reduction
        per_x = np.einsum("xwe,w,e->x", v, self.chart.weights, self.energy_weights)
        return pairwise_sum(per_x * self.volume_weights)

    def sample(self, f, name=None):
        f = as_field(f)
        return PhaseField(grid=self, values=self.evaluate(f), name=name or f.name)


def _chart_index(chart, w):
    """Fractional ``(phi, theta)`` indices of directions ``w`` in a chart.

    ``phi`` indices are offset by one for a grid padded periodically with one
    node on each side; ``theta`` indices are clamped to the node range.
    """
    phi, theta = SphereChart.inverse(w)
    dphi = 2 * np.pi / chart.n_phi
    ip = phi / dphi - 0.5 + 1.0
    nodes = np.concatenate([[0.0], chart.theta, [np.pi]])
    it = np.interp(theta, nodes, np.arange(len(nodes)))
    return ip, it


def _pad_chart_axes(v, axis):
    """Periodic padding in ``phi`` (``axis``) and ring-mean pole nodes in ``theta`` (``axis + 1``)."""
    v = np.concatenate([np.take(v, [-1], axis), v, np.take(v, [0], axis)], axis=axis)
    north = np.take(v, [0], axis + 1).mean(axis=axis, keepdims=True)
    south = np.take(v, [-1], axis + 1).mean(axis=axis, keepdims=True)
    north = np.broadcast_to(north, np.take(v, [0], axis + 1).shape)
    south = np.broadcast_to(south, north.shape)
    return np.concatenate([north, v, south], axis=axis + 1)


def grid_interpolant(grid, values, name="interpolant"):
    """Multilinear interpolant of samples on a star-shaped product grid.

    The six index coordinates are the spatial chart angles, the radial
    fraction, the direction chart angles and the energy.  Each chart gets
    pole nodes carrying the mean of the nearest ring; radial and energy
    values outside the node range are clamped to the nearest node.  Cartesian grids have no
    product structure and are rejected.
    """
    if not grid.layout:
        raise ArgumentError("interpolation needs a star-shaped product grid")
    lay = grid.layout
    xchart = SphereChart(*lay["spatial_chart"], rule="gauss")
    n_r = lay["n_radial"]
    g, _ = leggauss(n_r)
    s = 0.5 * (g + 1)
    if lay["graded"]:
        s = 1.0 - s ** 2
    order = np.argsort(s)
    s_sorted = s[order]
    v = np.asarray(values, dtype=float).reshape(
        xchart.n_phi, xchart.n_theta, n_r, grid.chart.n_phi, grid.chart.n_theta, -1)
    v = v[:, :, order]
    v = _pad_chart_axes(_pad_chart_axes(v, 0), 3)
    E = grid.energies
    domain = grid.domain

    def fn(x, w, E_):
        x = np.asarray(x, dtype=float)
        w = np.asarray(w, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], w.shape[:-1], np.shape(E_))
        X = np.broadcast_to(x, shape + (3,)).reshape(-1, 3)
        W = np.broadcast_to(w, shape + (3,)).reshape(-1, 3)
        Ev = np.broadcast_to(np.asarray(E_, float), shape).reshape(-1)
        d = X - domain.center
        n = np.linalg.norm(d, axis=-1)
        u = np.where((n > 0)[:, None], d / np.where(n > 0, n, 1.0)[:, None], [0.0, 0.0, 1.0])
        frac = n / domain.radial_extent(u)
        ipx, itx = _chart_index(xchart, u)
        ir = np.interp(frac, s_sorted, np.arange(n_r))
        ipw, itw = _chart_index(grid.chart, W)
        ie = np.interp(Ev, E, np.arange(len(E)))
        out = map_coordinates(v, [ipx, itx, ir, ipw, itw, ie], order=1, mode="nearest")
        return out.reshape(shape)

    return PhaseField(fn, name=name)


# ---------------------------------------------------------------------------
# boundary fields
# ---------------------------------------------------------------------------

@dataclass
class BoundaryGrid:
    """Inflow nodes of a boundary quadrature times energy nodes."""

    domain: object
    quadrature: BoundaryQuadrature
    energies: np.ndarray
    energy_weights: np.ndarray
    interval: tuple
    y: np.ndarray = field(init=False, repr=False)
    w: np.ndarray = field(init=False, repr=False)
    nu: np.ndarray = field(init=False, repr=False)
    area: np.ndarray = field(init=False, repr=False)
    flux: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.y, self.w, self.nu, self.area, self.flux = self.quadrature.inflow_nodes()

    @classmethod
    def build(cls, domain, surface=(16, 8), directions=(8, 8), n_energy=3,
              interval=(0.0, 1.0), energy_rule="simpson"):
        q = boundary_quadrature(domain, surface, directions)
        E, wE = energy_nodes(interval, n_energy, energy_rule)
        return cls(domain, q, E, wE, (float(interval[0]), float(interval[1])))

    @property
    def shape(self):
        return (len(self.area), len(self.energies))

    def evaluate(self, g):
        if isinstance(g, BoundaryField):
            if g.grid is not self:
                raise ArgumentError("boundary field lives on a different grid")
            return g.values
        g = as_field(g)
        if g.constant is not None:
            return np.full(self.shape, g.constant)
        return np.asarray(g(self.y[:, None, :], self.w[:, None, :],
                            self.energies[None, :]), dtype=float)


@dataclass
class BoundaryField:
    """Field sampled on the inflow boundary ``Gamma_-``."""

    grid: BoundaryGrid
    values: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ArgumentError("boundary values must match the boundary grid shape")

    @classmethod
    def sample(cls, grid, g, name=""):
        return cls(grid, grid.evaluate(g), name)


# ---------------------------------------------------------------------------
# norms and integrals
# ---------------------------------------------------------------------------

def _finite(values, what):
    if not np.all(np.isfinite(values)):
        raise DataError(f"non-finite values in {what}",
                        {"count": int(np.count_nonzero(~np.isfinite(values)))})
    return values


def l2_norm(f, grid):
    """``||f||_{L2(G x S x I)}`` by the grid quadrature."""
    v = _finite(as_field(f).on(grid) if not isinstance(f, np.ndarray) else f, "l2_norm")
    return float(np.sqrt(grid.integrate(v * v)))


def inner(f, g, grid):
    fv = as_field(f).on(grid) if not isinstance(f, np.ndarray) else f
    gv = as_field(g).on(grid) if not isinstance(g, np.ndarray) else g
    return grid.integrate(_finite(fv, "inner") * _finite(gv, "inner"))


def trace_weight(bgrid, weight):
    """Pointwise weight factor at the inflow nodes of ``bgrid``.

    ``weight`` is ``'unit'``, ``'tau'`` or a pair ``('m1', j)`` / ``('m2', j)``.
    """
    if weight in (None, "unit"):
        return np.ones(len(bgrid.area))
    if weight in ("tau", "tau-"):
        return bgrid.domain.boundary_escape_time(bgrid.y, bgrid.w, side="-")
    kind, j = weight
    from .diagnostics import weight_m  # local import: diagnostics builds on this module
    return weight_m(bgrid.domain, kind, j, bgrid.y, bgrid.w)


def trace_norm(g, bgrid, weight="unit"):
    """Weighted ``T^2(Gamma_-)`` norm ``sqrt(sum |g|^2 weight |w.nu| dsigma dw dE)``.

    The ``m``-weights of the ball carry a ``1/|w . nu|`` factor; it is
    multiplied into the flux weight before summation so the grazing nodes
    stay finite.
    """
    v = _finite(bgrid.evaluate(g), "trace_norm")
    wt = trace_weight(bgrid, weight)
    per_node = np.einsum("ne,e->n", v * v, bgrid.energy_weights)
    with np.errstate(invalid="ignore"):
        terms = np.where(per_node == 0, 0.0, per_node * wt * bgrid.flux)
    return float(np.sqrt(pairwise_sum(_finite(terms, "trace weight"))))


def moment(f, grid, points=None):
    """Velocity-energy average ``(M f)(x) = int_{S x I} f dw dE``.

    Evaluated at the grid's spatial nodes, or at ``points`` using the grid's
    direction and energy quadrature.
    """
    f = as_field(f)
    if points is None:
        v = f.on(grid)
    else:
        points = np.asarray(points, dtype=float)
        v = np.asarray(f(points[:, None, None, :], grid.directions[None, :, None, :],
                         grid.energies[None, None, :]))
        v = np.broadcast_to(v, (len(points), grid.chart.size, len(grid.energies)))
    return np.einsum("xwe,w,e->x", _finite(v, "moment"), grid.chart.weights, grid.energy_weights)


@dataclass
class FubiniResult:
    volume: float
    boundary: float
    gap: float


def fubini_check(f, grid, bgrid, ray_nodes=16):
    """Compare the volume integral with its inflow-boundary ray decomposition.

    The boundary side integrates ``f(y + t w)`` over ``t in (0, tau_-)`` with
    ``ray_nodes`` Gauss points, then over ``Gamma_-`` with the flux weights.
    """
    f = as_field(f)
    vol = grid.integrate(f.on(grid))
    g, gw = leggauss(ray_nodes)
    s, sw = 0.5 * (g + 1), 0.5 * gw
    tau = bgrid.domain.boundary_escape_time(bgrid.y, bgrid.w, side="-")
    t = tau[:, None] * s[None, :]
    x = bgrid.y[:, None, :] + t[..., None] * bgrid.w[:, None, :]

    def block(a, b):
        vals = f(x[a:b, :, None, :], bgrid.w[a:b, None, None, :],
                 bgrid.energies[None, None, :])
        vals = np.broadcast_to(vals, (b - a, len(s), len(bgrid.energies)))
        line = np.einsum("nse,s,e->n", vals, sw, bgrid.energy_weights) * tau[a:b]
        return line * bgrid.flux[a:b]

    parts = np.concatenate(_map_chunks(block, len(tau), max(1, CHUNK_VALUES // (len(s) * len(bgrid.energies)))))
    bnd = pairwise_sum(parts)
    scale = max(abs(vol), abs(bnd))
    gap = 0.0 if scale == 0 else abs(vol - bnd) / scale
    return FubiniResult(float(vol), float(bnd), float(gap))


# ---------------------------------------------------------------------------
# sphere derivatives
# ---------------------------------------------------------------------------

@dataclass
class SphereDerivatives:
    grad: np.ndarray        # (..., 2): d/dphi, d/dtheta in chart coordinates
    laplacian: np.ndarray
    one_sided: np.ndarray   # nodes whose theta stencil was one-sided


def sphere_derivatives(f, x, w, E, step=1e-3):
    """Chart finite differences of ``f`` in the direction variable.

    ``grad`` holds the chart partials ``(df/dphi, df/dtheta)``; the
    Laplace-Beltrami operator is
    ``f_thth + cot(theta) f_th + f_phph / sin(theta)**2``.  ``phi`` is
    periodic; within ``2*step`` of a pole the theta stencil is one-sided
    (second order) and the node is flagged.
    """
    f = as_field(f)
    phi, theta = SphereChart.inverse(np.asarray(w, dtype=float))
    h = float(step)

    def F(dp, dt):
        return f(x, SphereChart.h(phi + dp, theta + dt), E)

    f0 = F(0.0, 0.0)
    fpp = F(h, 0.0)
    fpm = F(-h, 0.0)
    d_phi = (fpp - fpm) / (2 * h)
    d_phiphi = (fpp - 2 * f0 + fpm) / h ** 2
    near_north = theta - 2 * h <= 0
    near_south = theta + 2 * h >= np.pi
    ftp, ftm = F(0.0, h), F(0.0, -h)
    d_th = (ftp - ftm) / (2 * h)
    d_thth = (ftp - 2 * f0 + ftm) / h ** 2
    if np.any(near_north | near_south):
        sgn = np.where(near_north, 1.0, -1.0)
        f1, f2, f3 = F(0.0, sgn * h), F(0.0, 2 * sgn * h), F(0.0, 3 * sgn * h)
        d_th_os = sgn * (-1.5 * f0 + 2 * f1 - 0.5 * f2) / h
        d_thth_os = (2 * f0 - 5 * f1 + 4 * f2 - f3) / h ** 2
        flag = near_north | near_south
        d_th = np.where(flag, d_th_os, d_th)
        d_thth = np.where(flag, d_thth_os, d_thth)
    st = np.sin(theta)
    lap = d_thth + np.cos(theta) / st * d_th + d_phiphi / st ** 2
    return SphereDerivatives(np.stack(np.broadcast_arrays(d_phi, d_th), axis=-1), lap,
                             np.broadcast_to(near_north | near_south, np.shape(lap)))
