"""Finite-difference anisotropic Sobolev estimators and the fractional seminorm.

The estimators are consistent indicators, not certified norms: their job is
to expose whether a quantity stays bounded or grows as the step shrinks.
"""
from dataclasses import dataclass, field
import itertools

import numpy as np

from .errors import AccuracyError, ArgumentError, BoundaryStencilError
from .geometry import SphereChart
from .phase_fields import PhaseGrid, as_field, pairwise_sum
from .probes import ProbeReport

# axis order of a derivative multi-index
AXES = ("x1", "x2", "x3", "phi", "theta", "E")

# (offsets, weights) per derivative order; all second order accurate
_CENTRAL = {1: ((-1, 1), (-0.5, 0.5)), 2: ((-1, 0, 1), (1.0, -2.0, 1.0))}
_FORWARD = {1: ((0, 1, 2), (-1.5, 2.0, -0.5)), 2: ((0, 1, 2, 3), (2.0, -5.0, 4.0, -1.0))}


def _backward(order):
    off, wt = _FORWARD[order]
    sign = -1.0 if order % 2 else 1.0
    return tuple(-o for o in off), tuple(sign * w for w in wt)


# second-order stencils that fit a shorter chord, at first-order accuracy
_SHORT = {1: ((0, 1), (-1.0, 1.0)), 2: ((0, 1, 2), (1.0, -2.0, 1.0))}
STEP_REDUCTIONS = (1.0, 0.5, 0.25, 0.125)


def _scaled(stencil, order, scale):
    off, wt = stencil
    return (tuple(o * scale for o in off), tuple(w / scale ** order for w in wt))


def stencil_candidates(order):
    """Stencils for one axis in order of preference.

    Central, inward and outward one-sided second-order stencils come first,
    then shorter first-order ones, and the whole list is repeated at halved
    steps so that nodes on chords shorter than three steps still get a
    derivative instead of being dropped.
    """
    if order == 0:
        return [((0,), (1.0,))]
    if order not in _CENTRAL:
        raise ArgumentError("derivative order per axis must be 0, 1 or 2")
    sign = -1.0 if order % 2 else 1.0
    short_b = (tuple(-o for o in _SHORT[order][0]), tuple(sign * w for w in _SHORT[order][1]))
    base = [_CENTRAL[order], _FORWARD[order], _backward(order), _SHORT[order], short_b]
    return [_scaled(st, order, sc) for sc in STEP_REDUCTIONS for st in base]


def multi_indices(orders):
    """All ``(a1, a2, a3, b1, b2, l)`` with ``|a| <= m1``, ``|b| <= m2``, ``l <= m3``."""
    m1, m2, m3 = orders
    if any(m not in (0, 1, 2) for m in orders):
        raise ArgumentError("Sobolev orders must each be 0, 1 or 2")
    out = []
    for a in itertools.product(range(m1 + 1), repeat=3):
        if sum(a) > m1:
            continue
        for b in itertools.product(range(m2 + 1), repeat=2):
            if sum(b) > m2:
                continue
            for l in range(m3 + 1):
                out.append(a + b + (l,))
    return out


def _group_choice(valid_fn, n, cands):
    """Index of the first stencil combination valid at each of ``n`` nodes."""
    choice = np.full(n, -1)
    for k, combo in enumerate(cands):
        todo = choice < 0
        if not np.any(todo):
            break
        ok = valid_fn(combo, todo)
        choice[np.flatnonzero(todo)[ok]] = k
    return choice


@dataclass
class SobolevEstimate:
    norm: float
    terms: dict
    one_sided_fraction: float
    steps: tuple


@dataclass
class _AxisPlan:
    combos: list
    choice: np.ndarray


class DerivativeEstimator:
    """Mixed finite-difference derivatives of a closure on a :class:`PhaseGrid`.

    Steps default to a quarter of ``grid.step`` in space, ``angle_step`` in the chart
    angles and an eighth of the smallest energy spacing in energy.
    """

    def __init__(self, grid, step=None, angle_step=0.02, energy_step=None):
        self.grid = grid
        self.hx = float(step if step is not None else grid.step / 4)
        self.hw = float(angle_step)
        if energy_step is None:
            span = grid.interval[1] - grid.interval[0]
            energy_step = span / (8 * max(len(grid.energies), 1))
        self.hE = float(energy_step)
        self.phi, self.theta = SphereChart.inverse(grid.directions)
        self._cache = {}

    # -- stencil planning per factor -------------------------------------------------

    def _spatial_plan(self, a):
        key = ("x", a)
        if key in self._cache:
            return self._cache[key]
        active = [j for j in range(3) if a[j]]
        cands = list(itertools.product(*[stencil_candidates(a[j]) for j in active]))
        pts = self.grid.points
        dom = self.grid.domain

        def valid(combo, todo):
            offs = self._spatial_offsets(active, combo)
            y = pts[todo][:, None, :] + offs[None] * self.hx
            return np.all(dom.contains(y), axis=1)

        choice = _group_choice(valid, len(pts), cands) if active else np.zeros(len(pts), int)
        if not active:
            cands = [()]
        if np.any(choice < 0):
            bad = int(np.flatnonzero(choice < 0)[0])
            raise BoundaryStencilError("no spatial stencil fits inside the domain",
                                       {"node": bad, "point": pts[bad].tolist()})
        plan = (active, _AxisPlan(cands, choice))
        self._cache[key] = plan
        return plan

    def _spatial_offsets(self, active, combo):
        """Stencil point displacements (in steps) and their weights."""
        if not active:
            return np.zeros((1, 3))
        pts = []
        for idx in itertools.product(*[range(len(c[0])) for c in combo]):
            d = np.zeros(3)
            for j, c, i in zip(active, combo, idx):
                d[j] = c[0][i]
            pts.append(d)
        return np.array(pts)

    @staticmethod
    def _combo_weights(combo):
        if not combo:
            return np.ones(1)
        ws = [np.asarray(c[1]) for c in combo]
        out = ws[0]
        for w in ws[1:]:
            out = np.multiply.outer(out, w)
        return np.asarray(out).reshape(-1)

    def _angle_plan(self, b):
        key = ("w", b)
        if key in self._cache:
            return self._cache[key]
        cth = stencil_candidates(b[1])
        cands = [(cp, ct) for cp in stencil_candidates(b[0])[:1] for ct in cth[:3]]

        def valid(combo, todo):
            offs = np.asarray(combo[1][0]) * self.hw
            th = self.theta[todo][:, None] + offs[None]
            return np.all((th > 0) & (th < np.pi), axis=1)

        choice = _group_choice(valid, len(self.theta), cands)
        if np.any(choice < 0):
            raise BoundaryStencilError("no theta stencil fits in (0, pi)")
        plan = _AxisPlan(cands, choice)
        self._cache[key] = plan
        return plan

    def _energy_plan(self, l):
        key = ("E", l)
        if key in self._cache:
            return self._cache[key]
        E0, Em = self.grid.interval
        E = self.grid.energies

        def valid(combo, todo):
            e = E[todo][:, None] + np.asarray(combo[0][0])[None] * self.hE
            return np.all((e >= E0 - 1e-14) & (e <= Em + 1e-14), axis=1)

        cands = [(c,) for c in stencil_candidates(l)]
        choice = _group_choice(valid, len(E), cands)
        if np.any(choice < 0):
            raise BoundaryStencilError("no energy stencil fits in the interval")
        plan = _AxisPlan(cands, choice)
        self._cache[key] = plan
        return plan

    # -- evaluation ----------------------------------------------------------------

    def derivative(self, f, index):
        """Values of the mixed derivative ``index`` (see :data:`AXES`) on the grid."""
        f = as_field(f)
        a, b, l = tuple(index[:3]), tuple(index[3:5]), index[5]
        active, xplan = self._spatial_plan(a)
        wplan = self._angle_plan(b)
        eplan = self._energy_plan(l)
        scale = self.hx ** sum(a) * self.hw ** sum(b) * self.hE ** l
        out = np.zeros(self.grid.shape)
        P = self.grid.points
        for kx, cx in enumerate(xplan.combos):
            ix = np.flatnonzero(xplan.choice == kx)
            if ix.size == 0:
                continue
            xo = self._spatial_offsets(active, cx) * self.hx
            xw = self._combo_weights(cx)
            for kw, cw in enumerate(wplan.combos):
                iw = np.flatnonzero(wplan.choice == kw)
                if iw.size == 0:
                    continue
                for ke, ce in enumerate(eplan.combos):
                    ie = np.flatnonzero(eplan.choice == ke)
                    if ie.size == 0:
                        continue
                    acc = self._apply(f, P[ix], iw, self.grid.energies[ie], xo, xw, cw, ce)
                    out[np.ix_(ix, iw, ie)] = acc
        return out / scale

    def _apply(self, f, x, iw, E, xo, xw, cw, ce):
        (po, pw), (to, tw) = cw
        eo, ew = ce[0]
        acc = 0.0
        phi, th = self.phi[iw], self.theta[iw]
        for dx, wx in zip(xo, xw):
            xx = (x + dx)[:, None, None, :]
            for dp, wp in zip(po, pw):
                for dt, wt in zip(to, tw):
                    w = SphereChart.h(phi + dp * self.hw, th + dt * self.hw)[None, :, None, :]
                    for de, we in zip(eo, ew):
                        c = wx * wp * wt * we
                        if c != 0.0:
                            acc = acc + c * f(xx, w, (E + de * self.hE)[None, None, :])
        return acc

    def one_sided_fraction(self, index):
        a = tuple(index[:3])
        active, plan = self._spatial_plan(a)
        if not active:
            return 0.0
        return float(np.mean(plan.choice > 0))


def sobolev_norm_estimate(f, grid, orders, step=None, angle_step=0.02, energy_step=None):
    """Finite-difference estimate of the ``H^(m1, m2, m3)`` norm.

    Sums squared L2 norms of every mixed derivative
    ``d_x^a d_w^b d_E^l f`` with ``|a| <= m1``, ``|b| <= m2``, ``l <= m3``.
    Direction derivatives are chart partials in ``(phi, theta)``.
    """
    f = as_field(f)
    est = DerivativeEstimator(grid, step, angle_step, energy_step)
    terms, frac = {}, 0.0
    for idx in multi_indices(orders):
        if f.constant is not None and any(idx):
            terms[idx] = 0.0
            continue
        v = est.derivative(f, idx) if any(idx) else f.on(grid)
        terms[idx] = grid.integrate(v * v)
        frac = max(frac, est.one_sided_fraction(idx))
    total = pairwise_sum(np.array([terms[k] for k in sorted(terms)]))
    return SobolevEstimate(float(np.sqrt(total)), terms, frac, (est.hx, est.hw, est.hE))


def sobolev_probe(f, domain, orders, resolutions=(16, 32, 64), **grid_kwargs):
    """Refinement sequence of :func:`sobolev_norm_estimate` as a :class:`ProbeReport`."""
    values = []
    for n in resolutions:
        grid = PhaseGrid.build(domain, resolution=n, **grid_kwargs)
        values.append(sobolev_norm_estimate(f, grid, orders).norm)
    return ProbeReport(f"H^{tuple(orders)} norm", list(resolutions), values)


# ---------------------------------------------------------------------------
# fractional seminorm in x
# ---------------------------------------------------------------------------

@dataclass
class FractionalEstimate:
    value: float
    stderr: float
    samples: int
    cutoff: float
    strata: list = field(default_factory=list)


def _uniform_in_domain(domain, rng, n):
    """Rejection sampling from the bounding ball."""
    out = np.empty((0, 3))
    R, c = domain.bounding_radius, domain.center
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        u = rng.normal(size=(m, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        p = c + R * rng.random(m)[:, None] ** (1 / 3) * u
        out = np.concatenate([out, p[domain.level(p) > 0]])
    return out[:n]


def _unit_vectors(rng, n):
    u = rng.normal(size=(n, 3))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def fractional_seminorm(f, domain, order, interval=(0.0, 1.0), cutoff=None,
                        samples=200_000, seed=0, step=None, rel_stderr=None):
    """Monte Carlo estimate of the x-direction Slobodeckij seminorm squared.

    ``order = m + kappa`` with integer ``m`` in {0, 1} and ``0 < kappa < 1``.
    The double integral over ``|x - x'| >= cutoff`` is sampled in decades of
    ``r = |x - x'|`` with density proportional to ``r**(-1 - 2 kappa)``.
    Order-``m`` derivatives are central differences with ``step`` (default
    ``cutoff``) falling back to one-sided ones next to the boundary.

    Returns a :class:`FractionalEstimate`; raises :class:`AccuracyError`
    when ``rel_stderr`` is given and not met.
    """
    f = as_field(f)
    m = int(np.floor(order))
    kappa = float(order) - m
    if m not in (0, 1) or not 0 < kappa < 1:
        raise ArgumentError("order must be m + kappa with m in {0, 1} and 0 < kappa < 1")
    d = domain.diameter
    rmin = float(cutoff if cutoff is not None else d / 32)
    h = float(step if step is not None else rmin)
    E0, Em = interval
    rng = np.random.default_rng(seed)
    edges = [rmin]
    while edges[-1] * 10 < d:
        edges.append(edges[-1] * 10)
    edges.append(d)
    n_strata = len(edges) - 1
    per = max(samples // n_strata, 2)
    e = 2 * kappa
    vol = domain.volume() if hasattr(domain, "volume") else None
    if vol is None:
        raise ArgumentError("domain must report its volume")
    strata, total, var = [], 0.0, 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        x = _uniform_in_domain(domain, rng, per)
        w = _unit_vectors(rng, per)
        E = E0 + (Em - E0) * rng.random(per)
        u = _unit_vectors(rng, per)
        # inverse-CDF draw of r with density ~ r^(-1-e) on [lo, hi]
        z = rng.random(per)
        a, b = lo ** -e, hi ** -e
        r = (a - z * (a - b)) ** (-1 / e)
        norm_const = (a - b) / e
        y = x + r[:, None] * u
        ins = domain.contains(y, closed=False)
        diff = np.zeros(per)
        if np.any(ins):
            xi, yi, wi, Ei = x[ins], y[ins], w[ins], E[ins]
            if m == 0:
                dv = f(xi, wi, Ei) - f(yi, wi, Ei)
                diff[ins] = dv * dv
            else:
                acc = 0.0
                for j in range(3):
                    dv = _first_derivative(f, domain, xi, wi, Ei, j, h) - \
                        _first_derivative(f, domain, yi, wi, Ei, j, h)
                    acc = acc + dv * dv
                diff[ins] = acc
        # integrand weight: vol(G) * 4 pi * m(I) for (x, w, E), 4 pi for u, normaliser for r
        g = diff * vol * 4 * np.pi * (Em - E0) * 4 * np.pi * norm_const
        mean = pairwise_sum(g) / per
        s2 = float(np.var(g, ddof=1)) / per
        strata.append({"r_lo": lo, "r_hi": hi, "mean": mean, "stderr": float(np.sqrt(s2))})
        total += mean
        var += s2
    est = FractionalEstimate(total, float(np.sqrt(var)), per * n_strata, rmin, strata)
    if rel_stderr is not None and est.value > 0 and est.stderr > rel_stderr * est.value:
        raise AccuracyError("sample budget too small for the requested standard error",
                            {"value": est.value, "stderr": est.stderr, "samples": est.samples})
    return est


def _first_derivative(f, domain, x, w, E, j, h):
    e = np.zeros(3)
    e[j] = h
    xp, xm = x + e, x - e
    okp, okm = domain.contains(xp), domain.contains(xm)
    f0 = f(x, w, E)
    out = np.empty(len(x))
    c = okp & okm
    out[c] = (f(xp[c], w[c], E[c]) - f(xm[c], w[c], E[c])) / (2 * h)
    fw = ~c & okp
    if np.any(fw):
        x2 = x[fw] + 2 * e
        ok2 = domain.contains(x2)
        v = np.where(ok2, (-1.5 * f0[fw] + 2 * f(xp[fw], w[fw], E[fw])
                           - 0.5 * f(np.where(ok2[:, None], x2, x[fw]), w[fw], E[fw])) / h,
                     (f(xp[fw], w[fw], E[fw]) - f0[fw]) / h)
        out[fw] = v
    bw = ~c & ~okp
    if np.any(bw):
        ok1 = okm[bw]
        x2 = x[bw] - 2 * e
        ok2 = ok1 & domain.contains(x2)
        xm_safe = np.where(ok1[:, None], xm[bw], x[bw])
        x2_safe = np.where(ok2[:, None], x2, x[bw])
        fm, f2 = f(xm_safe, w[bw], E[bw]), f(x2_safe, w[bw], E[bw])
        v = np.where(ok2, (1.5 * f0[bw] - 2 * fm + 0.5 * f2) / h,
                     np.where(ok1, (f0[bw] - fm) / h, 0.0))
        out[bw] = v
    return out
