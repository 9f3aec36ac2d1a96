"""Coefficients and restricted collision operators.

Kernels are closures with fixed argument orders::

    sigma1(x, w_in, w_out, E_in, E_out)
    sigma2(x, w_in, w_out, E)
    sigma3(x, E_in, E_out)

so that ``(K1 psi)(x, w, E) = int sigma1(x, w', w, E', E) psi(x, w', E') dw' dE'``
and likewise for the others.  The in-scatter integrals run over the
direction and energy quadrature of a :class:`~csda_transport.phase_fields.PhaseGrid`.
"""
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import (ArgumentError, AssumptionViolation, ConfigurationError,
                     KinematicsError, ModelError)
from .geometry import SphereChart, _dot, orthonormal_frame
from .phase_fields import PhaseField, PhaseGrid, as_field, inner, l2_norm

KERNELS = ("K1", "K2", "K3")


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------

def mu(E_in, E_out):
    """Cosine of the deflection angle for a downscatter ``E_in -> E_out``."""
    Ei = np.asarray(E_in, dtype=float)
    Eo = np.asarray(E_out, dtype=float)
    if np.any(Eo <= 0) or np.any(Ei <= 0):
        raise ArgumentError("energies must be positive")
    if np.any(Eo > Ei):
        raise KinematicsError("upscatter: outgoing energy exceeds incoming energy")
    return np.sqrt(Eo * (Ei + 2.0) / (Ei * (Eo + 2.0)))


def _mu_clipped(E_in, E_out):
    # upscatter pairs and E = 0 collapse to the elastic (degenerate) circle
    Ei, Eo = np.broadcast_arrays(np.asarray(E_in, float), np.asarray(E_out, float))
    with np.errstate(divide="ignore", invalid="ignore"):
        m = np.sqrt(Eo * (Ei + 2.0) / (Ei * (Eo + 2.0)))
    m = np.where((Eo >= Ei) | ~np.isfinite(m), 1.0, m)
    return np.clip(m, -1.0, 1.0)


def gamma_circle(E_in, E_out, w, s, _cosine=None):
    """Point ``s`` of the circle ``{w' : w' . w = mu(E_in, E_out)}``.

    ``w' = mu w + sqrt(1 - mu^2) (cos s u + sin s v)`` with ``(u, v)`` from
    :func:`~csda_transport.geometry.orthonormal_frame`.
    """
    m = mu(E_in, E_out) if _cosine is None else _cosine
    w = np.asarray(w, dtype=float)
    s = np.asarray(s, dtype=float)
    u, v = orthonormal_frame(w)
    m = np.asarray(m)[..., None]
    r = np.sqrt(np.maximum(1.0 - m * m, 0.0))
    out = m * w + r * (np.cos(s)[..., None] * u + np.sin(s)[..., None] * v)
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# kernels and the model container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Kernel:
    """A nonnegative scattering kernel; ``constant`` enables closed forms."""

    fn: object
    name: str = ""
    constant: float = None
    params: dict = field(default_factory=dict)

    def __call__(self, *args):
        if self.constant is not None:
            shape = np.broadcast_shapes(*[np.shape(a)[:-1] if i in self._vector_args else np.shape(a)
                                          for i, a in enumerate(args)])
            return np.full(shape, self.constant)
        return np.asarray(self.fn(*args), dtype=float)

    @property
    def _vector_args(self):
        return self.params.get("_vector_args", ())


def constant_kernel(kind, c0):
    """Constant kernel ``c0`` for ``kind`` in {'K1', 'K2', 'K3'}."""
    if c0 < 0:
        raise ModelError("kernels must be nonnegative")
    vec = {"K1": (0, 1, 2), "K2": (0, 1, 2), "K3": (0,)}[kind]
    return Kernel(None, f"constant({c0})", float(c0), {"c0": float(c0), "_vector_args": vec})


def rutherford_sigma2(x, w_in, w_out, E, sigma0=1.0, q=1.0, q_floor=1e-12):
    """Screened Rutherford rate ``sigma0 (E+1)^2 / (E^2 (E+2)^2) / (1 - w'.w + q)^2``.

    ``sigma0`` and ``q`` may be numbers or callables ``sigma0(x)``,
    ``q(x, E)``.
    """
    x = np.asarray(x, dtype=float)
    E = np.asarray(E, dtype=float)
    s0 = sigma0(x) if callable(sigma0) else sigma0
    qq = q(x, E) if callable(q) else q
    if np.any(np.asarray(qq) < q_floor):
        raise ModelError("screening parameter below its positive floor",
                         {"min_q": float(np.min(qq)), "floor": q_floor})
    if np.any(np.asarray(s0) < 0):
        raise ModelError("sigma0 must be nonnegative")
    c = _dot(np.asarray(w_in, float), np.asarray(w_out, float))
    pref = (E + 1.0) ** 2 / (E ** 2 * (E + 2.0) ** 2)
    return s0 * pref / (1.0 - c + qq) ** 2


def rutherford_kernel(sigma0=1.0, q=1.0):
    return Kernel(lambda x, wi, wo, E: rutherford_sigma2(x, wi, wo, E, sigma0, q),
                  f"rutherford(sigma0={sigma0}, q={q})", None,
                  {"sigma0": sigma0, "q": q})


def rutherford_row_integral(E, sigma0=1.0, q=1.0):
    """Closed form of ``int_S sigma2 dw'``: ``2 pi C_E (1/q - 1/(2+q))``."""
    E = np.asarray(E, dtype=float)
    cE = sigma0 * (E + 1.0) ** 2 / (E ** 2 * (E + 2.0) ** 2)
    return 2 * np.pi * cE * (1.0 / q - 1.0 / (2.0 + q))


@dataclass(frozen=True)
class CollisionModel:
    """Coefficients ``(Sigma, a, c, d)`` and optional kernels.

    ``sigma_t(x, w, E)`` and ``a(x, E)`` are fields or numbers; ``c`` and ``d``
    (angular diffusion and drift) are only used by the operator applicator.
    ``constants`` holds declared Schur constants (``M1``, ``M2``, ...).
    """

    sigma_t: object = 0.0
    a: object = 1.0
    c: object = 0.0
    d: object = None
    K1: Kernel = None
    K2: Kernel = None
    K3: Kernel = None
    constants: dict = field(default_factory=dict)

    def kernel(self, which):
        if which not in KERNELS:
            raise ArgumentError(f"unknown kernel {which!r}")
        k = getattr(self, which)
        if k is None:
            raise ConfigurationError(f"collision model has no {which} kernel")
        return k

    @property
    def kernels(self):
        return [k for k in KERNELS if getattr(self, k) is not None]

    def sigma_field(self):
        return as_field(self.sigma_t, "Sigma")

    def a_value(self, x, E):
        a = self.a
        if callable(a):
            return np.asarray(a(x, E), dtype=float)
        return np.full(np.broadcast_shapes(np.shape(x)[:-1], np.shape(E)), float(a))

    def a_constant(self):
        return None if callable(self.a) else float(self.a)

    def sigma_constant(self):
        s = self.sigma_t
        if isinstance(s, PhaseField):
            return s.constant
        return None if callable(s) else float(s)


# ---------------------------------------------------------------------------
# collision application
# ---------------------------------------------------------------------------

def _shape(x, w, E):
    return np.broadcast_shapes(np.shape(x)[:-1], np.shape(w)[:-1], np.shape(E))


def _k1(kern, psi, quad, x, w, E):
    out = np.zeros(_shape(x, w, E))
    Wd, wd = quad.directions, quad.direction_weights
    En, wE = quad.energies, quad.energy_weights
    for k in range(len(wd)):
        for m in range(len(wE)):
            if kern.constant is not None:
                out = out + kern.constant * wd[k] * wE[m] * psi(x, Wd[k], En[m])
            else:
                out = out + wd[k] * wE[m] * kern(x, Wd[k], w, En[m], E) * psi(x, Wd[k], En[m])
    return out


def _k2(kern, psi, quad, x, w, E):
    out = np.zeros(_shape(x, w, E))
    Wd, wd = quad.directions, quad.direction_weights
    for k in range(len(wd)):
        if kern.constant is not None:
            out = out + kern.constant * wd[k] * psi(x, Wd[k], E)
        else:
            out = out + wd[k] * kern(x, Wd[k], w, E) * psi(x, Wd[k], E)
    return out


def circle_nodes(n):
    """Uniform (spectrally accurate) rule on the periodic interval ``[0, 2 pi)``."""
    s = (np.arange(n) + 0.5) * 2 * np.pi / n
    return s, np.full(n, 2 * np.pi / n)


def _k3(kern, psi, quad, x, w, E, n_circle=16):
    out = np.zeros(_shape(x, w, E))
    En, wE = quad.energies, quad.energy_weights
    s, ws = circle_nodes(n_circle)
    w = np.asarray(w, dtype=float)
    E = np.asarray(E, dtype=float)
    for m in range(len(wE)):
        cos = _mu_clipped(En[m], E)
        sig = kern(x, En[m], E)
        for j in range(len(s)):
            wp = gamma_circle(None, None, w, np.full(np.shape(w)[:-1], s[j]),
                              _cosine=np.broadcast_to(cos, np.broadcast_shapes(np.shape(cos), np.shape(w)[:-1])))
            out = out + wE[m] * ws[j] * sig * psi(x, wp, En[m])
    return out


def apply_collision(model, which, f, quad, n_circle=16):
    """``K f`` for ``which`` in {'K1', 'K2', 'K3'} as a closure field.

    ``quad`` supplies the in-scatter quadrature (direction chart and energy
    nodes).  The result is linear in ``f`` and nonnegative for nonnegative
    ``f``.
    """
    kern = model.kernel(which)
    psi = as_field(f)
    if psi.is_sampled:
        raise ArgumentError("collision operators need a closure-backed field")
    if which == "K1":
        fn = lambda x, w, E: _k1(kern, psi, quad, np.asarray(x, float), np.asarray(w, float), np.asarray(E, float))
    elif which == "K2":
        fn = lambda x, w, E: _k2(kern, psi, quad, np.asarray(x, float), np.asarray(w, float), np.asarray(E, float))
    else:
        fn = lambda x, w, E: _k3(kern, psi, quad, np.asarray(x, float), np.asarray(w, float), np.asarray(E, float), n_circle)
    return PhaseField(fn, name=f"{which}({psi.name})")


def apply_collision_sum(model, f, quad, n_circle=16):
    """``K_r f`` summed over every kernel present (zero field if none)."""
    parts = [apply_collision(model, k, f, quad, n_circle) for k in model.kernels]
    if not parts:
        return PhaseField(constant=0.0, name="0")
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


# ---------------------------------------------------------------------------
# Schur constants, coercivity
# ---------------------------------------------------------------------------

def kernel_integrals(model, which, x, w, E, quad, n_circle=16):
    """Row and column integrals of a kernel at sample points ``(x, w, E)``.

    Row: ``int sigma(.., w', w, E', E) dw' dE'`` (incoming variables
    integrated); column: the same with the roles swapped.  For ``K3`` the
    integrals are over ``E'`` only (the circle length ``2 pi`` is part of
    the certificate, not the constants).
    """
    kern = model.kernel(which)
    x = np.asarray(x, float)
    w = np.asarray(w, float)
    E = np.asarray(E, float)
    Wd, wd = quad.directions, quad.direction_weights
    En, wE = quad.energies, quad.energy_weights
    shape = _shape(x, w, E)
    row, col = np.zeros(shape), np.zeros(shape)
    if which == "K1":
        for k in range(len(wd)):
            for m in range(len(wE)):
                row = row + wd[k] * wE[m] * kern(x, Wd[k], w, En[m], E)
                col = col + wd[k] * wE[m] * kern(x, w, Wd[k], E, En[m])
    elif which == "K2":
        for k in range(len(wd)):
            row = row + wd[k] * kern(x, Wd[k], w, E)
            col = col + wd[k] * kern(x, w, Wd[k], E)
    else:
        for m in range(len(wE)):
            row = row + wE[m] * kern(x, En[m], E)
            col = col + wE[m] * kern(x, E, En[m])
        row, col = np.broadcast_to(row, shape), np.broadcast_to(col, shape)
    return row, col


def _sample_points(quad, n_mc, seed):
    """Phase points: the grid nodes (subsampled) plus ``n_mc`` random ones."""
    rng = np.random.default_rng(seed)
    X = quad.points[:: max(1, len(quad.points) // 64)]
    W = quad.directions
    E = quad.energies
    gx = np.repeat(X, len(W) * len(E), axis=0)
    gw = np.tile(np.repeat(W, len(E), axis=0), (len(X), 1))
    gE = np.tile(E, len(X) * len(W))
    dom = quad.domain
    u = rng.normal(size=(n_mc, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    rad = dom.radial_extent(u) * rng.random(n_mc) ** (1 / 3)
    mx = dom.center + rad[:, None] * u
    mw = rng.normal(size=(n_mc, 3))
    mw /= np.linalg.norm(mw, axis=1, keepdims=True)
    mE = quad.interval[0] + (quad.interval[1] - quad.interval[0]) * rng.random(n_mc)
    return (np.concatenate([gx, mx]), np.concatenate([gw, mw]), np.concatenate([gE, mE]))


@dataclass
class SchurReport:
    kernel: str
    M1: float
    M2: float
    M1_p99: float
    M2_p99: float
    certificate: float
    rayleigh_max: float
    rayleigh: list
    n_samples: int

    def to_dict(self):
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v)
                for k, v in self.__dict__.items() if k != "rayleigh"} | {
            "rayleigh": [float(r) for r in self.rayleigh]}


def random_field(rng, domain, degree=2, n_terms=6):
    """Random smooth field: a sum of products of low-order trig/polynomial factors."""
    c = domain.center
    R = domain.bounding_radius
    terms = []
    for _ in range(n_terms):
        a = rng.normal()
        kx = rng.normal(size=3) * degree / R
        px = rng.uniform(0, 2 * np.pi)
        kw = rng.normal(size=3) * degree
        pw = rng.uniform(0, 2 * np.pi)
        ke = rng.normal() * degree
        terms.append((a, kx, px, kw, pw, ke))

    def fn(x, w, E):
        x = np.asarray(x, float) - c
        out = 0.0
        for a, kx, px, kw, pw, ke in terms:
            out = out + a * np.cos(_dot(x, kx) + px) * np.cos(_dot(w, kw) + pw) * np.cos(ke * E)
        return out

    return PhaseField(fn, name="random")


def schur_bounds(model, which, quad, n_mc=10_000, seed=0, n_probes=20, refine_check=True,
                 n_circle=16):
    """Estimate the Schur constants of one kernel and probe the certificate.

    ``M1``/``M2`` are maxima of the row/column integrals over the subsampled
    grid nodes plus ``n_mc`` random phase points (99th percentiles are kept
    for reference).  The certificate is ``sqrt(M1 M2)`` (times ``2 pi`` for
    K3).  Rayleigh quotients ``||K psi|| / ||psi||`` are evaluated on the
    constant field and ``n_probes - 1`` random smooth fields.

    Raises :class:`AssumptionViolation` when the row or column integrals
    change by more than 10% on a doubled direction chart.
    """
    x, w, E = _sample_points(quad, n_mc, seed)
    row, col = kernel_integrals(model, which, x, w, E, quad)
    if refine_check and which != "K3":
        fine = PhaseGrid(quad.domain, quad.points, quad.volume_weights,
                         SphereChart(2 * quad.chart.n_phi, 2 * quad.chart.n_theta, quad.chart.rule),
                         quad.energies, quad.energy_weights, quad.interval, quad.resolution)
        r2, c2 = kernel_integrals(model, which, x, w, E, fine)
        scale = max(np.max(np.abs(r2)), np.max(np.abs(c2)), 1e-300)
        if max(np.max(np.abs(r2 - row)), np.max(np.abs(c2 - col))) > 0.1 * scale:
            raise AssumptionViolation("kernel integrals do not settle under refinement",
                                      {"kernel": which})
    if not (np.all(np.isfinite(row)) and np.all(np.isfinite(col))):
        raise AssumptionViolation("kernel integral is not finite", {"kernel": which})
    M1, M2 = float(np.max(row)), float(np.max(col))
    cert = float(np.sqrt(M1 * M2)) * (2 * np.pi if which == "K3" else 1.0)
    rng = np.random.default_rng(seed + 1)
    fields = [PhaseField(constant=1.0, name="1")]
    fields += [random_field(rng, quad.domain) for _ in range(max(n_probes - 1, 0))]
    ratios = []
    for f in fields:
        nf = l2_norm(f, quad)
        if nf == 0:
            continue
        Kf = apply_collision(model, which, f, quad, n_circle)
        ratios.append(l2_norm(Kf, quad) / nf)
    return SchurReport(which, M1, M2, float(np.percentile(row, 99)), float(np.percentile(col, 99)),
                       cert, float(max(ratios)) if ratios else 0.0, ratios, len(row))


@dataclass
class CoercivityReport:
    margin: float
    probes: list
    min_quotient: float


def coercivity_margin(model, quad, n_mc=2_000, seed=0, n_probes=0, n_circle=16):
    """Infimum over sampled phase points of the two absorption-minus-scattering sums.

    With ``n_probes > 0`` the quotients ``<(Sigma - K) psi, psi> / ||psi||^2``
    for that many random fields (the first being constant) are attached.
    """
    x, w, E = _sample_points(quad, n_mc, seed)
    sig = np.broadcast_to(model.sigma_field()(x, w, E), E.shape)
    lhs_out, lhs_in = sig.copy(), sig.copy()
    for k in model.kernels:
        row, col = kernel_integrals(model, k, x, w, E, quad)
        f = 2 * np.pi if k == "K3" else 1.0
        lhs_in = lhs_in - f * row
        lhs_out = lhs_out - f * col
    margin = float(min(np.min(lhs_in), np.min(lhs_out)))
    probes = []
    if n_probes:
        rng = np.random.default_rng(seed + 2)
        fields = [PhaseField(constant=1.0)] + [random_field(rng, quad.domain) for _ in range(n_probes - 1)]
        Sig = model.sigma_field()
        for f in fields:
            Kf = apply_collision_sum(model, f, quad, n_circle)
            op = PhaseField(lambda x, w, E, f=f, Kf=Kf: Sig(x, w, E) * f(x, w, E) - Kf(x, w, E))
            probes.append(inner(op, f, quad) / l2_norm(f, quad) ** 2)
    return CoercivityReport(margin, probes, float(min(probes)) if probes else float("nan"))


# ---------------------------------------------------------------------------
# range map
# ---------------------------------------------------------------------------

@dataclass
class RangeMap:
    """Tabulated ``R(E) = int_0^E dtau / a(tau)`` and its monotone inverse."""

    energies: np.ndarray
    ranges: np.ndarray
    a_values: np.ndarray

    def __post_init__(self):
        self._fwd = PchipInterpolator(self.energies, self.ranges)
        self._inv = PchipInterpolator(self.ranges, self.energies)

    @property
    def E_max(self):
        return float(self.energies[-1])

    @property
    def r_max(self):
        return float(self.ranges[-1])

    def R(self, E):
        E = np.asarray(E, dtype=float)
        if np.any(E < -1e-14) or np.any(E > self.E_max * (1 + 1e-14) + 1e-14):
            raise ArgumentError("energy outside the tabulated interval")
        return self._fwd(np.clip(E, 0.0, self.E_max))

    def inverse(self, r, polish=True):
        """``R^{-1}(r)``: PCHIP guess, then bisection on the forward map."""
        r = np.asarray(r, dtype=float)
        if np.any(r < -1e-14) or np.any(r > self.r_max * (1 + 1e-12) + 1e-14):
            raise ArgumentError("range value outside [0, r_max]")
        r = np.clip(r, 0.0, self.r_max)
        E = np.clip(self._inv(r), 0.0, self.E_max)
        if not polish:
            return E
        # bracket from the table, then bisect the forward interpolant
        idx = np.clip(np.searchsorted(self.ranges, r), 1, len(self.ranges) - 1)
        lo, hi = self.energies[idx - 1].copy(), self.energies[idx].copy()
        good = (self._fwd(E) - r) == 0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            below = self._fwd(mid) < r
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= 1e-15 * max(self.E_max, 1.0)):
                break
        return np.where(good, E, 0.5 * (lo + hi))

    def eta(self, E, a):
        """``(E_m - E) / a`` for a constant stopping power ``a``."""
        return (self.E_max - np.asarray(E, dtype=float)) / a


def range_map(a, E_max, n=4001, kappa=0.0):
    """Build a :class:`RangeMap` on ``[0, E_max]`` by the composite trapezoid rule.

    ``a`` is a number or a callable of ``E``; it must satisfy
    ``a >= kappa`` and ``a > 0`` on the interval.
    """
    if E_max <= 0:
        raise ArgumentError("E_max must be positive")
    if n < 2:
        raise ArgumentError("need at least two nodes")
    E = np.linspace(0.0, float(E_max), n)
    av = np.asarray(a(E), dtype=float) if callable(a) else np.full(n, float(a))
    if av.shape != E.shape:
        av = np.broadcast_to(av, E.shape).astype(float)
    if np.any(av <= 0) or np.any(av < kappa):
        raise ModelError("stopping power below its positive floor",
                         {"min_a": float(np.min(av)), "kappa": float(kappa)})
    inv = 1.0 / av
    R = np.concatenate([[0.0], np.cumsum(0.5 * (inv[1:] + inv[:-1]) * np.diff(E))])
    return RangeMap(E, R, av)


# ---------------------------------------------------------------------------
# exponential shift
# ---------------------------------------------------------------------------

def shifted_kernel(model, C):
    """Model whose kernels act as ``e^{CE} K (e^{-CE'} .)``.

    K2 is energy-local and unchanged; K1 and K3 gain ``exp(C (E - E'))``.
    """
    if C < 0:
        raise ArgumentError("shift rate must be nonnegative")
    if C == 0:
        return model
    C = float(C)
    changes = {}
    if model.K1 is not None:
        k = model.K1
        changes["K1"] = Kernel(lambda x, wi, wo, Ei, Eo, k=k: k(x, wi, wo, Ei, Eo) * np.exp(C * (Eo - Ei)),
                               f"shift({k.name}, {C})", None, dict(k.params, shift=C))
    if model.K3 is not None:
        k = model.K3
        changes["K3"] = Kernel(lambda x, Ei, Eo, k=k: k(x, Ei, Eo) * np.exp(C * (Eo - Ei)),
                               f"shift({k.name}, {C})", None, dict(k.params, shift=C))
    return replace(model, **changes)
