"""Scenario files: a versioned TOML key tree describing one solve.

``load_scenario`` parses and validates, filling defaults, so that
``dumps_scenario(load) -> loads`` reproduces the same normalized tree.
Validation errors carry the line of the offending key when it can be
located in the source text.
"""
import copy
from dataclasses import dataclass
import re

import numpy as np
import tomli
import tomli_w

from .errors import ConfigurationError
from .fieldio import domain_from_dict, read_pfield
from .phase_fields import PhaseField, PhaseGrid, grid_interpolant
from .physics import CollisionModel, constant_kernel, rutherford_kernel
from .solvers import SolverConfig, apply_transport_operator

SCHEMA_VERSION = 1
METHODS = ("conv_scatter", "csda_explicit", "neumann")
FIELD_KINDS = ("zero", "constant", "manufactured", "file")
MIN_RESOLUTION = 2

DEFAULTS = {
    "spec_version": SCHEMA_VERSION,
    "name": "scenario",
    "domain": {"kind": "ball", "center": [0.0, 0.0, 0.0], "radius": 1.0},
    "grid": {"resolution": 16, "directions": [16, 8], "n_energy": 5,
             "interval": [0.0, 1.0], "spatial": "graded"},
    "physics": {"sigma": 1.0, "a": 1.0},
    "source": {"kind": "constant", "value": 1.0},
    "inflow": {"kind": "zero"},
    "solver": {"method": "conv_scatter"},
    "norms": {"orders": [], "trace": True},
    "output": {"dir": "out"},
}

SOLVER_DEFAULTS = {"C": "auto", "max_terms": 40, "tol": 1e-10, "ray_panels": 8, "ray_order": 2,
                   "lift_damping": 0.0, "star": [9, 9, 16], "directions": [8, 4],
                   "n_energy": 9}


def _line_of(text, table, key):
    """1-based line of ``key = ...`` inside ``[table]`` (or the top level), else ``None``."""
    if text is None:
        return None
    current = ""
    head = re.compile(r"^\s*\[\s*([^\]]+?)\s*\]\s*$")
    pat = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
    for i, line in enumerate(text.splitlines(), 1):
        m = head.match(line)
        if m:
            current = m.group(1)
            if table and current == table and key is None:
                return i
            continue
        if key is not None and current == (table or "") and pat.match(line):
            return i
    return None


class _Validator:
    def __init__(self, text, source):
        self.text, self.source = text, source

    def fail(self, table, key, message):
        line = _line_of(self.text, table, key) or _line_of(self.text, table, None)
        where = f"{self.source}:{line}: " if line else f"{self.source}: "
        raise ConfigurationError(where + message, {"table": table, "key": key, "line": line})

    def number(self, tree, table, key, positive=False, nonneg=False):
        v = tree[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(table, key, f"{key} must be a number")
        if positive and not v > 0:
            self.fail(table, key, f"{key} must be positive")
        if nonneg and not v >= 0:
            self.fail(table, key, f"{key} must be nonnegative")
        return float(v)

    def integer(self, tree, table, key, minimum=None):
        v = tree[key]
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(table, key, f"{key} must be an integer")
        if minimum is not None and v < minimum:
            self.fail(table, key, f"{key} must be at least {minimum}")
        return v

    def int_list(self, tree, table, key, length):
        v = tree[key]
        if not (isinstance(v, list) and len(v) == length and all(
                isinstance(x, int) and not isinstance(x, bool) and x > 0 for x in v)):
            self.fail(table, key, f"{key} must be a list of {length} positive integers")
        return list(v)


def _merge(defaults, tree):
    out = copy.deepcopy(defaults)
    for k, v in tree.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def normalize(tree, text=None, source="<scenario>"):
    """Validate a parsed tree and return it with every default filled in."""
    val = _Validator(text, source)
    known = set(DEFAULTS) | {"manufactured", "reference"}
    for k in tree:
        if k not in known:
            val.fail("", k, f"unknown key {k!r}")
    if "spec_version" not in tree:
        val.fail("", None, "missing spec_version")
    if tree["spec_version"] != SCHEMA_VERSION:
        val.fail("", "spec_version", f"unsupported spec_version {tree['spec_version']!r}")
    t = _merge(DEFAULTS, tree)
    t["solver"] = _merge(SOLVER_DEFAULTS, t["solver"])
    dom = t["domain"]
    if dom.get("kind") not in ("ball", "ellipsoid"):
        val.fail("domain", "kind", "domain kind must be 'ball' or 'ellipsoid'")
    if dom["kind"] == "ball":
        val.number(dom, "domain", "radius", positive=True)
        dom.pop("semi_axes", None)
    else:
        if "semi_axes" not in dom:
            val.fail("domain", None, "ellipsoid needs semi_axes")
        dom.pop("radius", None)
    g = t["grid"]
    val.integer(g, "grid", "resolution", MIN_RESOLUTION)
    val.int_list(g, "grid", "directions", 2)
    val.integer(g, "grid", "n_energy", 1)
    iv = g["interval"]
    if not (isinstance(iv, list) and len(iv) == 2 and all(isinstance(x, (int, float)) for x in iv)
            and iv[0] < iv[1]):
        val.fail("grid", "interval", "interval must be [E0, Em] with E0 < Em")
    g["interval"] = [float(iv[0]), float(iv[1])]
    if g["spatial"] not in ("graded", "radial"):
        val.fail("grid", "spatial", "spatial must be 'graded' or 'radial'")
    ph = t["physics"]
    val.number(ph, "physics", "sigma", nonneg=True)
    val.number(ph, "physics", "a", nonneg=True)
    ker = ph.get("kernel")
    if ker is not None:
        if ker.get("kind") == "constant":
            val.number(ker, "physics.kernel", "c0", nonneg=True)
        elif ker.get("kind") == "rutherford":
            ker.setdefault("sigma0", 1.0)
            ker.setdefault("q", 1.0)
        else:
            val.fail("physics.kernel", "kind", "kernel kind must be 'constant' or 'rutherford'")
    for name in ("source", "inflow"):
        fd = t[name]
        if fd.get("kind") not in FIELD_KINDS:
            val.fail(name, "kind", f"{name} kind must be one of {', '.join(FIELD_KINDS)}")
        if fd["kind"] == "constant":
            val.number(fd, name, "value")
        if fd["kind"] == "file" and not isinstance(fd.get("path"), str):
            val.fail(name, "path", f"{name} file reference needs a path")
        if fd["kind"] == "manufactured" and "manufactured" not in t:
            val.fail(name, "kind", "manufactured data needs a [manufactured] table")
    if "manufactured" in t and t["manufactured"].get("kind") not in ("polynomial", "linear_x1"):
        val.fail("manufactured", "kind", "manufactured kind must be 'polynomial' or 'linear_x1'")
    if "reference" in t and t["reference"].get("kind") not in ("escape_exponential", "manufactured"):
        val.fail("reference", "kind", "reference kind must be 'escape_exponential' or 'manufactured'")
    if t.get("reference", {}).get("kind") == "escape_exponential" and not (
            t["source"]["kind"] == "constant" and t["inflow"]["kind"] == "zero"
            and t["solver"]["method"] == "conv_scatter" and ph.get("kernel") is None):
        val.fail("reference", "kind", "escape_exponential needs a constant source, zero inflow, "
                 "the conv_scatter method and no kernel")
    s = t["solver"]
    if s["method"] not in METHODS:
        val.fail("solver", "method", f"method must be one of {', '.join(METHODS)}")
    if s["C"] != "auto":
        val.number(s, "solver", "C", nonneg=True)
    val.integer(s, "solver", "max_terms", 1)
    val.number(s, "solver", "tol", positive=True)
    val.integer(s, "solver", "ray_panels", 1)
    val.integer(s, "solver", "ray_order", 1)
    if val.number(s, "solver", "lift_damping", nonneg=True) != 0.0:
        val.fail("solver", "lift_damping", "the solvers use the undamped lift; set lift_damping = 0")
    val.int_list(s, "solver", "star", 3)
    val.int_list(s, "solver", "directions", 2)
    val.integer(s, "solver", "n_energy", 2)
    if s["method"] == "neumann":
        if ph.get("kernel") is None:
            val.fail("solver", "method", "the neumann method needs a [physics.kernel] table")
        if not (ph["a"] > 0 and ph["sigma"] > 0):
            val.fail("physics", "a", "the neumann method needs positive a and sigma")
    if s["method"] == "csda_explicit" and not ph["a"] > 0:
        val.fail("physics", "a", "csda_explicit needs a positive stopping power")
    orders = t["norms"]["orders"]
    if not (isinstance(orders, list) and all(isinstance(o, list) and len(o) == 3 for o in orders)):
        val.fail("norms", "orders", "orders must be a list of [m1, m2, m3] triples")
    if not isinstance(t["output"].get("dir"), str):
        val.fail("output", "dir", "output dir must be a string")
    return t


def loads_scenario(text, source="<scenario>"):
    try:
        tree = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"{source}: {exc}", {"line": getattr(exc, "lineno", None)}) from exc
    return normalize(tree, text, source)


def load_scenario(path):
    with open(path, "r", encoding="utf-8") as fh:
        return loads_scenario(fh.read(), str(path))


def dumps_scenario(tree):
    return tomli_w.dumps(tree)


# ---------------------------------------------------------------------------
# building objects
# ---------------------------------------------------------------------------

def manufactured_field(spec, interval):
    """Smooth exact solutions vanishing at the top energy (except ``linear_x1``)."""
    Em = interval[1]
    kind = spec["kind"]
    if kind == "polynomial":
        def fn(x, w, E):
            x, w, E = np.asarray(x, float), np.asarray(w, float), np.asarray(E, float)
            return (Em - E) * (1 + 0.5 * x[..., 0] ** 2 + x[..., 1] * w[..., 2] + 0.3 * x[..., 2] * w[..., 0])
        return PhaseField(fn, name="manufactured polynomial")
    if kind == "linear_x1":
        def fn(x, w, E):
            x = np.asarray(x, float)
            return np.broadcast_to(x[..., 0], np.broadcast_shapes(x.shape[:-1], np.shape(w)[:-1],
                                                                 np.shape(E))).copy()
        return PhaseField(fn, name="x1")
    raise ConfigurationError(f"unknown manufactured kind {kind!r}")


@dataclass
class Built:
    tree: dict
    domain: object
    grid: PhaseGrid
    model: CollisionModel
    f: PhaseField
    g: PhaseField
    reference: PhaseField
    solver: SolverConfig


def _file_field(path):
    grid, values, _ = read_pfield(path)
    return grid_interpolant(grid, values, name=str(path))


def build(tree, resolution=None):
    """Instantiate domain, grid, model, data and solver settings from a normalized tree."""
    domain = domain_from_dict(tree["domain"])
    g = tree["grid"]
    interval = tuple(g["interval"])
    n_e = g["n_energy"]
    rule = "simpson" if n_e >= 3 and n_e % 2 == 1 else "midpoint"
    grid = PhaseGrid.build(domain, resolution or g["resolution"], tuple(g["directions"]), n_e,
                           interval, spatial=g["spatial"], energy_rule=rule)
    ph = tree["physics"]
    kern = None
    if ph.get("kernel") is not None:
        k = ph["kernel"]
        kern = (constant_kernel("K2", k["c0"]) if k["kind"] == "constant"
                else rutherford_kernel(k["sigma0"], k["q"]))
    method = tree["solver"]["method"]
    a = 0.0 if method == "conv_scatter" else ph["a"]
    model = CollisionModel(sigma_t=ph["sigma"], a=a, K2=kern)
    man = manufactured_field(tree["manufactured"], interval) if "manufactured" in tree else None

    def data(spec, role):
        kind = spec["kind"]
        if kind == "zero":
            return PhaseField(constant=0.0, name="0")
        if kind == "constant":
            return PhaseField(constant=float(spec["value"]))
        if kind == "file":
            return _file_field(spec["path"])
        if role == "inflow":
            return man
        return apply_transport_operator(model, man, domain, interval, quad=grid, form="csda")

    f = data(tree["source"], "source")
    gg = data(tree["inflow"], "inflow")
    ref = None
    if "reference" in tree:
        if tree["reference"]["kind"] == "manufactured":
            ref = man
        else:
            c, sig = float(tree["source"]["value"]), float(ph["sigma"])

            def escape(x, w, E):
                t = domain.escape_time(x, w) + 0 * np.asarray(E)
                return c * t if sig == 0 else (c / sig) * -np.expm1(-sig * t)
            ref = PhaseField(escape, name="escape exponential")
    s = tree["solver"]
    cfg = SolverConfig(C=s["C"], max_terms=s["max_terms"], tol=s["tol"],
                       ray_panels=s["ray_panels"], ray_order=s["ray_order"],
                       lift_damping=s["lift_damping"], star=tuple(s["star"]),
                       directions=tuple(s["directions"]), n_energy=s["n_energy"])
    return Built(tree, domain, grid, model, f, gg, ref, cfg)
