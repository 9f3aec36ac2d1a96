"""On-disk formats: sampled fields, domain descriptions and norm tables.

``.pfield`` and ``.bfield`` files are one line of JSON (the header, sorted
keys) followed by the values as little-endian float64 in C order.
"""
import csv
import io
import json

import numpy as np

from .errors import ArgumentError, DataError
from .geometry import Ball, Ellipsoid
from .phase_fields import BoundaryGrid, PhaseGrid

FORMAT_VERSION = 1
NORMS_COLUMNS = ("quantity", "order_or_weight", "resolution", "value", "stderr")


def domain_to_dict(domain):
    if isinstance(domain, Ball):
        return {"kind": "ball", "center": domain.center.tolist(), "radius": float(domain.radius)}
    if isinstance(domain, Ellipsoid):
        return {"kind": "ellipsoid", "center": domain.center.tolist(),
                "semi_axes": domain.semi_axes.tolist()}
    raise ArgumentError(f"domain {domain!r} has no serial form")


def domain_from_dict(d):
    kind = d.get("kind", "ball")
    center = d.get("center", [0.0, 0.0, 0.0])
    if kind == "ball":
        return Ball(center, d.get("radius", 1.0))
    if kind == "ellipsoid":
        return Ellipsoid(d["semi_axes"], center)
    raise ArgumentError(f"unknown domain kind {kind!r}")


def grid_to_dict(grid):
    if grid.layout is None:
        raise ArgumentError("only grids made by PhaseGrid.build can be described")
    return {"domain": domain_to_dict(grid.domain), "resolution": grid.resolution,
            "directions": [grid.chart.n_phi, grid.chart.n_theta],
            "sphere_rule": grid.chart.rule, "n_energy": len(grid.energies),
            "interval": list(grid.interval), "spatial": grid.spatial,
            "energy_rule": grid.energy_rule}


def grid_from_dict(d):
    return PhaseGrid.build(domain_from_dict(d["domain"]), resolution=d["resolution"],
                           directions=tuple(d["directions"]), n_energy=d["n_energy"],
                           interval=tuple(d["interval"]), spatial=d["spatial"],
                           sphere_rule=d.get("sphere_rule", "gauss"),
                           energy_rule=d.get("energy_rule", "simpson"))


def _write(path, header, values):
    values = np.ascontiguousarray(values, dtype="<f8")
    header = dict(header, shape=list(values.shape), version=FORMAT_VERSION, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(values.tobytes(order="C"))


def _read(path, kind):
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: unreadable header", {"path": str(path)}) from exc
        if header.get("format") != kind:
            raise DataError(f"{path}: not a {kind} file", {"path": str(path)})
        raw = fh.read()
    shape = tuple(header["shape"])
    n = int(np.prod(shape))
    if len(raw) != 8 * n:
        raise DataError(f"{path}: payload holds {len(raw) // 8} values, header says {n}",
                        {"path": str(path)})
    return header, np.frombuffer(raw, dtype="<f8").reshape(shape).astype(float)


def write_pfield(path, grid, values, name="", provenance=None):
    if tuple(np.shape(values)) != grid.shape:
        raise ArgumentError("values do not match the grid shape")
    _write(path, {"format": "pfield", "grid": grid_to_dict(grid), "name": name,
                  "provenance": provenance or {}}, values)


def read_pfield(path):
    """Return ``(grid, values, header)``; the grid is rebuilt from the header."""
    header, values = _read(path, "pfield")
    grid = grid_from_dict(header["grid"])
    if grid.shape != values.shape:
        raise DataError(f"{path}: values do not match the described grid", {"path": str(path)})
    return grid, values, header


def write_bfield(path, bgrid, values, surface, directions, name=""):
    if tuple(np.shape(values)) != bgrid.shape:
        raise ArgumentError("values do not match the boundary grid shape")
    _write(path, {"format": "bfield", "domain": domain_to_dict(bgrid.domain),
                  "surface": list(surface), "directions": list(directions),
                  "n_energy": len(bgrid.energies), "interval": list(bgrid.interval),
                  "name": name}, values)


def read_bfield(path):
    header, values = _read(path, "bfield")
    bgrid = BoundaryGrid.build(domain_from_dict(header["domain"]), tuple(header["surface"]),
                               tuple(header["directions"]), header["n_energy"],
                               tuple(header["interval"]))
    if bgrid.shape != values.shape:
        raise DataError(f"{path}: values do not match the described grid", {"path": str(path)})
    return bgrid, values, header


def format_float(v):
    """Shortest round-trip text for a float; empty for ``None``."""
    if v is None:
        return ""
    return repr(float(v))


def norms_csv(rows):
    """RFC 4180 text (CRLF line ends) for rows of the norms table."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\r\n")
    wr.writerow(NORMS_COLUMNS)
    for r in rows:
        wr.writerow([r["quantity"], r["order_or_weight"], str(int(r["resolution"])),
                     format_float(r["value"]), format_float(r.get("stderr"))])
    return buf.getvalue()


def read_norms_csv(text):
    rd = csv.reader(io.StringIO(text))
    head = next(rd)
    if tuple(head) != NORMS_COLUMNS:
        raise DataError("unexpected norms table header")
    return [dict(zip(NORMS_COLUMNS, r)) for r in rd]
