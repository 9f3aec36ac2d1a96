"""Command-line entry point: ``csda-transport {solve,verify,norms,sweep}``.

Exit codes: 0 success, 2 configuration error, 3 solver error, 4 failed
verification.  ``TRANSPORT_OUT`` overrides every output directory.
"""
import argparse
import json
import os
from pathlib import Path
import sys

import numpy as np

from .errors import (ConfigurationError, ConvergenceError, DataError, NonContractionError,
                     TransportError)
from .fieldio import norms_csv, read_pfield, write_pfield
from .phase_fields import BoundaryGrid, grid_interpolant, l2_norm, set_threads, trace_norm
from .scenario import build, dumps_scenario, load_scenario
from .sobolev import sobolev_norm_estimate
from .solvers import RayQuadrature, neumann_solve, solve_conv_scatter, solve_csda_explicit
from .verify import SUITES, report_json, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4


def _out_dir(configured):
    d = Path(os.environ.get("TRANSPORT_OUT") or configured)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _dump_json(path, doc):
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _solve(built, residual_probes=200, seed=0):
    """Run the configured method; returns ``(field, report dict)``."""
    t = built.tree
    method = t["solver"]["method"]
    interval = tuple(t["grid"]["interval"])
    ph = t["physics"]
    ray = RayQuadrature()
    if method == "conv_scatter":
        psi = solve_conv_scatter(built.domain, ph["sigma"], built.f, built.g, ray)
        return psi, {"method": method}
    if method == "csda_explicit":
        if interval[0] != 0.0:
            raise ConfigurationError("csda_explicit needs an energy interval starting at 0")
        psi = solve_csda_explicit(built.domain, ph["a"], ph["sigma"], built.f, built.g,
                                  interval[1], ray)
        return psi, {"method": method}
    rep = neumann_solve(built.domain, built.model, built.f, built.g, interval, built.solver,
                        residual_probes=residual_probes, seed=seed)
    return rep.solution, dict(rep.to_dict(), method=method)


def _norm_rows(built, psi_values, resolution):
    grid = built.grid
    rows = [{"quantity": "l2", "order_or_weight": "0,0,0", "resolution": resolution,
             "value": l2_norm(psi_values, grid)}]
    if built.reference is not None:
        ref = grid.evaluate(built.reference)
        rows.append({"quantity": "error_l2", "order_or_weight": "0,0,0", "resolution": resolution,
                     "value": l2_norm(psi_values - ref, grid)})
    if built.tree["norms"]["trace"]:
        bg = BoundaryGrid.build(built.domain, (16, 8), (8, 4), len(grid.energies),
                                grid.interval, grid.energy_rule)
        g = built.g
        val = 0.0 if g.constant == 0.0 else trace_norm(g, bg)
        rows.append({"quantity": "trace_inflow", "order_or_weight": "unit",
                     "resolution": resolution, "value": val})
    for orders in built.tree["norms"]["orders"]:
        interp = grid_interpolant(grid, psi_values)
        est = sobolev_norm_estimate(interp, grid, tuple(orders))
        rows.append({"quantity": "sobolev", "order_or_weight": ",".join(map(str, orders)),
                     "resolution": resolution, "value": est.norm})
    return rows


def _run_one(tree, resolution=None, panels_scale=1):
    if panels_scale != 1:
        tree = dict(tree, solver=dict(tree["solver"],
                                      ray_panels=tree["solver"]["ray_panels"] * panels_scale))
    built = build(tree, resolution)
    psi, report = _solve(built)
    values = built.grid.evaluate(psi)
    if not np.all(np.isfinite(values)):
        raise DataError("solution has non-finite values on the output grid")
    if built.reference is not None:
        report["max_abs_error"] = float(np.max(np.abs(values - built.grid.evaluate(built.reference))))
    return built, values, report


def cmd_solve(args):
    tree = load_scenario(args.config)
    out = _out_dir(tree["output"]["dir"])
    built, values, report = _run_one(tree)
    write_pfield(out / "solution.pfield", built.grid, values, name=tree["name"],
                 provenance={"scenario": tree["name"], "method": tree["solver"]["method"]})
    _dump_json(out / "report.json", report)
    rows = _norm_rows(built, values, built.grid.resolution)
    (out / "norms.csv").write_text(norms_csv(rows), encoding="utf-8", newline="")
    (out / "scenario.toml").write_text(dumps_scenario(tree), encoding="utf-8")
    return EXIT_OK


def cmd_sweep(args):
    tree = load_scenario(args.config)
    out = _out_dir(tree["output"]["dir"])
    res = [int(r) for r in args.resolutions.split(",")]
    if not res or min(res) < 2:
        raise ConfigurationError("resolutions must be integers >= 2")
    rows, reports = [], []
    for n in res:
        # characteristic quadrature refines with the grid
        built, values, report = _run_one(tree, n, panels_scale=max(1, n // res[0]))
        rows += _norm_rows(built, values, n)
        reports.append(dict(report, resolution=n))
    (out / "norms.csv").write_text(norms_csv(rows), encoding="utf-8", newline="")
    _dump_json(out / "sweep.json", {"reports": reports})
    return EXIT_OK


def cmd_norms(args):
    grid, values, _ = read_pfield(args.field)
    try:
        orders = tuple(int(v) for v in args.orders.split(","))
    except ValueError as exc:
        raise ConfigurationError("orders must be three integers m1,m2,m3") from exc
    if len(orders) != 3 or min(orders) < 0:
        raise ConfigurationError("orders must be three nonnegative integers m1,m2,m3")
    interp = grid_interpolant(grid, values)
    est = sobolev_norm_estimate(interp, grid, orders)
    rows = [{"quantity": "l2", "order_or_weight": "0,0,0", "resolution": grid.resolution,
             "value": l2_norm(values, grid)},
            {"quantity": "sobolev", "order_or_weight": args.orders, "resolution": grid.resolution,
             "value": est.norm}]
    text = norms_csv(rows)
    sys.stdout.write(text)
    if args.out or os.environ.get("TRANSPORT_OUT"):
        (_out_dir(args.out or ".") / "norms.csv").write_text(text, encoding="utf-8", newline="")
    return EXIT_OK


def cmd_verify(args):
    rows = run_suite(args.suite, args.seed)
    text = report_json(rows, args.suite, args.seed)
    sys.stdout.write(text)
    if args.out or os.environ.get("TRANSPORT_OUT"):
        (_out_dir(args.out or ".") / f"verify_{args.suite}.json").write_text(text, encoding="utf-8")
    return EXIT_OK if all(r["status"] == "pass" for r in rows) else EXIT_VERIFY


def parser():
    p = argparse.ArgumentParser(prog="csda-transport", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="worker cap for grid evaluation")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", help="solve one scenario")
    s.add_argument("config")
    s.set_defaults(func=cmd_solve)
    v = sub.add_parser("verify", help="run a verification suite")
    v.add_argument("--suite", choices=SUITES + ("all",), default="all")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_verify)
    n = sub.add_parser("norms", help="norms of a stored field")
    n.add_argument("--field", required=True)
    n.add_argument("--orders", default="1,0,0")
    n.add_argument("--out", default=None)
    n.set_defaults(func=cmd_norms)
    w = sub.add_parser("sweep", help="solve a scenario at several resolutions")
    w.add_argument("config")
    w.add_argument("--resolutions", required=True)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = parser().parse_args(argv)
    if args.threads < 1:
        sys.stderr.write("error: --threads must be at least 1\n")
        return EXIT_CONFIG
    set_threads(args.threads)
    try:
        return args.func(args)
    except (ConfigurationError, DataError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG
    except (ConvergenceError, NonContractionError) as exc:
        partial = exc.payload.get("report")
        if partial is not None:
            sys.stderr.write(json.dumps(partial.to_dict(), sort_keys=True) + "\n")
        sys.stderr.write(f"solver error: {exc}\n")
        return EXIT_SOLVER
    except TransportError as exc:
        sys.stderr.write(f"solver error: {exc}\n")
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
