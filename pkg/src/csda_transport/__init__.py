"""Linear transport with continuous slowing down: solvers and regularity diagnostics."""
from .errors import *  # noqa: F401,F403
from .geometry import Ball, ConvexDomain, Ellipsoid, ImplicitDomain, SphereChart, boundary_quadrature
from .phase_fields import (BoundaryField, BoundaryGrid, PhaseField, PhaseGrid, as_field,
                           fubini_check, grid_interpolant, inner, l2_norm, moment, set_threads,
                           trace_norm)
from .physics import (CollisionModel, Kernel, apply_collision, coercivity_margin, constant_kernel,
                      range_map, rutherford_kernel, schur_bounds)
from .probes import ProbeReport, verdict
from .solvers import (RayQuadrature, SolveReport, SolverConfig, apply_transport_operator,
                      assemble_fbar, lift_inflow, neumann_solve, p_inverse, solve_conv_scatter,
                      solve_csda_explicit)
from .sobolev import fractional_seminorm, sobolev_norm_estimate, sobolev_probe
from .diagnostics import (compatibility_check, conormal_probe, derivative_decomposition,
                          lemma_conv_integral, tangential_fields_ball, weight_m)

__version__ = "0.1.0"
