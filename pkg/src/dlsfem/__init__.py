"""Discrete least-squares finite elements on uniform quadrilateral meshes.

The library discretizes both a variational boundary-value problem and the
Riesz map of its test space, producing an overdetermined rectangular
system and its Hermitian normal equation.  Both are solved directly (QR
vs. Cholesky) so their conditioning and round-off behavior can be compared
experiment by experiment.
"""

from .assembly import (
    Options,
    assemble_ne,
    assemble_overdetermined,
    build_context,
    precondition_global,
    precondition_global_rect,
)
from .basis import gauss_rule
from .formulation import make_case, make_formulation
from .mesh import build_layout, uniform_mesh
from .solve import error_norms, residual_rho, solve_ls, solve_ne

__all__ = [
    "Options",
    "assemble_ne",
    "assemble_overdetermined",
    "build_context",
    "build_layout",
    "error_norms",
    "gauss_rule",
    "make_case",
    "make_formulation",
    "precondition_global",
    "precondition_global_rect",
    "residual_rho",
    "solve_ls",
    "solve_ne",
    "uniform_mesh",
]

__version__ = "0.1.0"
