"""Multiscale finite element laboratory: intrusive and non-intrusive MsFEM in 2D."""

from msfemlab.fem import CoefficientField, FeFunction, SourceField
from msfemlab.mesh import build_global_fine, build_structured_coarse, refine_element
from msfemlab.offline import run_offline
from msfemlab.solvers import (
    solve_msfem_galerkin,
    solve_msfem_pg,
    solve_nonintrusive,
    solve_reference,
)

__version__ = "0.1.0"
