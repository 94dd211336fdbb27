"""Bilinear reaction-coefficient control of semilinear elliptic PDEs.

P1 finite elements on triangulated convex polygons, a Dirac-sourced adjoint
for pointwise tracking functionals, exact discrete reduced derivatives, and
a projected-gradient optimizer with box constraints. See README.md for the
CLI and the acceptance suite.
"""

from ._kernels import BACKEND as kernel_backend
from .control import (
    ControlProblem,
    OptimizerConfig,
    ReducedCost,
    optimize,
    projected_gradient_solve,
)
from .geometry import Mesh, build_structured_mesh
from .pde import TrackingData, make_nonlinearity

__version__ = "0.1.0"

__all__ = [
    "kernel_backend",
    "Mesh",
    "build_structured_mesh",
    "TrackingData",
    "make_nonlinearity",
    "ControlProblem",
    "OptimizerConfig",
    "ReducedCost",
    "optimize",
    "projected_gradient_solve",
    "__version__",
]
