"""Meshless evolution of point-cloud surfaces with Fokker-Planck point redistribution.

Points on a closed surface are advanced with a prescribed velocity plus an
artificial tangential term ``-eta grad(s)``, where ``s`` is the log of the
point density. Surface operators come from moving least squares fits on
k-nearest-neighbor stencils; time stepping uses BDF1-3.
"""

__version__ = "0.1.0"

from .estimators import (
    DensityEstimator,
    MeanCurvatureFlow,
    SurfaceEvolver,
    TargetRedistributor,
    UniformRedistributor,
)
from .exceptions import (
    ConfigurationError,
    DegenerateGeometryError,
    FpflowError,
    NonConvergenceError,
    ParseError,
    SolverError,
)
from .geometry import PointCloud, SurfaceSpec, area_elements, build_neighborhoods, sample_surface
from .integration import OperatorFactory, SolverState, bdf_coefficients, evolve
from .io import load_cloud, save_cloud
from .mcf import McfConfig, run_mcf
from .mls import SurfaceOperators, assemble_operators
from .redistribution import (
    RedistributionConfig,
    kl_divergence,
    redistribute_target,
    redistribute_uniform,
    spread_metric,
)
from .velocity import make_target, make_velocity

__all__ = [
    "ConfigurationError",
    "DegenerateGeometryError",
    "DensityEstimator",
    "FpflowError",
    "McfConfig",
    "MeanCurvatureFlow",
    "NonConvergenceError",
    "OperatorFactory",
    "ParseError",
    "PointCloud",
    "RedistributionConfig",
    "SolverError",
    "SolverState",
    "SurfaceEvolver",
    "SurfaceOperators",
    "SurfaceSpec",
    "TargetRedistributor",
    "UniformRedistributor",
    "area_elements",
    "assemble_operators",
    "bdf_coefficients",
    "build_neighborhoods",
    "evolve",
    "kl_divergence",
    "load_cloud",
    "make_target",
    "make_velocity",
    "redistribute_target",
    "redistribute_uniform",
    "run_mcf",
    "sample_surface",
    "save_cloud",
    "spread_metric",
]
