"""Kinetic boundary layers of steady neutron transport in convex planar domains.

The package is organized around one pipeline:

- :mod:`kinlayer.geometry` — strictly convex boundaries, boundary-layer
  coordinates (mu, tau, phi), and the grazing-set geometry.
- :mod:`kinlayer.discretization` — graded eta grids, clustered phi grids,
  discrete ordinates, and polar interior meshes.
- :mod:`kinlayer.milne` — the half-space kinetic layer equation with
  geometric correction, solved in mild form by exact-mass characteristic
  quadrature.
- :mod:`kinlayer.decomposition` — splitting a boundary datum into a
  regular part and a grazing-supported singular part.
- :mod:`kinlayer.expansion` — interior Laplace solves and layer families
  assembled into the order-2 approximate solution.
- :mod:`kinlayer.transport2d` — the full kinetic transport solver used as
  the reference the expansion is checked against.
- :mod:`kinlayer.norms` — phase-space and boundary norms, remainder
  assembly, and the vanishing-epsilon convergence study.
- :mod:`kinlayer.cli` — command-line entry points writing the file
  artifacts.
"""

from .config import RunConfig, load_config
from .decomposition import DecomposedDatum, decompose
from .discretization import (
    EtaGrid,
    Ordinates,
    PhiGrid,
    SpatialMesh,
    angular_average,
    make_eta_grid,
    make_mesh,
    make_ordinates,
    make_phi_grid,
)
from .errors import (
    ConfigError,
    DegenerateDatumError,
    EnergyOutOfRangeError,
    IllConditionedError,
    KinlayerError,
    NoConvergenceError,
    NonConvexBoundaryError,
    NonzeroRHSError,
    PointOutsideTubeError,
    SignViolationError,
    UnresolvedRunError,
)
from .expansion import ExpansionBundle, HarmonicField, build_expansion
from .geometry import (
    BoundaryLayerCoords,
    ConvexBoundary,
    to_boundary_layer,
    to_boundary_layer_batch,
)
from .milne import MilneProblem, MilneSolution, solve_milne
from .norms import (
    ConvergenceStudy,
    NormReport,
    RemainderBundle,
    apriori_check,
    assemble_remainder,
    boundary_norm,
    convergence_study,
    fit_order,
    norm_report,
    phase_norm,
)
from .transport2d import PhaseField, solve_transport

__version__ = "1.0.0"

__all__ = [
    "ConfigError",
    "ConvergenceStudy",
    "ConvexBoundary",
    "DecomposedDatum",
    "DegenerateDatumError",
    "EnergyOutOfRangeError",
    "EtaGrid",
    "ExpansionBundle",
    "HarmonicField",
    "IllConditionedError",
    "KinlayerError",
    "MilneProblem",
    "MilneSolution",
    "NoConvergenceError",
    "NonConvexBoundaryError",
    "NonzeroRHSError",
    "NormReport",
    "Ordinates",
    "PhaseField",
    "PhiGrid",
    "PointOutsideTubeError",
    "RemainderBundle",
    "RunConfig",
    "SignViolationError",
    "SpatialMesh",
    "UnresolvedRunError",
    "BoundaryLayerCoords",
    "angular_average",
    "apriori_check",
    "assemble_remainder",
    "boundary_norm",
    "build_expansion",
    "convergence_study",
    "decompose",
    "fit_order",
    "grazing_indicator",
    "load_config",
    "make_eta_grid",
    "make_mesh",
    "make_ordinates",
    "make_phi_grid",
    "norm_report",
    "phase_norm",
    "solve_milne",
    "solve_transport",
    "to_boundary_layer",
    "to_boundary_layer_batch",
    "__version__",
]
