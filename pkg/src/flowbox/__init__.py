"""Flowbox coordinates, Koopman eigenfunctions, and unit-velocity
measurements for smooth finite-dimensional vector fields.

Two constructions are provided and cross-checked against closed forms:
orbit tracing back to a non-recurrent surface (`chart`) and a variational
fit of the coordinate functions on a grid (`varfit`).
"""

__version__ = "0.1.0"

from .dynsys import (  # noqa: E402
    OutOfDomainError,
    VectorField,
    builtin,
    builtin_names,
    parse_system,
    system_from_json,
    system_to_json,
)
from .expressions import DomainError, ExpressionError, parse_expression
from .odeint import (
    DEFAULT_CONFIG,
    CrossingEvent,
    DomainExit,
    IntegrationError,
    IntegratorConfig,
    Orbit,
    StepLimitExceeded,
    find_crossings,
    flow,
    trace_orbit,
)
from .chart import (
    AmbiguousChart,
    Chart,
    ChartError,
    NonRecurrenceReport,
    NotInOmega,
    OffPatch,
    Surface,
    TransversalityError,
    build_chart,
    builtin_surface,
    builtin_surface_names,
    check_nonrecurrent,
    check_transversal,
    circle_surface,
    conservation_residual,
    evaluate_grid,
    evaluate_h,
    evaluate_m,
    flowbox,
    line_surface,
    point_surface,
    surface_from_json,
)
from .kef import (
    KoopmanEigenfunction,
    MinimalSet,
    build_kef,
    koopman_advance,
    kpde_residual,
    minimal_set,
    orbit_eigen_check,
)
from .varfit import (
    FitConfig,
    FitResult,
    GridField,
    fit,
    load_grid,
    loss,
    loss_gradient,
    rotate_to_flowbox,
    save_grid,
)
from .refsol import (
    ReferenceEigenfunction,
    ReferenceSolution,
    evaluate_reference_flowbox,
    reference,
    reference_ids,
)

__all__ = [
    "__version__",
    "AmbiguousChart",
    "Chart",
    "ChartError",
    "CrossingEvent",
    "DEFAULT_CONFIG",
    "DomainError",
    "DomainExit",
    "ExpressionError",
    "FitConfig",
    "FitResult",
    "GridField",
    "IntegrationError",
    "IntegratorConfig",
    "KoopmanEigenfunction",
    "MinimalSet",
    "NonRecurrenceReport",
    "NotInOmega",
    "OffPatch",
    "Orbit",
    "OutOfDomainError",
    "ReferenceEigenfunction",
    "ReferenceSolution",
    "StepLimitExceeded",
    "Surface",
    "TransversalityError",
    "VectorField",
    "build_chart",
    "build_kef",
    "builtin",
    "builtin_names",
    "builtin_surface",
    "builtin_surface_names",
    "check_nonrecurrent",
    "check_transversal",
    "circle_surface",
    "conservation_residual",
    "evaluate_grid",
    "evaluate_h",
    "evaluate_m",
    "evaluate_reference_flowbox",
    "find_crossings",
    "fit",
    "flow",
    "flowbox",
    "koopman_advance",
    "kpde_residual",
    "line_surface",
    "load_grid",
    "loss",
    "loss_gradient",
    "minimal_set",
    "orbit_eigen_check",
    "parse_expression",
    "parse_system",
    "point_surface",
    "reference",
    "reference_ids",
    "rotate_to_flowbox",
    "save_grid",
    "surface_from_json",
    "system_from_json",
    "system_to_json",
    "trace_orbit",
]
