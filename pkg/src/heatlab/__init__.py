"""Heat-kernel embeddings, distortion and map energies on sampled spaces."""

__version__ = "0.1.0"

from .embed import (  # noqa: E402
    DimensionConstants,
    SymTensorField,
    TruncationError,
    bilipschitz_report,
    choose_truncation,
    distortion_field,
    distortion_norm,
    embedding_coords,
    heat_kernel,
    pullback_metric,
    smoothable_set,
)
from .harmonic import (  # noqa: E402
    SphereMap,
    eigenmap,
    el_residual,
    harmonic_flow,
    sphere_energy,
    takahashi_check,
)
from .ks import ks_compare, ks_density, ks_energy  # noqa: E402
from .maps import (  # noqa: E402
    PointMap,
    analytic_map,
    compose_eigenfunction,
    lambda_energy_density,
    normalized_energy,
    t_energy,
    tensor_norms,
    upper_gradient_estimate,
)
from .space import SpectralSpace, ball_query, build_from_mesh, build_model_space  # noqa: E402


__all__ = [
    "__version__",
    "analytic_map",
    "ball_query",
    "bilipschitz_report",
    "build_from_mesh",
    "build_model_space",
    "choose_truncation",
    "compose_eigenfunction",
    "DimensionConstants",
    "distortion_field",
    "distortion_norm",
    "eigenmap",
    "el_residual",
    "embedding_coords",
    "harmonic_flow",
    "heat_kernel",
    "ks_compare",
    "ks_density",
    "ks_energy",
    "lambda_energy_density",
    "normalized_energy",
    "PointMap",
    "pullback_metric",
    "smoothable_set",
    "SpectralSpace",
    "sphere_energy",
    "SphereMap",
    "SymTensorField",
    "t_energy",
    "takahashi_check",
    "tensor_norms",
    "TruncationError",
    "upper_gradient_estimate",
]
