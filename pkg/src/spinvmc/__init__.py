"""Variational Monte Carlo for spinful fermions with an attention ansatz."""

from . import perf as _perf

_perf.set_blas_threads_from_env()  # before numpy loads anywhere below

from .state import (
    AmplitudeBatch,
    AmplitudeDegenerateError,
    Cell,
    DerivativeBatch,
    DerivativeBundle,
    LogAmplitude,
    ParticleConfiguration,
)
from .network import (
    ModelGeometry,
    TransformerWavefunction,
    eval_log_psi,
    eval_param_gradient,
    eval_spatial_derivatives,
    featurize,
    flatten_params,
    init_params,
    unflatten_params,
)

__version__ = "0.1.0"

__all__ = [
    "AmplitudeBatch",
    "AmplitudeDegenerateError",
    "Cell",
    "DerivativeBatch",
    "DerivativeBundle",
    "LogAmplitude",
    "ModelGeometry",
    "ParticleConfiguration",
    "TransformerWavefunction",
    "eval_log_psi",
    "eval_param_gradient",
    "eval_spatial_derivatives",
    "featurize",
    "flatten_params",
    "init_params",
    "unflatten_params",
    "__version__",
]
