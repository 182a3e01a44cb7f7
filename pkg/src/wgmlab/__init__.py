"""Towers, couplings and decay-of-correlation experiments for induced weak
Gibbs Markov maps."""

__version__ = "0.1.0"

from .errors import (ConvergenceError, HypothesisFailure, InsufficientResolution,  # noqa: E402
                     ModelError, NoSignal, NumericalFault, OutOfRange, TruncationError,
                     UnsupportedOperation, WGMError)
from .kernels import BACKEND  # noqa: E402
from .symbolic import SymbolicModel, separation_time  # noqa: E402
from .tower import TowerModel, TowerPoint, build_tower, invariant_density  # noqa: E402
from .models import CATALOG, make_model, make_oracle  # noqa: E402
from .observables import Observable, make_observable, variation_v  # noqa: E402
from .coupling import (ProductModel, choose_n0, coupling_report, epsilon_sequence,  # noqa: E402
                       matching_bound, product_model, rate_envelope)
from .statistics import (clt_experiment, correlation_mc, exact_correlation,  # noqa: E402
                         fit_rate, ld_experiment)

__all__ = [
    "__version__", "BACKEND", "CATALOG", "ConvergenceError", "HypothesisFailure",
    "InsufficientResolution", "ModelError", "NoSignal", "NumericalFault", "Observable",
    "OutOfRange", "ProductModel", "SymbolicModel", "TowerModel", "TowerPoint",
    "TruncationError", "UnsupportedOperation", "WGMError", "build_tower", "choose_n0",
    "clt_experiment", "correlation_mc", "coupling_report", "epsilon_sequence",
    "exact_correlation", "fit_rate", "invariant_density", "ld_experiment", "make_model",
    "make_observable", "make_oracle", "matching_bound", "product_model", "rate_envelope",
    "separation_time", "variation_v",
]
