"""Parameter recovery for depth-2 ReLU networks under Gaussian inputs.

The package estimates Hermite coefficient tensors from samples, decomposes
them with Jennrich's algorithm to find the hidden directions, solves for
the output weights and biases, and finishes with a truncated least-squares
fit that is rewritten as a small ReLU network.
"""

from .errors import (ConditioningError, ConfigError, DecompositionUnstableError, DegenerateSpectrumError,
                     DegenerateTruncationError, DomainError, NotRank1Error, RecoveryError, ResourceError,
                     StageError)
from .network import Dataset, ReluNetwork, exact_coefficients, exact_hermite_coeff, random_network, sample
from .recover import RecoveredUnit, RecoveryConfig, recover_units, run_algorithm1

__version__ = "0.1.0"

__all__ = [
    "ConditioningError", "ConfigError", "Dataset", "DecompositionUnstableError", "DegenerateSpectrumError",
    "DegenerateTruncationError", "DomainError", "NotRank1Error", "RecoveredUnit", "RecoveryConfig",
    "RecoveryError", "ReluNetwork", "ResourceError", "StageError", "exact_coefficients",
    "exact_hermite_coeff", "random_network", "recover_units", "run_algorithm1", "sample",
]
