"""Dataset distillation through kernel ridge regression on random-feature NNGP kernels."""

__version__ = "0.1.0"

from .distill import Coreset, DistillConfig, distill_run, distill_step, evaluate_coreset, init_coreset
from .errors import ConfigError, DataError, NumericError, RfadError
from .kernels import EmpiricalKernel, ExactFCKernel, exact_nngp_fc, exact_ntk_fc, gram, random_feature_map
from .networks import NetworkSpec, sample_ensemble, sample_network

__all__ = [
    "Coreset", "DistillConfig", "distill_run", "distill_step", "evaluate_coreset", "init_coreset",
    "ConfigError", "DataError", "NumericError", "RfadError",
    "EmpiricalKernel", "ExactFCKernel", "exact_nngp_fc", "exact_ntk_fc", "gram", "random_feature_map",
    "NetworkSpec", "sample_ensemble", "sample_network",
]
