"""dpgrad: DP-SGD with vectorized per-sample gradients and Renyi-DP accounting."""

from .accountant import (PrivacyBudget, RdpAccountant, get_noise_multiplier,
                         rdp_subsampled_gaussian, to_epsilon)
from .data import Dataset, PoissonLoader, PoissonSampler, load_csv, load_idx, uniform_batches
from .errors import (CalibrationError, ConfigError, DimensionError, DPGradError, IngestionError,
                     LifecycleError, NumericError, ParameterError, RegistryError)
from .grad_sample import (DEFAULT_REGISTRY, GradSampleModule, GradSampleRecord,
                          compute_grad_samples, microbatch_oracle, register_rule)
from .layers import LayerDescriptor, ModelGraph, loss_forward_backward, load_model
from .optimizer import (DPOptimizer, DpOptimizerConfig, LoaderConfig, NoiseSchedule, SGD,
                        PlainModule, clip_and_sum, add_noise, make_private)
from .tensor import RngStream
from .validator import ValidationError, Violation, suggest_fix, validate

__all__ = [
    "PrivacyBudget", "RdpAccountant", "get_noise_multiplier", "rdp_subsampled_gaussian",
    "to_epsilon", "Dataset", "PoissonLoader", "PoissonSampler", "load_csv", "load_idx",
    "uniform_batches", "CalibrationError", "ConfigError", "DimensionError", "DPGradError",
    "IngestionError", "LifecycleError", "NumericError", "ParameterError", "RegistryError",
    "DEFAULT_REGISTRY", "GradSampleModule", "GradSampleRecord", "compute_grad_samples",
    "microbatch_oracle", "register_rule", "LayerDescriptor", "ModelGraph", "loss_forward_backward",
    "load_model", "DPOptimizer", "DpOptimizerConfig", "LoaderConfig", "NoiseSchedule", "SGD",
    "PlainModule", "clip_and_sum", "add_noise", "make_private", "RngStream", "ValidationError",
    "Violation", "suggest_fix", "validate",
]

__version__ = "0.1.0"
