"""Multi-scale attention CNN for sleep staging, with a small numpy autodiff core."""
from .errors import ConfigurationError, DataError, InvariantError, MsaCnnError, UsageError
from .model import ModelConfig, MsaCnnModel, apply_variant, build, flop_estimate, make_config, param_count

__all__ = [
    "ConfigurationError", "DataError", "InvariantError", "MsaCnnError", "UsageError",
    "ModelConfig", "MsaCnnModel", "apply_variant", "build", "flop_estimate", "make_config", "param_count",
]
