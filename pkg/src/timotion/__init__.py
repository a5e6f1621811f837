"""Two-person motion diffusion with causal interleaving, built on a small numpy autodiff."""

from .errors import ConfigurationError, DimensionError, FormatError, NumericError, TimotionError, UsageError

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DimensionError",
    "FormatError",
    "NumericError",
    "TimotionError",
    "UsageError",
    "__version__",
]
