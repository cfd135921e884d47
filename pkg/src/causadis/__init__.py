"""Disentangling stellar signal from instrument systematics, at desk scale.

Pipeline: simulate star/instrument light-curve triplets, train a
dual-latent contrastive autoencoder, and probe the frozen latents on
few-shot regression of the primary stellar parameter.
"""

__version__ = "0.1.0"

from .errors import CausadisError, ConfigError, DataError, FormatError, NumericError

__all__ = [
    "CausadisError",
    "ConfigError",
    "DataError",
    "FormatError",
    "NumericError",
    "__version__",
]
