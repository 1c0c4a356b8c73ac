"""Two-stage generative clustering: a hierarchical VAE over a learnable
binary latent tree, refined by a cluster-conditioned denoising diffusion
model, with the metrics needed to evaluate both stages."""

__version__ = "0.1.0"

from .config import ExperimentConfig, Rng, load_config, seed_all
from .errors import (
    CapacityError,
    CompatibilityError,
    ConfigError,
    FormatError,
    IntegrityError,
    NumericError,
    TreediffError,
    ValidationError,
)

__all__ = [
    "CapacityError",
    "CompatibilityError",
    "ConfigError",
    "ExperimentConfig",
    "FormatError",
    "IntegrityError",
    "NumericError",
    "Rng",
    "TreediffError",
    "ValidationError",
    "load_config",
    "seed_all",
    "__version__",
]
