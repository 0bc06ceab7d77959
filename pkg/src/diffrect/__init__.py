"""Semi-supervised segmentation with latent-diffusion pseudo-label rectification."""

from diffrect.errors import ContractError

__version__ = "0.1.0"

__all__ = ["ContractError", "__version__"]
