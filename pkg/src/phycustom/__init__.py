"""Physical-concept customization of a tiny text-conditioned diffusion model."""

__version__ = "0.1.0"
