"""Text-guided image colorization over a pluggable latent-diffusion backend."""

__version__ = "0.1.0"
