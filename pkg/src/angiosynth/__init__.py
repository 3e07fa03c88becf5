"""Tree state-space latent diffusion for angiography synthesis on vascular phantoms."""

__version__ = "0.1.0"
