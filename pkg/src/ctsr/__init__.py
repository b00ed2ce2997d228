"""Text-guided, side-controlled latent diffusion for blind CT super-resolution (desk scale)."""

__version__ = "0.1.0"
