"""skipforge: desk-scale conditional diffusion with tappable U-Net skips."""

__version__ = "0.1.0"
