"""Denoised randomized smoothing with timestep-corrected one-step diffusion denoisers."""

__version__ = "0.1.0"

ABSTAIN = -1
