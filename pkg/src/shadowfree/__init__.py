"""Mask-free shadow removal: ConvNext U-Net + DWT-FFC removal net and a Fourier-attention refiner."""

__version__ = "0.1.0"
