"""Layered video diffusion toolkit: packing, text conditioning, a small DiT
denoiser with gated LoRA, staged training, synthetic data and metrics."""

__version__ = "0.1.0"
