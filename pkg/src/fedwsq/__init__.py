"""Federated learning simulator: weight-standardized gradient filtering plus
distribution-aware non-uniform quantization of model-parameter updates."""

__version__ = "0.1.0"
