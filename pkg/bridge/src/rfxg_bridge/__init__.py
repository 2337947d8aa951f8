"""Torch-backed scorer bridge for RFXG-NET checkpoints."""

__version__ = "0.1.0"
