"""Uncertainty-aware monocular localization against sparse semantic maps."""

__version__ = "0.1.0"
