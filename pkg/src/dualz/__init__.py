"""Dual-focal-plane axial localization of nanoparticles with a CNN regressor."""
__version__ = "0.1.0"
