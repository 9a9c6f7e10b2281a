"""Susceptibility distortion simulation, correction and evaluation for
spinal-cord diffusion EPI."""

__version__ = "0.1.0"
