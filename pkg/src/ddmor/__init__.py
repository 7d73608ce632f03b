"""Coupled network / drift-diffusion simulation with POD model reduction."""

__version__ = "0.1.0"
