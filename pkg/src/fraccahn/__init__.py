"""Spectral simulation and estimate verification for a stochastic Cahn-Hilliard
equation driven by space-white, time-fractional noise (Hurst index H > 1/2)."""

__version__ = "0.1.0"
