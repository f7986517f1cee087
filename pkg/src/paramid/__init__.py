"""Learning disentangled dynamical-system parameters from raw trajectories."""

__version__ = "0.1.0"
