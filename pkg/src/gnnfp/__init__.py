"""Weighted sum-rate beamforming solvers for multi-cell MU-MIMO downlink.

Classical fractional-programming and FastFP iterations, plus a graph neural
network that replaces the per-cell beamforming update after reformulating it
as a ball-constrained quadratic program. The cli module exposes dataset
generation, training, and benchmarking commands.
"""

__version__ = "0.1.0"
