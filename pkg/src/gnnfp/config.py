"""Centralized numeric tolerances and iteration caps.

Single source of truth: solver modules and tests import TOL rather than
scattering literals.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    # Hermitian solves: reject pivots at or below this fraction of the
    # largest diagonal entry.
    pd_pivot_ratio: float = 1e-14
    # relative Frobenius residual guaranteed by hermitian_solve
    solve_residual: float = 1e-10
    # hermiticity check for real_embed, relative to 1 + ||A||_F
    hermitian_sym: float = 1e-12
    # power iteration defaults
    power_iter_tol: float = 1e-8
    power_iter_cap: int = 500
    # lambda bisection: relative power mismatch target and the floor on the
    # bracket width below which we stop regardless
    bisection_power: float = 1e-9
    bisection_interval: float = 1e-12
    # bisection upper bracket growth limit before NumericalFailure
    lambda_hi_cap: float = 1e18
    # per-cell power feasibility slack allowed after any solver step
    feasibility: float = 1e-9
    # WSR monotonicity slack for the classical FP trace
    monotone_wsr: float = 1e-9
    # epsilon inside the differentiable power projection
    projection_eps: float = 1e-12


TOL = Tolerances()
