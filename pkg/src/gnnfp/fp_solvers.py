"""Rate evaluation and the two iterative beamforming solvers.

Both algorithms alternate closed-form auxiliary updates (receive filters y,
SINR surrogates gamma) with a per-cell beamforming step. The classical
variant solves each cell's quadratic program exactly by bisection on the
power multiplier; the fast variant takes one projected ascent step whose
stepsize comes from a bound on the quadratic term.

Channel tensors arrive noise-normalized (sigma^2 = 1 throughout).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .channel import NetworkInstance
from .config import TOL
from .numerics import (NoConvergence, NotPositiveDefinite, dominant_eigenvalue,
                       frobenius_norm, hermitian_solve)


class NumericalFailure(Exception):
    """Bisection could not bracket a feasible power multiplier."""


@dataclass
class SolverTrace:
    """Per-iteration record; index 0 is the starting point."""

    wsr: list = field(default_factory=list)          # nats/s/Hz
    elapsed_s: list = field(default_factory=list)    # wall time per entry
    iterations: int = 0


def received_signals(inst: NetworkInstance, v: np.ndarray) -> np.ndarray:
    """s[l,q,i,j] = H[l,q,i] @ v[i,j]: signal of beam (i,j) at user (l,q)."""
    return np.einsum("lqinm,ijm->lqijn", inst.H, v)


def _signal_covariances(inst: NetworkInstance, v: np.ndarray):
    """Per-user total covariance F = sigma^2 I + sum_ij s s^H, plus signals."""
    s = received_signals(inst, v)
    f = np.einsum("lqijn,lqijm->lqnm", s, s.conj())
    f += np.eye(inst.config.Nr)
    return s, f


def interference_covariance(inst: NetworkInstance, v: np.ndarray,
                            l: int, q: int) -> np.ndarray:
    """Noise plus every received beam except the user's own."""
    s, f = _signal_covariances(inst, v)
    own = s[l, q, l, q]
    return f[l, q] - np.outer(own, own.conj())


def user_rate(inst: NetworkInstance, v: np.ndarray, l: int, q: int) -> float:
    """log(1 + v^H H^H C^-1 H v) in nats."""
    s, f = _signal_covariances(inst, v)
    own = s[l, q, l, q]
    c = f[l, q] - np.outer(own, own.conj())
    return float(np.log1p(max(0.0, np.real(own.conj() @ hermitian_solve(c, own)))))


def weighted_sum_rate(inst: NetworkInstance, v: np.ndarray) -> float:
    s, f = _signal_covariances(inst, v)
    w = inst.config.weight_array()
    total = 0.0
    for l in range(inst.config.L):
        for q in range(inst.config.Q):
            own = s[l, q, l, q]
            c = f[l, q] - np.outer(own, own.conj())
            sinr = max(0.0, np.real(own.conj() @ hermitian_solve(c, own)))
            total += w[l, q] * np.log1p(sinr)
    return float(total)


def update_y(inst: NetworkInstance, v: np.ndarray) -> np.ndarray:
    """Optimal receive filters: y = (sigma^2 I + sum_ij s s^H)^-1 s_own."""
    s, f = _signal_covariances(inst, v)
    L, Q, Nr = inst.config.L, inst.config.Q, inst.config.Nr
    y = np.empty((L, Q, Nr), dtype=complex)
    for l in range(L):
        for q in range(Q):
            y[l, q] = hermitian_solve(f[l, q], s[l, q, l, q])
    return y


def update_gamma(inst: NetworkInstance, v: np.ndarray) -> np.ndarray:
    """Optimal SINR surrogates: gamma = v^H H^H C^-1 H v per user."""
    s, f = _signal_covariances(inst, v)
    L, Q = inst.config.L, inst.config.Q
    gamma = np.empty((L, Q))
    for l in range(L):
        for q in range(Q):
            own = s[l, q, l, q]
            c = f[l, q] - np.outer(own, own.conj())
            gamma[l, q] = max(0.0, np.real(own.conj() @ hermitian_solve(c, own)))
    return gamma


def build_D(inst: NetworkInstance, y: np.ndarray, gamma: np.ndarray,
            l: int) -> np.ndarray:
    """Quadratic term of cell l's subproblem:
    D_l = sum_ij w_ij (1+gamma_ij) H[i,j,l]^H y_ij y_ij^H H[i,j,l]."""
    w = inst.config.weight_array()
    z = np.einsum("ijnm,ijn->ijm", inst.H[:, :, l].conj(), y)
    return np.einsum("ij,ijm,ijk->mk", w * (1.0 + gamma), z, z.conj())


def build_b(inst: NetworkInstance, y: np.ndarray, gamma: np.ndarray,
            l: int) -> np.ndarray:
    """Linear terms of cell l's subproblem, one row per served user:
    b_q = w_q (1+gamma_q) H[l,q,l]^H y_q."""
    w = inst.config.weight_array()
    z = np.einsum("qnm,qn->qm", inst.H[l, :, l].conj(), y[l])
    return (w[l] * (1.0 + gamma[l]))[:, None] * z


@dataclass
class QPSolution:
    """Exact solution of min_v sum_q [v_q^H D v_q - 2 Re(b_q^H v_q)]
    subject to sum_q ||v_q||^2 <= P."""

    v: np.ndarray        # (Q, Nt)
    lam: float           # power multiplier at the solution
    power: float         # sum_q ||v_q||^2
    evaluations: int     # number of shifted solves performed


def _shifted_solve(D: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
    shifted = D + lam * np.eye(D.shape[0])
    return hermitian_solve(shifted, b.T).T


def solve_qp_bisection(D: np.ndarray, b: np.ndarray, P: float,
                       tol: float = TOL.bisection_power) -> QPSolution:
    """Per-cell beamforming update: v_q(lam) = (lam I + D)^-1 b_q with the
    smallest lam >= 0 meeting the power budget, found by bisection.

    Stops when the power mismatch is within tol*P or the bracket is
    narrower than the interval floor; always returns the feasible side.
    """
    b = np.atleast_2d(b)
    evaluations = 0

    # lam = 0 fast path: if the unconstrained optimum is feasible, done
    try:
        v0 = _shifted_solve(D, b, 0.0)
        evaluations += 1
        pw0 = float(np.sum(np.abs(v0) ** 2))
        if pw0 <= P:
            return QPSolution(v=v0, lam=0.0, power=pw0, evaluations=evaluations)
    except NotPositiveDefinite:
        pass  # D singular toward b: the budget constraint must bind

    lo = 0.0
    hi = 1.0
    while True:
        v_hi = _shifted_solve(D, b, hi)
        evaluations += 1
        pw_hi = float(np.sum(np.abs(v_hi) ** 2))
        if pw_hi <= P:
            break
        lo = hi
        hi *= 2.0
        if hi > TOL.lambda_hi_cap:
            raise NumericalFailure(f"no feasible multiplier below {TOL.lambda_hi_cap:g}")

    best_v, best_lam, best_pw = v_hi, hi, pw_hi

    def converged(lam, pw):
        # power mismatch within tolerance, and complementary slackness
        # lam*(pw - P) <= tol*P so the multiplier certificate holds too
        return abs(pw - P) <= tol * P and lam * abs(pw - P) <= tol * P

    while not converged(best_lam, best_pw) and (hi - lo) >= TOL.bisection_interval:
        mid = 0.5 * (lo + hi)
        v_mid = _shifted_solve(D, b, mid)
        evaluations += 1
        pw_mid = float(np.sum(np.abs(v_mid) ** 2))
        if pw_mid <= P:
            hi, best_v, best_lam, best_pw = mid, v_mid, mid, pw_mid
        else:
            lo = mid
    return QPSolution(v=best_v, lam=best_lam, power=best_pw, evaluations=evaluations)


def classical_fp(inst: NetworkInstance, v0: np.ndarray,
                 iters: int) -> tuple[np.ndarray, SolverTrace]:
    """Alternate y, gamma, and exact per-cell QP solves; the weighted
    sum-rate trace is non-decreasing up to solver tolerance."""
    cfg = inst.config
    v = v0.copy()
    trace = SolverTrace(wsr=[weighted_sum_rate(inst, v)], elapsed_s=[0.0],
                        iterations=iters)
    for _ in range(iters):
        t0 = time.perf_counter()
        y = update_y(inst, v)
        gamma = update_gamma(inst, v)
        for l in range(cfg.L):
            d = build_D(inst, y, gamma, l)
            b = build_b(inst, y, gamma, l)
            v[l] = solve_qp_bisection(d, b, cfg.max_tx_power_W).v
        elapsed = time.perf_counter() - t0
        trace.wsr.append(weighted_sum_rate(inst, v))
        trace.elapsed_s.append(elapsed)
    return v, trace


def ascent_step(t_cell: np.ndarray, D: np.ndarray, b: np.ndarray,
                delta: float, P: float) -> np.ndarray:
    """One projected ascent step for a cell: move each user's beam along
    (b_q - D t_q)/delta from the anchor t, then rescale the whole cell to
    the budget only if the raw step exceeds it."""
    vt = t_cell + (b - t_cell @ D.T) / delta
    pw = float(np.sum(np.abs(vt) ** 2))
    if pw > P:
        vt = vt * np.sqrt(P / pw)
    return vt


def cell_stepsize(D: np.ndarray, step_rule: str) -> float:
    """Stepsize denominator bounding D's spectrum by the chosen rule."""
    if step_rule == "eigen":
        # round the estimate up so delta never undershoots the true bound,
        # which would break the ascent guarantee
        delta = dominant_eigenvalue(D, tol=1e-6, max_iter=5000) * (1.0 + 5e-6)
    elif step_rule == "frobenius":
        delta = frobenius_norm(D)
    else:
        raise ValueError(f"unknown step_rule {step_rule!r}")
    return max(delta, 1e-30)


def fastfp(inst: NetworkInstance, v0: np.ndarray, iters: int,
           step_rule: str = "eigen") -> tuple[np.ndarray, SolverTrace]:
    """One projected ascent step per cell instead of the exact QP.

    The anchor t extrapolates along the last displacement with a momentum
    coefficient from the accelerated-gradient sequence theta_{k+1} =
    (1 + sqrt(1 + 4 theta_k^2))/2, xi_k = (theta_k - 1)/theta_{k+1}; the
    first step has xi = 0 and so starts from the previous beamformer. The
    stepsize denominator delta bounds D's spectrum via the chosen rule,
    which keeps the surrogate objective non-decreasing across the v-step
    for any anchor. A cell is rescaled to the budget only when the raw
    step exceeds it, so the iterates stay feasible even though the anchor
    itself may not be.
    """
    if step_rule not in ("eigen", "frobenius"):
        raise ValueError(f"unknown step_rule {step_rule!r}")
    cfg = inst.config
    P = cfg.max_tx_power_W
    v = v0.copy()
    v_prev = v0.copy()
    theta = 1.0
    trace = SolverTrace(wsr=[weighted_sum_rate(inst, v)], elapsed_s=[0.0],
                        iterations=iters)
    for _ in range(iters):
        t0 = time.perf_counter()
        theta_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta * theta))
        xi = (theta - 1.0) / theta_next
        theta = theta_next
        t = v + xi * (v - v_prev)
        y = update_y(inst, v)
        gamma = update_gamma(inst, v)
        v_prev = v.copy()
        for l in range(cfg.L):
            d = build_D(inst, y, gamma, l)
            b = build_b(inst, y, gamma, l)
            v[l] = ascent_step(t[l], d, b, cell_stepsize(d, step_rule), P)
        elapsed = time.perf_counter() - t0
        trace.wsr.append(weighted_sum_rate(inst, v))
        trace.elapsed_s.append(elapsed)
    return v, trace
