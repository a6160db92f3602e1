"""Dense complex linear-algebra kernels shared by every solver module.

Matrices are plain numpy arrays (complex128). Solves go through a Cholesky
factorization, never an explicit inverse. real_embed maps a Hermitian
quadratic form to an equivalent real symmetric one so the training loss can
stay in real arithmetic.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .config import TOL


class NotPositiveDefinite(Exception):
    """Hermitian solve met a pivot at or below the rejection threshold."""


class NotHermitian(Exception):
    """real_embed received a matrix that is not Hermitian within tolerance."""


class NoConvergence(Exception):
    """Power iteration did not meet its residual target within the cap."""


def hermitian_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve A X = B for Hermitian positive definite A.

    B may be a vector or a matrix of right-hand sides. Pivots are the
    squared Cholesky diagonal; any pivot <= pd_pivot_ratio * max diag(A)
    raises NotPositiveDefinite.
    """
    A = np.asarray(A)
    B = np.asarray(B)
    try:
        c, low = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    pivots = np.real(np.diagonal(c)) ** 2
    if pivots.min() <= TOL.pd_pivot_ratio * np.real(np.diagonal(A)).max():
        raise NotPositiveDefinite(
            f"pivot {pivots.min():.3e} under {TOL.pd_pivot_ratio:g} * max diagonal"
        )
    return scipy.linalg.cho_solve((c, low), B, check_finite=False)


def dominant_eigenvalue(A: np.ndarray, tol: float = TOL.power_iter_tol,
                        max_iter: int = TOL.power_iter_cap) -> float:
    """Largest eigenvalue of a Hermitian PSD matrix by power iteration.

    Starts from the normalized all-ones vector so runs are reproducible.
    Stops when the residual ||Av - lam*v|| <= tol * lam, which bounds the
    distance from lam to the nearest eigenvalue. Raises NoConvergence after
    max_iter sweeps.
    """
    A = np.asarray(A)
    n = A.shape[0]
    v = np.full(n, 1.0 / np.sqrt(n), dtype=A.dtype)
    for _ in range(max_iter):
        w = A @ v
        lam = float(np.real(np.vdot(v, w)))
        if np.linalg.norm(w - lam * v) <= tol * abs(lam):
            return lam
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return 0.0
        v = w / norm_w
    raise NoConvergence(f"power iteration: no convergence in {max_iter} sweeps")


def frobenius_norm(A: np.ndarray) -> float:
    """sqrt(sum |a_ij|^2)."""
    return float(np.linalg.norm(np.asarray(A)))


def real_embed(A: np.ndarray) -> np.ndarray:
    """Real symmetric embedding M = [[Re A, -Im A], [Im A, Re A]].

    For Hermitian A and x = [Re v; Im v], x^T M x equals v^H A v, which lets
    the quadratic objective run through real-valued autodiff. Raises
    NotHermitian when A deviates from A^H beyond tolerance.
    """
    A = np.asarray(A)
    dev = np.linalg.norm(A - A.conj().T)
    if dev > TOL.hermitian_sym * (1.0 + np.linalg.norm(A)):
        raise NotHermitian(f"deviation {dev:.3e} from Hermitian symmetry")
    re, im = A.real, A.imag
    return np.block([[re, -im], [im, re]])
