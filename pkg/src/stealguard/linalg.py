"""Dense linear algebra for the surrogate-defense solvers.

Everything here is deterministic and operates on plain float64 numpy
arrays: Cholesky factorization/solves, a conjugate-gradient solver for
SPD systems, and the leftmost real generalized eigenpair of the
structured 2M x 2M pencil used by the global kernel defense.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

SYM_RTOL = 1e-10
# An eigenvalue counts as real when |Im| <= REAL_TOL * (1 + |Re|).
REAL_TOL = 1e-8


class NotPositiveDefinite(Exception):
    """Factorization failed: the matrix is not positive definite.

    ``minor`` is the 1-based order of the first non-positive leading minor.
    """

    def __init__(self, minor: int):
        self.minor = int(minor)
        super().__init__(f"matrix not positive definite (leading minor {self.minor})")


class MaxIterExceeded(Exception):
    """Iterative solve ran out of iterations; carries the last residual norm."""

    def __init__(self, residual: float):
        self.residual = float(residual)
        super().__init__(f"iteration limit reached, residual {self.residual:.3e}")


class NoRealEigenvalue(Exception):
    """The pencil produced no eigenvalue with negligible imaginary part."""


def check_symmetric(m, rtol: float = SYM_RTOL) -> np.ndarray:
    """Validate and return a square symmetric float64 matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max()) if m.size else 0.0)
    if float(np.abs(m - m.T).max()) > rtol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    return m


def cholesky(m) -> np.ndarray:
    """Lower-triangular L with L @ L.T == m for symmetric positive definite m.

    Raises NotPositiveDefinite with the index of the offending leading
    minor when m is not positive definite to working precision.
    """
    m = check_symmetric(m)
    L, info = scipy.linalg.lapack.dpotrf(m, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise NotPositiveDefinite(info)
    if info < 0:
        raise ValueError(f"illegal value in argument {-info} of dpotrf")
    return L


def cho_solve(L: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve (L @ L.T) x = rhs given the lower Cholesky factor L."""
    return scipy.linalg.cho_solve((L, True), rhs, check_finite=False)


def spd_solve(m, rhs) -> np.ndarray:
    """Solve m x = rhs for symmetric positive definite m via Cholesky."""
    return cho_solve(cholesky(m), np.asarray(rhs, dtype=np.float64))


def cg_solve(h, rhs, tol: float, max_iter: int | None = None) -> np.ndarray:
    """Conjugate gradients for h q = rhs with h symmetric PSD on the span of rhs.

    Stops when ||h q - rhs|| <= tol * ||rhs||; raises MaxIterExceeded after
    10 * dim iterations (or ``max_iter`` when given).
    """
    h = check_symmetric(h)
    rhs = np.asarray(rhs, dtype=np.float64)
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = h.shape[0]
    if rhs.shape != (n,):
        raise ValueError(f"rhs shape {rhs.shape} does not match matrix dim {n}")
    limit = 10 * n if max_iter is None else int(max_iter)
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return np.zeros(n)
    q = np.zeros(n)
    r = rhs.copy()
    p = r.copy()
    rr = float(r @ r)
    for _ in range(limit):
        if np.sqrt(rr) <= tol * rhs_norm:
            return q
        hp = h @ p
        alpha = rr / float(p @ hp)
        q = q + alpha * p
        r = r - alpha * hp
        rr_next = float(r @ r)
        p = r + (rr_next / rr) * p
        rr = rr_next
    if np.sqrt(rr) <= tol * rhs_norm:
        return q
    raise MaxIterExceeded(np.sqrt(rr))


@dataclass(frozen=True)
class Pencil2M:
    """The 2M x 2M pencil M0 z = alpha N0 z with N0 = [[O, B], [B, O]].

    N0 must have exactly zero diagonal blocks; its off-diagonal block B is
    the ellipsoid metric and must be positive definite for solves.
    """

    M0: np.ndarray
    N0: np.ndarray

    def __post_init__(self):
        m0 = check_symmetric(self.M0)
        n0 = check_symmetric(self.N0)
        if m0.shape != n0.shape:
            raise ValueError("M0 and N0 must have matching shapes")
        if m0.shape[0] % 2 != 0:
            raise ValueError("pencil dimension must be even")
        m = m0.shape[0] // 2
        if np.any(n0[:m, :m] != 0.0) or np.any(n0[m:, m:] != 0.0):
            raise ValueError("N0 diagonal blocks must be exactly zero")
        object.__setattr__(self, "M0", m0)
        object.__setattr__(self, "N0", n0)

    @property
    def half_dim(self) -> int:
        return self.M0.shape[0] // 2

    @property
    def metric(self) -> np.ndarray:
        """The B block of N0."""
        m = self.half_dim
        return self.N0[:m, m:]


@dataclass(frozen=True)
class EigPair:
    """A generalized eigenvalue with its eigenvector split into halves."""

    alpha: float
    z1: np.ndarray
    z2: np.ndarray


def _best_real_vector(vec: np.ndarray, m0: np.ndarray, n0: np.ndarray,
                      alpha: float) -> np.ndarray:
    """Extract a real eigenvector from a (possibly complex) eig output column."""
    candidates = []
    for part in (vec.real, vec.imag):
        norm = float(np.linalg.norm(part))
        if norm > 0.0:
            z = part / norm
            res = float(np.linalg.norm(m0 @ z - alpha * (n0 @ z)))
            candidates.append((res, z))
    if not candidates:
        raise NoRealEigenvalue("eigenvector has no usable real part")
    candidates.sort(key=lambda t: t[0])
    return candidates[0][1]


def leftmost_real_eig(pencil: Pencil2M) -> EigPair:
    """Smallest real generalized eigenvalue of the pencil with its eigenvector.

    The pencil is reduced to a standard eigenproblem with
    N0^{-1} = [[O, B^{-1}], [B^{-1}, O]] (B factored by Cholesky) and handed
    to the dense nonsymmetric QR eigensolver. Among eigenvalues tied for
    leftmost, the eigenvector with the largest B-norm of its top half wins,
    which favors the easy solution path downstream.
    """
    m = pencil.half_dim
    b = pencil.metric
    L = cholesky(b)
    m0, n0 = pencil.M0, pencil.N0
    # rows of N0^{-1} M0: top half = B^{-1} (lower rows of M0), bottom = B^{-1} (upper rows)
    g = np.vstack([cho_solve(L, m0[m:, :]), cho_solve(L, m0[:m, :])])
    vals, vecs = np.linalg.eig(g)
    is_real = np.abs(vals.imag) <= REAL_TOL * (1.0 + np.abs(vals.real))
    if not bool(is_real.any()):
        raise NoRealEigenvalue("no real eigenvalue found for the pencil")
    real_vals = vals.real[is_real]
    real_vecs = vecs[:, is_real]
    alpha_min = float(real_vals.min())
    tie = real_vals <= alpha_min + REAL_TOL * (1.0 + abs(alpha_min))
    best = None
    best_norm = -1.0
    for idx in np.nonzero(tie)[0]:
        alpha = float(real_vals[idx])
        z = _best_real_vector(real_vecs[:, idx], m0, n0, alpha)
        z1 = z[:m]
        z1_norm_b = float(np.sqrt(max(z1 @ b @ z1, 0.0)))
        if z1_norm_b > best_norm:
            best = EigPair(alpha, z1, z[m:])
            best_norm = z1_norm_b
    assert best is not None
    return best
