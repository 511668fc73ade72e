"""Independent brute-force verifiers for the defense solvers.

Nothing here reuses solver internals: the QCQP check samples the feasible
ellipsoid directly, the pencil check runs a QZ full-spectrum solve, the
hypergradient check differentiates the unrolled loss by central finite
differences of a plain forward recursion, and the attacker check runs
full-batch gradient descent to convergence.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from stealguard.linalg import MaxIterExceeded
from stealguard.qcqp import QcqpInstance


class CostGuard(Exception):
    """Brute force refused: the instance dimension makes sampling meaningless."""


MAX_BRUTE_DIM = 6


@dataclass(frozen=True)
class OracleVerdict:
    """One oracle-vs-solver comparison with its relative gap."""

    target: str
    instance_digest: str
    oracle_value: float
    solver_value: float
    relative_gap: float
    passed: bool

    def to_json(self) -> dict:
        return {
            "target": self.target,
            "instance": self.instance_digest,
            "oracle": self.oracle_value,
            "solver": self.solver_value,
            "relative_gap": self.relative_gap,
            "pass": self.passed,
        }


def digest(*arrays) -> str:
    """Hex digest identifying a tuple of float arrays."""
    h = hashlib.sha256()
    for arr in arrays:
        h.update(np.ascontiguousarray(np.asarray(arr, dtype=np.float64)).tobytes())
    return h.hexdigest()[:16]


def make_verdict(target: str, instance_digest: str, oracle_value: float,
                 solver_value: float, tol: float) -> OracleVerdict:
    gap = abs(solver_value - oracle_value) / (1.0 + abs(oracle_value))
    return OracleVerdict(target=target, instance_digest=instance_digest,
                         oracle_value=float(oracle_value),
                         solver_value=float(solver_value),
                         relative_gap=float(gap), passed=bool(gap <= tol))


# ---------------------------------------------------------------------------
# QCQP brute force


def qcqp_brute(inst: QcqpInstance, n_random: int = 1_000_000,
               n_boundary: int = 10_000, seed: int = 0,
               refine_steps: int = 100) -> tuple[np.ndarray, float]:
    """Best feasible point found by rejection sampling plus a refined boundary grid.

    Boundary points are drawn uniformly on the constraint ellipsoid and each
    is pushed uphill by projected gradient steps; since the objective is
    convex, plain ascent never decreases it and the projection keeps points
    feasible.
    """
    if inst.dim > MAX_BRUTE_DIM:
        raise CostGuard(f"dimension {inst.dim} exceeds brute-force guard {MAX_BRUTE_DIM}")
    rng = np.random.default_rng(seed)
    A, a, gamma_a = inst.A, inst.a, inst.gamma_a
    B, b, gamma_b, eps = inst.B, inst.b, inst.gamma_b, inst.eps
    m = inst.dim

    def objective(points: np.ndarray) -> np.ndarray:
        return np.einsum("xi,ij,xj->x", points, A, points) - 2.0 * points @ a + gamma_a

    def constraint(points: np.ndarray) -> np.ndarray:
        return np.einsum("xi,ij,xj->x", points, B, points) - 2.0 * points @ b + gamma_b

    b_inv = np.linalg.inv(B)
    center = b_inv @ b
    eps_hat = float(np.sqrt(max(eps + b @ center - gamma_b, 0.0)))
    best_theta = center.copy()
    best_value = float(objective(center[None, :])[0])

    # rejection sampling in the ellipsoid's bounding box
    half_widths = eps_hat * np.sqrt(np.maximum(np.diag(b_inv), 0.0))
    accepted = 0
    attempts = 0
    batch = 200_000
    while accepted < n_random and attempts < 50 * max(n_random, 1):
        draw = min(batch, 50 * max(n_random, 1) - attempts)
        attempts += draw
        pts = center + rng.uniform(-1.0, 1.0, size=(draw, m)) * half_widths
        feasible = pts[constraint(pts) <= eps]
        if feasible.shape[0] == 0:
            if eps_hat == 0.0:
                break
            continue
        take = feasible[: n_random - accepted]
        accepted += take.shape[0]
        values = objective(take)
        top = int(np.argmax(values))
        if values[top] > best_value:
            best_value = float(values[top])
            best_theta = take[top].copy()

    # boundary grid with projected-gradient refinement
    if n_boundary > 0 and eps_hat > 0.0:
        chol = np.linalg.cholesky(B)
        u = rng.standard_normal((n_boundary, m))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        pts = center + eps_hat * scipy.linalg.solve_triangular(
            chol.T, u.T, lower=False).T
        spectral = float(np.linalg.norm(A, 2))
        step = 1e-2 / max(spectral, 1e-12)
        for _ in range(refine_steps):
            pts = pts + step * (2.0 * pts @ A - 2.0 * a)
            offset = pts - center
            radius = np.sqrt(np.maximum(
                np.einsum("xi,ij,xj->x", offset, B, offset), 0.0))
            outside = radius > eps_hat
            if outside.any():
                pts[outside] = center + offset[outside] * (
                    eps_hat / radius[outside])[:, None]
        values = objective(pts)
        top = int(np.argmax(values))
        if values[top] > best_value:
            best_value = float(values[top])
            best_theta = pts[top].copy()

    return best_theta, best_value


def pencil_eigenvalues(m0: np.ndarray, n0: np.ndarray) -> np.ndarray:
    """Full generalized spectrum by QZ; infinite eigenvalues are dropped."""
    vals = scipy.linalg.eigvals(np.asarray(m0, dtype=np.float64),
                                np.asarray(n0, dtype=np.float64))
    return vals[np.isfinite(vals)]


# ---------------------------------------------------------------------------
# unrolled-attacker verifiers


def unrolled_loss(att, theta: np.ndarray, batch, x_obj, f_obj) -> float:
    """Objective loss after a plain forward unroll (no sensitivity bookkeeping)."""
    theta = np.asarray(theta, dtype=np.float64).ravel()
    w = att.w0.copy()
    k = att.model.n_outputs
    for t in range(att.steps):
        idx = att.minibatches[t]
        xb = att.samples[idx]
        phi = att.model.features(xb)
        g = att.surrogate.predict(theta, xb)
        resid = phi @ w.reshape(k, -1).T - g
        w = w - att.learning_rates[t] * (2.0 / xb.shape[0]) * (resid.T @ phi).ravel()
    xb = np.asarray(x_obj, dtype=np.float64)[np.asarray(batch, dtype=np.intp)]
    fb = np.asarray(f_obj, dtype=np.float64)
    if fb.ndim == 1:
        fb = fb[:, None]
    fb = fb[np.asarray(batch, dtype=np.intp)]
    h = att.model.predict(w, xb)
    return float(((h - fb) ** 2).sum(axis=1).mean())


def fd_hypergrad(att, theta, batch, x_obj, f_obj, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the unrolled objective loss in theta."""
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    theta = np.asarray(theta, dtype=np.float64).ravel()
    grad = np.zeros_like(theta)
    for i in range(theta.shape[0]):
        bump = np.zeros_like(theta)
        bump[i] = h
        grad[i] = (unrolled_loss(att, theta + bump, batch, x_obj, f_obj)
                   - unrolled_loss(att, theta - bump, batch, x_obj, f_obj)) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# closed-form attacker verifier


def converge_attacker(gram_set, lam: float, theta, tol: float,
                      max_iter: int = 200_000) -> np.ndarray:
    """Full-batch gradient descent on the attacker's regularized objective.

    Minimizes (1/n)(||K1 w - K2 theta||^2 + lam w' K1 w) with exact line
    search until the gradient norm drops to tol.
    """
    if not lam > 0:
        raise ValueError("lam must be positive")
    K1 = gram_set.K1
    y = gram_set.K2 @ np.asarray(theta, dtype=np.float64).ravel()
    n = K1.shape[0]
    w = np.zeros(n)
    grad_norm = np.inf
    for _ in range(max_iter):
        k1w = K1 @ w
        grad = (2.0 / n) * (K1 @ (k1w - y) + lam * k1w)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= tol:
            return w
        k1g = K1 @ grad
        curvature = (2.0 / n) * float(grad @ (K1 @ k1g) + lam * (grad @ k1g))
        if curvature <= 0.0:
            return w
        w = w - (grad @ grad) / curvature * grad
    raise MaxIterExceeded(grad_norm)
