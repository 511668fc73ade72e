"""Seeded random QCQP instance generators for verification and the CLI.

Three flavors: generic instances with PSD objective and SPD constraint
matrices, constructed hard cases (linear term orthogonal to the critical
generalized eigenspace), and instances whose feasible ball has a radius at
or near zero.
"""

from __future__ import annotations

import numpy as np

from stealguard.linalg import cholesky
from stealguard.qcqp import QcqpInstance


def _spd(rng: np.random.Generator, m: int, ridge: float = 0.25) -> np.ndarray:
    g = rng.standard_normal((m, m))
    s = g @ g.T / m + ridge * np.eye(m)
    return 0.5 * (s + s.T)


def random_qcqp(m: int, seed: int) -> QcqpInstance:
    """Generic instance: random PSD A, SPD B, and a guaranteed-feasible center."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((m, m))
    A = g @ g.T / m
    A = 0.5 * (A + A.T)
    B = _spd(rng, m)
    a = rng.standard_normal(m)
    b = rng.standard_normal(m)
    eps = float(rng.uniform(0.1, 2.0))
    center = np.linalg.solve(B, b)
    # gamma_b below b' B^{-1} b keeps the center strictly feasible
    gamma_b = float(rng.uniform(0.0, 1.0)) * float(b @ center)
    gamma_a = float(rng.uniform(0.0, 2.0))
    return QcqpInstance(A=A, a=a, gamma_a=gamma_a, B=B, b=b,
                        gamma_b=gamma_b, eps=eps)


def hard_case_qcqp(m: int, seed: int) -> QcqpInstance:
    """Instance whose shifted linear term is orthogonal to the critical eigenspace.

    B is random SPD and A = B V diag(mu) V' B with V B-orthonormal, so the
    columns of V are the generalized eigenvectors of (A, B). The boundary
    multiplier is pinned by the largest mu (where -2A + lam B first turns
    PSD), so the shifted linear term is projected off that eigenvector and
    scaled to keep the range-space component inside the ball.
    """
    rng = np.random.default_rng(seed)
    B = _spd(rng, m)
    L = cholesky(B)
    q, _ = np.linalg.qr(rng.standard_normal((m, m)))
    V = np.linalg.solve(L.T, q)  # V' B V = I
    mu = np.sort(rng.uniform(0.5, 3.0, size=m))
    mu[-1] = mu[-1] + 0.5  # isolate the largest eigenvalue
    A = B @ V @ np.diag(mu) @ V.T @ B
    A = 0.5 * (A + A.T)

    eps = float(rng.uniform(0.25, 1.5))
    eps_hat = float(np.sqrt(eps))
    v_crit = V[:, -1]
    a_hat = rng.standard_normal(m)
    a_hat -= (a_hat @ v_crit) / (v_crit @ v_crit) * v_crit
    # K = A_hat - alpha* B = -2 (A - mu_max B); keep ||K^+ a_hat||_B under eps_hat / 2
    K = -2.0 * (A - mu[-1] * B)
    K = 0.5 * (K + K.T)
    q_range = np.linalg.pinv(K, rcond=1e-10) @ (-a_hat)
    norm_b = float(np.sqrt(max(q_range @ B @ q_range, 0.0)))
    if norm_b > 0.5 * eps_hat:
        a_hat *= 0.5 * eps_hat / norm_b

    b = rng.standard_normal(m)
    center = np.linalg.solve(B, b)
    gamma_b = float(b @ center) + eps - eps_hat ** 2
    a = 0.5 * a_hat + A @ center
    gamma_a = float(rng.uniform(0.0, 2.0))
    return QcqpInstance(A=A, a=a, gamma_a=gamma_a, B=B, b=b,
                        gamma_b=gamma_b, eps=eps)


def tiny_ball_qcqp(m: int, seed: int, eps_hat: float = 0.0) -> QcqpInstance:
    """Instance whose feasible ball has radius exactly eps_hat (possibly zero)."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((m, m))
    A = g @ g.T / m
    A = 0.5 * (A + A.T)
    B = _spd(rng, m)
    a = rng.standard_normal(m)
    b = rng.standard_normal(m)
    eps = float(rng.uniform(0.1, 1.0))
    center = np.linalg.solve(B, b)
    gamma_b = float(b @ center) + eps - float(eps_hat) ** 2
    return QcqpInstance(A=A, a=a, gamma_a=float(rng.uniform(0.0, 2.0)),
                        B=B, b=b, gamma_b=gamma_b, eps=eps)


def verification_suite(base_seed: int = 20240) -> list[tuple[str, QcqpInstance]]:
    """The 50-instance battery: 25 generic, 15 hard-case, 10 near-zero radius.

    Dimensions cycle through {2, 3, 4}; every instance is reproducible from
    the base seed alone.
    """
    suite: list[tuple[str, QcqpInstance]] = []
    dims = (2, 3, 4)
    for i in range(25):
        suite.append((f"generic-{i}", random_qcqp(dims[i % 3], base_seed + i)))
    for i in range(15):
        suite.append((f"hard-{i}", hard_case_qcqp(dims[i % 3], base_seed + 100 + i)))
    for i in range(10):
        radius = 0.0 if i < 4 else 10.0 ** (-3 - i)
        suite.append((f"tiny-{i}",
                      tiny_ball_qcqp(dims[i % 3], base_seed + 200 + i, eps_hat=radius)))
    return suite
