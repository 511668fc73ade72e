"""Globally optimal kernel defense as a one-constraint QCQP.

The defense problem is

    max_theta   theta' A theta - 2 a' theta + gamma_a
    s.t.        theta' B theta - 2 b' theta + gamma_b <= eps

with A, B positive semidefinite, so the objective is convex and the problem
non-convex. Centering the constraint ellipsoid turns it into minimizing a
concave quadratic over a B-norm ball, whose global optimum sits on the
boundary and is recovered from the leftmost real eigenpair of a structured
2M x 2M pencil. When the shifted linear term is orthogonal to the critical
eigenspace (the hard case, detected through a vanishing top eigenvector
half), a null-space construction with a regularized CG solve finds the
optimum instead; optionally a tiny random perturbation of the linear term
re-enables the eigenvector formula.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from stealguard.linalg import (
    NotPositiveDefinite,
    Pencil2M,
    cg_solve,
    check_symmetric,
    cho_solve,
    cholesky,
    leftmost_real_eig,
)

# ||z1||_B at or below HARD_CASE_TOL * ||(z1; z2)|| routes to the hard case.
HARD_CASE_TOL = 1e-8
PSD_TOL = 1e-8
EPS_HAT_SQ_FLOOR = -1e-12


class InfeasibleEps(Exception):
    """No parameter satisfies the quality constraint; the inputs are inconsistent."""


class HardCaseDetected(Exception):
    """The eigenvector formula degenerated; carries data for the hard-case solve."""

    def __init__(self, z1_norm_b: float, alpha_star: float):
        self.z1_norm_b = float(z1_norm_b)
        self.alpha_star = float(alpha_star)
        super().__init__(
            f"hard case: ||z1||_B = {self.z1_norm_b:.3e} at alpha* = {self.alpha_star:.6g}")


class NullSpaceNotFound(Exception):
    """Hard-case solve found no numerical null vector; contradicts detection."""


class NoRealBeta(Exception):
    """No real boundary step exists in the hard case; numerical inconsistency."""


def _sgn(x: float) -> float:
    """Sign with sgn(0) = -1, matching the eigenvector selection rule."""
    return 1.0 if x > 0.0 else -1.0


@dataclass(frozen=True)
class QcqpInstance:
    """Data of the defense QCQP: objective (A, a, gamma_a), constraint (B, b, gamma_b, eps)."""

    A: np.ndarray
    a: np.ndarray
    gamma_a: float
    B: np.ndarray
    b: np.ndarray
    gamma_b: float
    eps: float

    def __post_init__(self):
        A = check_symmetric(self.A)
        B = check_symmetric(self.B)
        a = np.asarray(self.a, dtype=np.float64).ravel()
        b = np.asarray(self.b, dtype=np.float64).ravel()
        m = A.shape[0]
        if B.shape[0] != m or a.shape[0] != m or b.shape[0] != m:
            raise ValueError("A, B, a, b must share one dimension")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if float(np.linalg.eigvalsh(A).min()) < -PSD_TOL * max(np.trace(A), 1e-300):
            raise ValueError("A must be positive semidefinite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "gamma_a", float(self.gamma_a))
        object.__setattr__(self, "gamma_b", float(self.gamma_b))
        object.__setattr__(self, "eps", float(self.eps))

    @property
    def dim(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class ShiftedInstance:
    """Ball-centered form: min (1/2) t' A_hat t + a_hat' t over ||t||_B <= eps_hat.

    ``shift`` is the ellipsoid center B^{-1} b; gamma_a and eps are carried
    through so solutions can report objective and constraint values in the
    original coordinates.
    """

    A_hat: np.ndarray
    a_hat: np.ndarray
    eps_hat: float
    shift: np.ndarray
    gamma_a: float
    eps: float


@dataclass(frozen=True)
class QcqpSolution:
    """Global maximizer with its objective, constraint value, and solve path."""

    theta_opt: np.ndarray
    objective: float
    constraint_value: float
    path: str  # "easy" | "hard" | "perturbed"
    alpha_star: float | None
    b_ridge: float = 0.0


@dataclass(frozen=True)
class SolveOptions:
    perturb: bool = False
    perturb_seed: int = 0
    perturb_scale: float = 1e-6
    alpha_reg: float | None = None
    hard_case_tol: float = HARD_CASE_TOL
    cg_tol: float = 1e-12
    ridge_on_indefinite: bool = False


def objective_value(inst: QcqpInstance, theta: np.ndarray) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    return float(theta @ inst.A @ theta - 2.0 * (inst.a @ theta) + inst.gamma_a)


def constraint_value(inst: QcqpInstance, theta: np.ndarray) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    return float(theta @ inst.B @ theta - 2.0 * (inst.b @ theta) + inst.gamma_b)


def assemble_qcqp(gram_set, lam: float, eps: float) -> QcqpInstance:
    """QCQP data from Gram matrices: the attacker's best response is substituted
    into the objective, leaving quadratics in the surrogate parameter only."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    K1, K2, K3, K4 = gram_set.K1, gram_set.K2, gram_set.K3, gram_set.K4
    f1, f2 = gram_set.f1, gram_set.f2
    m = K3.shape[0]
    m_prime = K4.shape[0]
    L = cholesky(K1 + lam * np.eye(K1.shape[0]))
    a_tilde = K3 @ cho_solve(L, K2)
    A = (a_tilde.T @ a_tilde) / m
    A = 0.5 * (A + A.T)
    B = (K4.T @ K4) / m_prime
    B = 0.5 * (B + B.T)
    return QcqpInstance(
        A=A,
        a=a_tilde.T @ f1 / m,
        gamma_a=float(f1 @ f1) / m,
        B=B,
        b=K4.T @ f2 / m_prime,
        gamma_b=float(f2 @ f2) / m_prime,
        eps=eps,
    )


def shift(inst: QcqpInstance) -> ShiftedInstance:
    """Center the constraint ellipsoid; fails if B is not positive definite
    (NotPositiveDefinite) or no feasible point exists (InfeasibleEps)."""
    L = cholesky(inst.B)  # raises NotPositiveDefinite when the metric degenerates
    center = cho_solve(L, inst.b)
    eps_hat_sq = inst.eps + float(inst.b @ center) - inst.gamma_b
    if eps_hat_sq < EPS_HAT_SQ_FLOOR:
        raise InfeasibleEps(
            f"squared ball radius {eps_hat_sq:.3e} is negative; no feasible parameter")
    eps_hat = float(np.sqrt(max(eps_hat_sq, 0.0)))
    return ShiftedInstance(
        A_hat=-2.0 * inst.A,
        a_hat=2.0 * inst.a - 2.0 * (inst.A @ center),
        eps_hat=eps_hat,
        shift=center,
        gamma_a=inst.gamma_a,
        eps=inst.eps,
    )


def _original_metrics(shifted: ShiftedInstance, B: np.ndarray,
                      theta: np.ndarray) -> tuple[float, float]:
    """Objective and constraint values in original coordinates from shifted data.

    A = -A_hat/2, a = a_hat/2 + A shift, b = B shift, and gamma_b follows from
    the ball radius identity eps_hat^2 = eps + b' B^{-1} b - gamma_b.
    """
    A = -0.5 * shifted.A_hat
    a = 0.5 * shifted.a_hat + A @ shifted.shift
    b = B @ shifted.shift
    gamma_b = shifted.eps + float(b @ shifted.shift) - shifted.eps_hat ** 2
    objective = float(theta @ A @ theta - 2.0 * (a @ theta) + shifted.gamma_a)
    constraint = float(theta @ B @ theta - 2.0 * (b @ theta) + gamma_b)
    return objective, constraint


def build_pencil(shifted: ShiftedInstance, B: np.ndarray) -> Pencil2M:
    """The 2M x 2M pencil whose leftmost real eigenpair solves the ball problem."""
    if shifted.eps_hat <= 0.0:
        raise ValueError("pencil undefined for a zero-radius ball")
    m = B.shape[0]
    outer = np.outer(shifted.a_hat, shifted.a_hat) / shifted.eps_hat ** 2
    m0 = np.block([[-B, shifted.A_hat], [shifted.A_hat, -outer]])
    n0 = np.block([[np.zeros((m, m)), B], [B, np.zeros((m, m))]])
    return Pencil2M(M0=0.5 * (m0 + m0.T), N0=0.5 * (n0 + n0.T))


def _center_solution(shifted: ShiftedInstance, B: np.ndarray) -> QcqpSolution:
    # zero-radius ball: the center is the only feasible point
    theta = shifted.shift.copy()
    objective, constraint = _original_metrics(shifted, B, theta)
    return QcqpSolution(theta_opt=theta, objective=objective,
                        constraint_value=constraint, path="easy", alpha_star=None)


# Relative tolerance on the easy path's KKT certificate (A_hat - alpha* B) t + a_hat = 0.
STATIONARITY_TOL = 1e-6


def solve_easy(shifted: ShiftedInstance, B: np.ndarray,
               hard_case_tol: float = HARD_CASE_TOL) -> QcqpSolution:
    """Boundary optimum from the leftmost eigenpair; raises HardCaseDetected
    when the top eigenvector half vanishes in the B-norm or the resulting
    point fails the stationarity certificate.

    The certificate backstop matters because a defective leftmost eigenvalue
    (the hard case) leaves noise of order sqrt(machine eps) in z1, which can
    clear the bare norm threshold while the eigenvector direction is garbage.
    """
    B = check_symmetric(B)
    if shifted.eps_hat == 0.0:
        return _center_solution(shifted, B)
    pair = leftmost_real_eig(build_pencil(shifted, B))
    z1, z2 = pair.z1, pair.z2
    z1_norm_b = float(np.sqrt(max(z1 @ B @ z1, 0.0)))
    stacked = float(np.sqrt(z1 @ z1 + z2 @ z2))
    if z1_norm_b <= hard_case_tol * stacked:
        raise HardCaseDetected(z1_norm_b, pair.alpha)
    t_hat = -_sgn(float(shifted.a_hat @ z2)) * shifted.eps_hat * z1 / z1_norm_b
    stationarity = shifted.A_hat @ t_hat - pair.alpha * (B @ t_hat) + shifted.a_hat
    scale = float(np.linalg.norm(shifted.a_hat)
                  + (np.linalg.norm(shifted.A_hat) + abs(pair.alpha) * np.linalg.norm(B))
                  * np.linalg.norm(t_hat))
    if float(np.linalg.norm(stationarity)) > STATIONARITY_TOL * max(scale, 1e-300):
        raise HardCaseDetected(z1_norm_b, pair.alpha)
    theta = t_hat + shifted.shift
    objective, constraint = _original_metrics(shifted, B, theta)
    return QcqpSolution(theta_opt=theta, objective=objective,
                        constraint_value=constraint, path="easy",
                        alpha_star=pair.alpha)


def _b_orthonormal_null_vectors(K: np.ndarray, B: np.ndarray) -> list[np.ndarray]:
    """Numerical null vectors of K, B-orthonormalized by Gram-Schmidt."""
    _, svals, vt = np.linalg.svd(K)
    threshold = HARD_CASE_TOL * (svals[0] if svals.size else 0.0)
    raw = [vt[i] for i in range(len(svals)) if svals[i] <= threshold]
    basis: list[np.ndarray] = []
    for v in raw:
        w = v.copy()
        for u in basis:
            w = w - (u @ B @ w) * u
        norm_b = float(np.sqrt(max(w @ B @ w, 0.0)))
        if norm_b > 1e-12:
            basis.append(w / norm_b)
    return basis


def solve_hard(shifted: ShiftedInstance, B: np.ndarray, alpha_star: float,
               alpha_reg: float | None = None,
               cg_tol: float = 1e-12) -> QcqpSolution:
    """Hard-case optimum: regularize away the null space of the stationarity
    matrix, solve for the range-space component by CG, then step along a null
    vector to the ball boundary."""
    B = check_symmetric(B)
    # In the hard case alpha* is the smallest eigenvalue of the symmetric
    # pencil (A_hat, B). The nonsymmetric pencil solve that produced
    # alpha_star loses ~sqrt(machine eps) digits at the defective eigenvalue,
    # which would leave the stationarity matrix visibly nonsingular, so
    # refine it here (only within a guard, to keep a miscast easy instance
    # from being silently reinterpreted).
    refined = float(scipy.linalg.eigh(shifted.A_hat, B, eigvals_only=True)[0])
    if abs(refined - alpha_star) <= 1e-5 * (1.0 + abs(alpha_star)):
        alpha_star = refined
    K = shifted.A_hat - alpha_star * B
    K = 0.5 * (K + K.T)
    null_vectors = _b_orthonormal_null_vectors(K, B)
    if not null_vectors:
        raise NullSpaceNotFound(
            "stationarity matrix has no numerical null vector despite hard-case detection")
    if alpha_reg is None:
        alpha_reg = float(np.linalg.norm(K, "fro")) / K.shape[0]
        if alpha_reg <= 0.0:
            alpha_reg = 1.0
    if not alpha_reg > 0:
        raise ValueError("alpha_reg must be positive")
    H = K.copy()
    for v in null_vectors:
        bv = B @ v
        H = H + alpha_reg * np.outer(bv, bv)
    q = cg_solve(0.5 * (H + H.T), -shifted.a_hat, tol=cg_tol)
    v = null_vectors[0]
    cross = float(v @ B @ q)
    disc = cross ** 2 - float(q @ B @ q) + shifted.eps_hat ** 2
    if disc < 0.0:
        raise NoRealBeta(
            f"range component exceeds the ball radius (discriminant {disc:.3e})")
    beta = -cross + float(np.sqrt(disc))  # the nonnegative root, for determinism
    theta = q + beta * v + shifted.shift
    objective, constraint = _original_metrics(shifted, B, theta)
    return QcqpSolution(theta_opt=theta, objective=objective,
                        constraint_value=constraint, path="hard",
                        alpha_star=float(alpha_star))


def solve(inst: QcqpInstance, options: SolveOptions = SolveOptions()) -> QcqpSolution:
    """Global solve: shift, eigenpair, then the easy, hard, or perturbed path."""
    b_ridge = 0.0
    try:
        cholesky(inst.B)
    except NotPositiveDefinite:
        if not options.ridge_on_indefinite:
            raise
        # opt-in repair: the solved problem differs from the stated one by b_ridge * I
        b_ridge = 1e-10 * float(np.trace(inst.B)) / inst.dim
        inst = replace(inst, B=inst.B + b_ridge * np.eye(inst.dim))
    shifted = shift(inst)
    try:
        solution = solve_easy(shifted, inst.B, hard_case_tol=options.hard_case_tol)
    except HardCaseDetected as hard:
        if options.perturb:
            rng = np.random.default_rng(options.perturb_seed)
            noise_scale = options.perturb_scale * max(
                float(np.linalg.norm(shifted.a_hat)), 1.0)
            perturbed = replace(
                shifted, a_hat=shifted.a_hat + noise_scale * rng.standard_normal(inst.dim))
            solution = solve_easy(perturbed, inst.B,
                                  hard_case_tol=options.hard_case_tol)
            objective = objective_value(inst, solution.theta_opt)
            constraint = constraint_value(inst, solution.theta_opt)
            return replace(solution, objective=objective, constraint_value=constraint,
                           path="perturbed", b_ridge=b_ridge)
        solution = solve_hard(shifted, inst.B, hard.alpha_star,
                              alpha_reg=options.alpha_reg, cg_tol=options.cg_tol)
    if b_ridge > 0.0:
        solution = replace(solution, b_ridge=b_ridge)
    return solution
