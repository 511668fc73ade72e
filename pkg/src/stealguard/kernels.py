"""Kernel functions, Gram assembly, and the closed-form kernel-ridge attacker.

The defender's true model f and surrogate g share one kernel and one anchor
set (the training samples); the attacker's model h uses its own kernel over
its own query points. ``assemble_gram_set`` collects the four cross-Gram
matrices and true-model outputs that the kernel defense consumes, and
``krr_attack`` is the attacker's analytic best response to a surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from stealguard.linalg import cholesky, cho_solve

KERNEL_KINDS = ("rbf", "linear", "polynomial")


class DimensionMismatch(ValueError):
    """Inputs disagree on a feature or sample dimension."""


class SolveFailure(Exception):
    """A linear solve that should be well-posed failed; inputs are inconsistent."""


@dataclass(frozen=True)
class KernelSpec:
    """A positive-definite kernel: rbf(gamma), linear, or polynomial(degree, offset)."""

    kind: str
    gamma: float = 1.0
    degree: int = 3
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf" and not self.gamma > 0:
            raise ValueError("rbf gamma must be positive")
        if self.kind == "polynomial" and self.degree < 1:
            raise ValueError("polynomial degree must be >= 1")

    @classmethod
    def rbf(cls, gamma: float) -> "KernelSpec":
        return cls(kind="rbf", gamma=float(gamma))

    @classmethod
    def linear(cls) -> "KernelSpec":
        return cls(kind="linear")

    @classmethod
    def polynomial(cls, degree: int, offset: float = 0.0) -> "KernelSpec":
        return cls(kind="polynomial", degree=int(degree), offset=float(offset))

    def to_json(self) -> dict:
        if self.kind == "rbf":
            return {"kind": "rbf", "gamma": self.gamma}
        if self.kind == "polynomial":
            return {"kind": "polynomial", "degree": self.degree, "offset": self.offset}
        return {"kind": "linear"}

    @classmethod
    def from_json(cls, obj: dict) -> "KernelSpec":
        kind = obj["kind"]
        if kind == "rbf":
            return cls.rbf(obj["gamma"])
        if kind == "polynomial":
            return cls.polynomial(obj["degree"], obj.get("offset", 0.0))
        return cls.linear()


def _as_samples(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionMismatch(f"samples must be 2-d, got shape {x.shape}")
    return x


def gram(kernel: KernelSpec, xs, ys) -> np.ndarray:
    """Pairwise kernel matrix with entry (i, j) = k(xs[i], ys[j])."""
    xs = _as_samples(xs)
    ys = _as_samples(ys)
    if xs.shape[1] != ys.shape[1]:
        raise DimensionMismatch(
            f"feature dims differ: {xs.shape[1]} vs {ys.shape[1]}")
    if kernel.kind == "rbf":
        # cdist forms the differences directly, so k(x, x) is exactly 1
        return np.exp(-kernel.gamma * cdist(xs, ys, "sqeuclidean"))
    if kernel.kind == "linear":
        return xs @ ys.T
    return (xs @ ys.T + kernel.offset) ** kernel.degree


@dataclass(frozen=True)
class KernelModel:
    """Kernel expansion sum_s weights[s] * k(x, anchors[s])."""

    kernel: KernelSpec
    anchors: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        anchors = _as_samples(self.anchors)
        weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if len(weights) != anchors.shape[0]:
            raise DimensionMismatch(
                f"{len(weights)} weights for {anchors.shape[0]} anchors")
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "weights", weights)

    def to_json(self) -> dict:
        return {
            "kernel": self.kernel.to_json(),
            "anchors": self.anchors.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "KernelModel":
        return cls(
            kernel=KernelSpec.from_json(obj["kernel"]),
            anchors=np.asarray(obj["anchors"], dtype=np.float64),
            weights=np.asarray(obj["weights"], dtype=np.float64),
        )


def predict(model: KernelModel, x) -> float:
    """Evaluate the kernel expansion at a single input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.anchors.shape[1]:
        raise DimensionMismatch(
            f"input shape {x.shape} does not match anchor dim {model.anchors.shape[1]}")
    return float(gram(model.kernel, x[None, :], model.anchors)[0] @ model.weights)


def predict_batch(model: KernelModel, xs) -> np.ndarray:
    """Vectorized ``predict`` over rows of xs."""
    return gram(model.kernel, _as_samples(xs), model.anchors) @ model.weights


@dataclass(frozen=True)
class GramSet:
    """Gram matrices and true-model outputs consumed by the kernel defense.

    K1: attacker-kernel Gram of the n attacker queries (n x n, PSD).
    K2: attacker queries vs. the M training anchors under the defender kernel.
    K3: attacker kernel between the m objective samples and attacker queries.
    K4: defender kernel between the m' constraint samples and training anchors.
    f1, f2: true-model outputs on the objective and constraint samples.
    """

    K1: np.ndarray
    K2: np.ndarray
    K3: np.ndarray
    K4: np.ndarray
    f1: np.ndarray
    f2: np.ndarray

    def __post_init__(self):
        K1 = np.asarray(self.K1, dtype=np.float64)
        K2 = np.asarray(self.K2, dtype=np.float64)
        K3 = np.asarray(self.K3, dtype=np.float64)
        K4 = np.asarray(self.K4, dtype=np.float64)
        f1 = np.asarray(self.f1, dtype=np.float64).ravel()
        f2 = np.asarray(self.f2, dtype=np.float64).ravel()
        n = K1.shape[0]
        if K1.shape != (n, n):
            raise DimensionMismatch("K1 must be square")
        M = K2.shape[1]
        if K2.shape[0] != n:
            raise DimensionMismatch("K2 rows must match K1 dim")
        if K3.shape[1] != n:
            raise DimensionMismatch("K3 columns must match K1 dim")
        if K4.shape[1] != M:
            raise DimensionMismatch("K4 columns must match K2 columns")
        if f1.shape[0] != K3.shape[0]:
            raise DimensionMismatch("f1 length must match K3 rows")
        if f2.shape[0] != K4.shape[0]:
            raise DimensionMismatch("f2 length must match K4 rows")
        for name, arr in (("K1", K1), ("K2", K2), ("K3", K3), ("K4", K4),
                          ("f1", f1), ("f2", f2)):
            object.__setattr__(self, name, arr)

    @property
    def n_attacker(self) -> int:
        return self.K1.shape[0]

    @property
    def n_anchors(self) -> int:
        return self.K2.shape[1]


def assemble_gram_set(attacker_kernel: KernelSpec, defender_kernel: KernelSpec,
                      x_attacker, x_train, x_objective, x_constraint,
                      f1, f2) -> GramSet:
    """Build the GramSet from raw sample arrays and true-model outputs."""
    return GramSet(
        K1=gram(attacker_kernel, x_attacker, x_attacker),
        K2=gram(defender_kernel, x_attacker, x_train),
        K3=gram(attacker_kernel, x_objective, x_attacker),
        K4=gram(defender_kernel, x_constraint, x_train),
        f1=f1,
        f2=f2,
    )


def krr_fit(K1: np.ndarray, lam: float, y: np.ndarray) -> np.ndarray:
    """Kernel ridge weights (K1 + lam I)^{-1} y via Cholesky."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    K1 = np.asarray(K1, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != K1.shape[0]:
        raise DimensionMismatch("y length must match K1 dim")
    try:
        L = cholesky(K1 + lam * np.eye(K1.shape[0]))
    except Exception as exc:  # PSD K1 plus lam I cannot fail; inputs are broken
        raise SolveFailure(f"(K1 + lam I) factorization failed: {exc}") from exc
    return cho_solve(L, y)


def krr_attack(gram_set: GramSet, lam: float, theta: np.ndarray) -> np.ndarray:
    """The attacker's analytic best response (K1 + lam I)^{-1} K2 theta."""
    theta = np.asarray(theta, dtype=np.float64).ravel()
    if theta.shape[0] != gram_set.n_anchors:
        raise DimensionMismatch("theta length must match K2 columns")
    return krr_fit(gram_set.K1, lam, gram_set.K2 @ theta)
