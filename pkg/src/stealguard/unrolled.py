"""Defense for differentiable models against an attacker that trains by SGD.

The attacker runs T mini-batch SGD steps on squared loss against the
surrogate's outputs; its model has a trainable block linear in the
parameters over a frozen feature map, so the per-step Jacobians of the
update map exist in closed form. The defender accumulates the sensitivity
of the attacker's final iterate to the surrogate parameter in forward mode
and ascends its objective under a log-barrier that keeps the surrogate
strictly within the quality budget, halving the step on any violation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from stealguard.kernels import KernelSpec, gram


class NonFiniteValue(Exception):
    """The unrolled attacker diverged (step size too large)."""


class InfeasibleStart(Exception):
    """The initial surrogate parameter violates the quality budget."""

    def __init__(self, constraint: float, eps: float):
        self.constraint = float(constraint)
        self.eps = float(eps)
        super().__init__(
            f"initial constraint loss {self.constraint:.6g} is not below eps {self.eps:.6g}")


class BacktrackExhausted(Exception):
    """No feasible step was found within the backtracking budget at outer step u."""

    def __init__(self, u: int):
        self.u = int(u)
        super().__init__(f"backtracking exhausted at outer step {self.u}")


# ---------------------------------------------------------------------------
# frozen feature maps


class IdentityFeatures:
    """Raw inputs as features."""

    def __init__(self, dim: int):
        self.dim = int(dim)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} features, got {x.shape[1]}")
        return x

    def to_json(self) -> dict:
        return {"kind": "identity", "dim": self.dim}


class KernelFeatures:
    """Kernel evaluations against a fixed anchor set."""

    def __init__(self, kernel: KernelSpec, anchors: np.ndarray):
        self.kernel = kernel
        self.anchors = np.asarray(anchors, dtype=np.float64)
        self.dim = self.anchors.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return gram(self.kernel, x, self.anchors)

    def to_json(self) -> dict:
        return {"kind": "kernel", "kernel": self.kernel.to_json(),
                "anchors": self.anchors.tolist()}


class RandomFourierFeatures:
    """Seeded random Fourier features approximating an RBF kernel.

    ``amplitude`` rescales the whole map; activation scale sets how fast a
    fixed-learning-rate head trains on top of the frozen body.
    """

    def __init__(self, input_dim: int, dim: int, gamma: float, seed: int,
                 amplitude: float = 1.0):
        self.input_dim = int(input_dim)
        self.dim = int(dim)
        self.gamma = float(gamma)
        self.seed = int(seed)
        self.amplitude = float(amplitude)
        rng = np.random.default_rng(self.seed)
        self._w = rng.normal(0.0, np.sqrt(2.0 * self.gamma),
                             size=(self.dim, self.input_dim))
        self._phase = rng.uniform(0.0, 2.0 * np.pi, size=self.dim)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (self.amplitude * np.sqrt(2.0 / self.dim)
                * np.cos(x @ self._w.T + self._phase))

    def to_json(self) -> dict:
        return {"kind": "rff", "input_dim": self.input_dim, "dim": self.dim,
                "gamma": self.gamma, "seed": self.seed, "amplitude": self.amplitude}


def feature_map_from_json(obj: dict):
    kind = obj["kind"]
    if kind == "identity":
        return IdentityFeatures(obj["dim"])
    if kind == "kernel":
        return KernelFeatures(KernelSpec.from_json(obj["kernel"]),
                              np.asarray(obj["anchors"], dtype=np.float64))
    if kind == "rff":
        return RandomFourierFeatures(obj["input_dim"], obj["dim"],
                                     obj["gamma"], obj["seed"],
                                     amplitude=obj.get("amplitude", 1.0))
    raise ValueError(f"unknown feature map kind {kind!r}")


@dataclass(frozen=True)
class LinearHead:
    """Model with outputs reshape(params, (k, p)) @ features(x); linear in params."""

    feature_map: object
    n_outputs: int = 1

    @property
    def param_dim(self) -> int:
        return self.n_outputs * self.feature_map.dim

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.feature_map(x)

    def predict(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        phi = self.features(x)
        w = np.asarray(params, dtype=np.float64).reshape(self.n_outputs, -1)
        return phi @ w.T

    def grad(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Per-sample Jacobian of outputs in the parameters, shape (n, k, d)."""
        phi = self.features(x)
        n, p = phi.shape
        k = self.n_outputs
        g = np.zeros((n, k, k, p))
        rng_k = np.arange(k)
        g[:, rng_k, rng_k, :] = phi[:, None, :]
        return g.reshape(n, k, k * p)

    def to_json(self) -> dict:
        return {"features": self.feature_map.to_json(), "n_outputs": self.n_outputs}

    @classmethod
    def from_json(cls, obj: dict) -> "LinearHead":
        return cls(feature_map=feature_map_from_json(obj["features"]),
                   n_outputs=int(obj["n_outputs"]))


def _as_targets(values: np.ndarray, n_outputs: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[1] != n_outputs:
        raise ValueError(
            f"targets have {values.shape[1]} columns, model has {n_outputs} outputs")
    return values


# ---------------------------------------------------------------------------
# the unrolled attacker and its forward-mode sensitivity


@dataclass(frozen=True)
class UnrolledAttacker:
    """T steps of mini-batch SGD on squared loss against the surrogate's outputs.

    The defender knows every ingredient: the attacker's model (linear head),
    its starting point, learning-rate schedule, mini-batch index schedule,
    the query samples, and the surrogate structure the supervision comes from.
    """

    model: LinearHead
    w0: np.ndarray
    learning_rates: tuple[float, ...]
    minibatches: tuple[np.ndarray, ...]
    samples: np.ndarray
    surrogate: object

    def __post_init__(self):
        w0 = np.asarray(self.w0, dtype=np.float64).ravel()
        if w0.shape[0] != self.model.param_dim:
            raise ValueError("w0 length must equal the attacker model's param_dim")
        rates = tuple(float(r) for r in self.learning_rates)
        if any(r < 0 for r in rates):
            raise ValueError("learning rates must be nonnegative")
        batches = tuple(np.asarray(ix, dtype=np.intp) for ix in self.minibatches)
        if len(batches) != len(rates):
            raise ValueError("one mini-batch index list is required per step")
        n = np.asarray(self.samples).shape[0]
        for ix in batches:
            if ix.size == 0 or ix.min() < 0 or ix.max() >= n:
                raise ValueError("mini-batch indices out of range")
        object.__setattr__(self, "w0", w0)
        object.__setattr__(self, "learning_rates", rates)
        object.__setattr__(self, "minibatches", batches)
        object.__setattr__(self, "samples",
                           np.asarray(self.samples, dtype=np.float64))

    @property
    def steps(self) -> int:
        return len(self.learning_rates)


@dataclass(frozen=True)
class SensitivityState:
    """Forward accumulator: J is the Jacobian of the current attacker iterate
    w in the surrogate parameter (d' x d), all zeros before the first step."""

    J: np.ndarray
    w: np.ndarray


def initial_state(att: UnrolledAttacker, theta_dim: int) -> SensitivityState:
    return SensitivityState(J=np.zeros((att.model.param_dim, theta_dim)),
                            w=att.w0.copy())


def attacker_step(att: UnrolledAttacker, state: SensitivityState,
                  theta: np.ndarray, t: int) -> SensitivityState:
    """One SGD step of the attacker with the matching forward Jacobian update.

    w' = w - eta * grad_w(batch squared loss vs surrogate outputs)
    J' = (I - eta * H_ww) J + eta * (cross term in theta), both in closed form
    for the linear head.
    """
    if not 0 <= t < att.steps:
        raise ValueError(f"step index {t} outside [0, {att.steps})")
    theta = np.asarray(theta, dtype=np.float64).ravel()
    eta = att.learning_rates[t]
    idx = att.minibatches[t]
    xb = att.samples[idx]
    nb = xb.shape[0]
    k = att.model.n_outputs
    phi = att.model.features(xb)
    g_out = att.surrogate.predict(theta, xb)
    w_mat = state.w.reshape(k, -1)
    resid = phi @ w_mat.T - g_out
    grad_w = (2.0 / nb) * (resid.T @ phi)
    w_next = state.w - eta * grad_w.ravel()

    curvature = (2.0 / nb) * (phi.T @ phi)
    j_blocks = state.J.reshape(k, phi.shape[1], -1)
    j_next = j_blocks - eta * np.einsum("pq,kqd->kpd", curvature, j_blocks)
    g_jac = att.surrogate.grad(theta, xb)
    cross = (2.0 / nb) * np.einsum("xp,xkd->kpd", phi, g_jac)
    j_next = (j_next + eta * cross).reshape(state.J.shape)

    if not (np.isfinite(w_next).all() and np.isfinite(j_next).all()):
        raise NonFiniteValue(f"unroll diverged at step {t}")
    return SensitivityState(J=j_next, w=w_next)


def unroll(att: UnrolledAttacker, theta: np.ndarray) -> SensitivityState:
    """Run all T steps from (w0, J=0)."""
    theta = np.asarray(theta, dtype=np.float64).ravel()
    state = initial_state(att, theta.shape[0])
    for t in range(att.steps):
        state = attacker_step(att, state, theta, t)
    return state


def objective_loss(att: UnrolledAttacker, w: np.ndarray, batch: np.ndarray,
                   x_obj: np.ndarray, f_obj: np.ndarray) -> float:
    """Mean squared gap between the true model and the attacker model h_w on a batch."""
    xb = np.asarray(x_obj, dtype=np.float64)[batch]
    fb = _as_targets(f_obj, att.model.n_outputs)[batch]
    h = att.model.predict(w, xb)
    return float(((h - fb) ** 2).sum(axis=1).mean())


def hypergradient(att: UnrolledAttacker, theta: np.ndarray, batch,
                  x_obj, f_obj) -> tuple[np.ndarray, np.ndarray]:
    """Forward-mode gradient of the batch objective loss in theta, plus w^(T).

    With T = 0 the attacker never moves, so the gradient is exactly zero.
    """
    theta = np.asarray(theta, dtype=np.float64).ravel()
    batch = np.asarray(batch, dtype=np.intp)
    state = unroll(att, theta)
    xb = np.asarray(x_obj, dtype=np.float64)[batch]
    fb = _as_targets(f_obj, att.model.n_outputs)[batch]
    phi = att.model.features(xb)
    w_mat = state.w.reshape(att.model.n_outputs, -1)
    resid = phi @ w_mat.T - fb
    grad_w = (2.0 / xb.shape[0]) * (resid.T @ phi)
    return state.J.T @ grad_w.ravel(), state.w


# ---------------------------------------------------------------------------
# constraint loss and log-barrier ascent


def constraint_loss(surrogate, theta: np.ndarray, x_con, f_con) -> float:
    """Full-batch mean squared gap between true model outputs and the surrogate.

    Always evaluated on the entire constraint sample so feasibility checks
    carry no mini-batch randomness.
    """
    x_con = np.asarray(x_con, dtype=np.float64)
    if x_con.shape[0] < 1:
        raise ValueError("constraint sample must be nonempty")
    g = surrogate.predict(theta, x_con)
    f = _as_targets(f_con, g.shape[1])
    return float(((g - f) ** 2).sum(axis=1).mean())


def constraint_grad(surrogate, theta: np.ndarray, x_con, f_con) -> np.ndarray:
    x_con = np.asarray(x_con, dtype=np.float64)
    g = surrogate.predict(theta, x_con)
    f = _as_targets(f_con, g.shape[1])
    jac = surrogate.grad(theta, x_con)
    return (2.0 / x_con.shape[0]) * np.einsum("xk,xkd->d", g - f, jac)


@dataclass(frozen=True)
class BarrierConfig:
    """Log-barrier ascent settings: barrier weight, quality budget, step sizes."""

    lambda_c: float
    eps: float
    beta: tuple[float, ...]
    decay: float | None = None
    max_backtracks: int = 50

    def __post_init__(self):
        if not self.lambda_c > 0:
            raise ValueError("lambda_c must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        beta = tuple(float(b) for b in np.atleast_1d(self.beta))
        if any(b <= 0 for b in beta):
            raise ValueError("step sizes must be positive")
        object.__setattr__(self, "beta", beta)

    @property
    def max_outer(self) -> int:
        return len(self.beta)

    @classmethod
    def uniform(cls, lambda_c: float, eps: float, beta: float, steps: int,
                decay: float | None = None, max_backtracks: int = 50) -> "BarrierConfig":
        return cls(lambda_c=lambda_c, eps=eps, beta=(float(beta),) * int(steps),
                   decay=decay, max_backtracks=max_backtracks)


@dataclass(frozen=True)
class DefenseData:
    """Objective and constraint samples with true-model targets.

    ``objective_batches`` fixes the mini-batch schedule for the outer loop;
    None means full batch every step.
    """

    x_obj: np.ndarray
    f_obj: np.ndarray
    x_con: np.ndarray
    f_con: np.ndarray
    objective_batches: tuple[np.ndarray, ...] | None = None


@dataclass(frozen=True)
class IterationRecord:
    u: int
    objective_batch_loss: float
    constraint_before: float
    constraint_after: float
    beta_used: float
    backtracks: int
    lambda_c: float


def make_batches(n: int, batch_size: int, count: int, seed: int) -> tuple[np.ndarray, ...]:
    """Frozen mini-batch schedule: shuffled epochs chopped into fixed-size batches."""
    rng = np.random.default_rng(seed)
    batches: list[np.ndarray] = []
    order = np.array([], dtype=np.intp)
    while len(batches) < count:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            batches.append(order[start:start + batch_size].astype(np.intp))
            if len(batches) == count:
                break
    return tuple(batches)


def sga_defend(surrogate, att: UnrolledAttacker, cfg: BarrierConfig,
               data: DefenseData, theta0) -> tuple[np.ndarray, list[IterationRecord]]:
    """Log-barrier stochastic gradient ascent on the defense objective.

    Starts from a strictly feasible theta0 (checked, not assumed) and keeps
    every iterate strictly feasible by halving the step until the full-batch
    constraint loss stays below eps. The barrier gradient is evaluated at the
    current iterate, not the candidate.
    """
    theta = np.asarray(theta0, dtype=np.float64).ravel().copy()
    lc = constraint_loss(surrogate, theta, data.x_con, data.f_con)
    if not lc < cfg.eps:
        raise InfeasibleStart(lc, cfg.eps)
    lambda_c = cfg.lambda_c
    m_obj = np.asarray(data.x_obj).shape[0]
    full_batch = np.arange(m_obj, dtype=np.intp)
    trace: list[IterationRecord] = []
    for u in range(cfg.max_outer):
        batch = (data.objective_batches[u]
                 if data.objective_batches is not None else full_batch)
        grad_obj, w_final = hypergradient(att, theta, batch, data.x_obj, data.f_obj)
        batch_loss = objective_loss(att, w_final, batch, data.x_obj, data.f_obj)
        lc_here = constraint_loss(surrogate, theta, data.x_con, data.f_con)
        barrier_grad = -constraint_grad(surrogate, theta, data.x_con, data.f_con) \
            / (cfg.eps - lc_here)
        direction = grad_obj + lambda_c * barrier_grad
        beta = cfg.beta[u]
        backtracks = 0
        while True:
            candidate = theta + beta * direction
            lc_candidate = constraint_loss(surrogate, candidate, data.x_con, data.f_con)
            if lc_candidate < cfg.eps:
                break
            backtracks += 1
            if backtracks > cfg.max_backtracks:
                raise BacktrackExhausted(u)
            beta *= 0.5
        theta = candidate
        trace.append(IterationRecord(
            u=u, objective_batch_loss=batch_loss, constraint_before=lc_here,
            constraint_after=lc_candidate, beta_used=beta, backtracks=backtracks,
            lambda_c=lambda_c))
        if cfg.decay is not None:
            lambda_c *= cfg.decay
    return theta, trace
