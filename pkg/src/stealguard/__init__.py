"""Defensive surrogate models against model-extraction attackers.

The package fits a surrogate the defender can deploy in place of its true
model: attackers imitating the surrogate end up far from the true model,
while the surrogate stays close to it on the defender's own distribution.
Kernel models get a global solver (single-constraint QCQP via a
generalized eigenpencil); general differentiable models get forward-mode
hypergradient ascent under a log-barrier. Attacker simulators, brute-force
verification oracles, and a distribution-shift benchmark harness round out
the toolkit.
"""

from stealguard.kernels import (
    GramSet,
    KernelModel,
    KernelSpec,
    assemble_gram_set,
    gram,
    krr_attack,
    krr_fit,
    predict,
)
from stealguard.qcqp import (
    QcqpInstance,
    QcqpSolution,
    ShiftedInstance,
    SolveOptions,
    assemble_qcqp,
    shift,
    solve,
)
from stealguard.unrolled import (
    BarrierConfig,
    DefenseData,
    LinearHead,
    SensitivityState,
    UnrolledAttacker,
    attacker_step,
    constraint_loss,
    hypergradient,
    sga_defend,
)

__all__ = [
    "BarrierConfig",
    "DefenseData",
    "GramSet",
    "KernelModel",
    "KernelSpec",
    "LinearHead",
    "QcqpInstance",
    "QcqpSolution",
    "SensitivityState",
    "ShiftedInstance",
    "SolveOptions",
    "UnrolledAttacker",
    "assemble_gram_set",
    "assemble_qcqp",
    "attacker_step",
    "constraint_loss",
    "gram",
    "hypergradient",
    "krr_attack",
    "krr_fit",
    "predict",
    "sga_defend",
    "shift",
    "solve",
]

__version__ = "0.1.0"
