"""Benchmark harness: datasets, distribution shifts, attacker simulations.

Reproduces the defense-evaluation protocols at desk scale: split a dataset
into defender / attacker / test parts, shift the attacker's queries by a
mean offset plus Gaussian noise, solve the defense, simulate attackers
against the surrogate, the true model, and a rounding baseline, and report
test losses per trial. Every record is reproducible from (spec, seed,
config); wall-clock fields stay null unless timing is explicitly enabled.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from stealguard import qcqp
from stealguard.kernels import (
    KernelSpec,
    assemble_gram_set,
    gram,
    krr_attack,
    krr_fit,
)
from stealguard.qcqp import SolveOptions
from stealguard.unrolled import (
    BarrierConfig,
    DefenseData,
    LinearHead,
    RandomFourierFeatures,
    UnrolledAttacker,
    constraint_loss,
    make_batches,
    sga_defend,
    unroll,
)


class ParseError(Exception):
    """A dataset file failed to parse; carries the offending line number."""

    def __init__(self, line: int, message: str):
        self.line = int(line)
        super().__init__(f"line {self.line}: {message}")


class SizeOverflow(Exception):
    """Requested split sizes exceed the dataset."""


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DatasetSpec:
    """Where the data comes from and how it is split.

    ``source`` is a CSV path or one of the builtin generators
    ("synthetic", "synthetic-clusters"). All randomness (synthesis and the
    split shuffle) is fixed by ``seed``.
    """

    source: str = "synthetic"
    feature_count: int = 11
    target_column: str = "target"
    seed: int = 0
    n_train: int = 80
    n_attacker: int = 60
    n_objective: int = 150
    n_constraint: int = 200
    n_test: int = 200
    synthetic_rows: int = 2000

    @property
    def split_sizes(self) -> tuple[int, int, int, int, int]:
        return (self.n_train, self.n_attacker, self.n_objective,
                self.n_constraint, self.n_test)


@dataclass(frozen=True)
class Splits:
    """Disjoint standardized splits plus the index sets they came from."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_attacker: np.ndarray
    x_objective: np.ndarray
    x_constraint: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    indices: dict[str, np.ndarray]
    feature_mean: np.ndarray
    feature_scale: np.ndarray


def synthetic_regression(rows: int, features: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Smooth nonlinear regression data with integer quality-style targets in [3, 9]."""
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.0, size=(rows, features))
    w1 = rng.normal(0.0, 1.0, size=features) / np.sqrt(features)
    w2 = rng.normal(0.0, 1.0, size=features) / np.sqrt(features)
    raw = 1.3 * np.tanh(x @ w1) + 0.9 * np.sin(2.0 * (x @ w2)) + 0.4 * (x @ w1) ** 2
    raw = (raw - raw.mean()) / max(raw.std(), 1e-12)
    y = 6.0 + 1.4 * raw + rng.normal(0.0, 0.3, size=rows)
    y = np.clip(np.rint(y), 3.0, 9.0)
    return x, y


def synthetic_clusters(rows: int, features: int, classes: int,
                       seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs with integer labels 0..classes-1."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 2.5, size=(classes, features))
    labels = rng.integers(0, classes, size=rows)
    x = centers[labels] + rng.normal(0.0, 1.0, size=(rows, features))
    return x, labels.astype(np.int64)


def read_csv(path: str, target_column: str) -> tuple[np.ndarray, np.ndarray]:
    """Numeric CSV with a header row; the target column is selected by name."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(1, "empty file") from None
        header = [h.strip() for h in header]
        if target_column not in header:
            raise ParseError(1, f"no column named {target_column!r}")
        target_idx = header.index(target_column)
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(lineno, f"expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
    data = np.asarray(rows, dtype=np.float64)
    y = data[:, target_idx]
    x = np.delete(data, target_idx, axis=1)
    return x, y


def _raw_data(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    if spec.source == "synthetic":
        return synthetic_regression(spec.synthetic_rows, spec.feature_count, spec.seed)
    if spec.source == "synthetic-clusters":
        return synthetic_clusters(spec.synthetic_rows, spec.feature_count, 10, spec.seed)
    return read_csv(spec.source, spec.target_column)


def load_dataset(spec: DatasetSpec) -> Splits:
    """Seeded shuffle into disjoint train/attacker/objective/constraint/test splits.

    Features are standardized per feature with statistics computed on the
    defender's training split only.
    """
    x, y = _raw_data(spec)
    total = sum(spec.split_sizes)
    if total > x.shape[0]:
        raise SizeOverflow(
            f"split sizes sum to {total} but the dataset has {x.shape[0]} rows")
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(x.shape[0])
    names = ("train", "attacker", "objective", "constraint", "test")
    indices: dict[str, np.ndarray] = {}
    start = 0
    for name, size in zip(names, spec.split_sizes):
        indices[name] = perm[start:start + size]
        start += size
    mean = x[indices["train"]].mean(axis=0)
    scale = x[indices["train"]].std(axis=0)
    scale = np.where(scale < 1e-12, 1.0, scale)
    xs = (x - mean) / scale
    return Splits(
        x_train=xs[indices["train"]],
        y_train=y[indices["train"]],
        x_attacker=xs[indices["attacker"]],
        x_objective=xs[indices["objective"]],
        x_constraint=xs[indices["constraint"]],
        x_test=xs[indices["test"]],
        y_test=y[indices["test"]],
        indices=indices,
        feature_mean=mean,
        feature_scale=scale,
    )


# ---------------------------------------------------------------------------
# shifts and the rounding baseline


@dataclass(frozen=True)
class ShiftConfig:
    """Attacker queries are moved by d_mu on every feature plus N(0, sigma^2) noise."""

    d_mu: float = 0.0
    sigma: float = 0.2

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


def shift_attacker(samples: np.ndarray, cfg: ShiftConfig, seed: int) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    rng = np.random.default_rng(seed)
    noise = rng.normal(cfg.d_mu, cfg.sigma, size=samples.shape) if cfg.sigma > 0 \
        else np.full(samples.shape, cfg.d_mu)
    return samples + noise


def rounding_defense(value, decimals: int = 0):
    """Round half away from zero to the given number of decimals."""
    value = np.asarray(value, dtype=np.float64)
    factor = 10.0 ** decimals
    rounded = np.copysign(np.floor(np.abs(value) * factor + 0.5), value) / factor
    return rounded if rounded.ndim else float(rounded)


# ---------------------------------------------------------------------------
# kernel defense protocol


@dataclass(frozen=True)
class DefenseConfig:
    """Kernel defense settings for sweep and generalization runs."""

    defender_kernel: KernelSpec = KernelSpec.rbf(0.05)
    attacker_kernel: KernelSpec = KernelSpec.rbf(0.05)
    lam: float = 1.0
    eps: float = 0.1
    ridge: float = 1e-3
    rounding_decimals: int = 0
    solve_options: SolveOptions = field(default_factory=SolveOptions)


@dataclass
class KernelTrialResult:
    """Everything one defense trial produced, for metrics and reuse."""

    theta_star: np.ndarray
    theta_opt: np.ndarray
    solution: qcqp.QcqpSolution
    x_attacker: np.ndarray
    metrics: dict


def _mse(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean((np.asarray(pred) - np.asarray(truth)) ** 2))


def run_kernel_defense_trial(splits: Splits, shift_cfg: ShiftConfig,
                             defense: DefenseConfig, noise_seed: int) -> KernelTrialResult:
    """Fit the true model, solve the defense, and simulate all attackers once."""
    k_def, k_att = defense.defender_kernel, defense.attacker_kernel
    k_train = gram(k_def, splits.x_train, splits.x_train)
    theta_star = krr_fit(k_train, defense.ridge, splits.y_train)

    x_att = shift_attacker(splits.x_attacker, shift_cfg, noise_seed)
    k_obj_train = gram(k_def, splits.x_objective, splits.x_train)
    k_con_train = gram(k_def, splits.x_constraint, splits.x_train)
    f1 = k_obj_train @ theta_star
    f2 = k_con_train @ theta_star
    gram_set = assemble_gram_set(k_att, k_def, x_att, splits.x_train,
                                 splits.x_objective, splits.x_constraint, f1, f2)
    instance = qcqp.assemble_qcqp(gram_set, defense.lam, defense.eps)
    solution = qcqp.solve(instance, defense.solve_options)
    theta_opt = solution.theta_opt

    w_surrogate = krr_attack(gram_set, defense.lam, theta_opt)
    w_true = krr_attack(gram_set, defense.lam, theta_star)
    f_at_queries = gram(k_def, x_att, splits.x_train) @ theta_star
    w_round = krr_fit(gram_set.K1, defense.lam,
                      rounding_defense(f_at_queries, defense.rounding_decimals))

    k_test_train = gram(k_def, splits.x_test, splits.x_train)
    k_test_att = gram(k_att, splits.x_test, x_att)
    y = splits.y_test
    f_test = k_test_train @ theta_star
    metrics = {
        "mse_f": _mse(f_test, y),
        "mse_g_opt": _mse(k_test_train @ theta_opt, y),
        "mse_h_surrogate": _mse(k_test_att @ w_surrogate, y),
        "mse_h_true": _mse(k_test_att @ w_true, y),
        "mse_g_round": _mse(rounding_defense(f_test, defense.rounding_decimals), y),
        "mse_h_round": _mse(k_test_att @ w_round, y),
        "constraint_value": solution.constraint_value,
        "objective_value": solution.objective,
        "solver_path": solution.path,
    }
    return KernelTrialResult(theta_star=theta_star, theta_opt=theta_opt,
                             solution=solution, x_attacker=x_att, metrics=metrics)


# ---------------------------------------------------------------------------
# reports


@dataclass
class DefenseReport:
    """Per-trial records for one sweep point plus aggregate statistics."""

    run_id: str
    label: str
    records: list[dict] = field(default_factory=list)

    def metric(self, name: str) -> np.ndarray:
        return np.asarray([r[name] for r in self.records], dtype=np.float64)

    def median(self, name: str) -> float:
        return float(np.median(self.metric(name)))

    def mean(self, name: str) -> float:
        return float(np.mean(self.metric(name)))

    def std(self, name: str) -> float:
        return float(np.std(self.metric(name)))

    def summary(self, names: tuple[str, ...]) -> dict:
        return {name: {"median": self.median(name), "mean": self.mean(name),
                       "std": self.std(name)} for name in names}


SWEEP_METRICS = ("mse_f", "mse_g_opt", "mse_h_surrogate", "mse_h_true",
                 "mse_g_round", "mse_h_round")


def _trial_seeds(base_seed: int, count: int) -> np.ndarray:
    return np.random.SeedSequence(base_seed).generate_state(count, dtype=np.uint32)


def run_shift_sweep(spec: DatasetSpec, shift_grid, defense: DefenseConfig,
                    trials: int, sigma: float = 0.2, run_id: str | None = None,
                    timings: bool = False) -> list[DefenseReport]:
    """One DefenseReport per shift magnitude, ``trials`` reshuffled trials each."""
    shift_grid = [float(d) for d in shift_grid]
    run_id = run_id if run_id is not None else f"sweep-{spec.seed}"
    seeds = _trial_seeds(spec.seed, 2 * len(shift_grid) * trials)
    reports: list[DefenseReport] = []
    pos = 0
    for d_mu in shift_grid:
        report = DefenseReport(run_id=run_id, label=f"d_mu={d_mu:g}")
        for trial in range(trials):
            shuffle_seed = int(seeds[pos])
            noise_seed = int(seeds[pos + 1])
            pos += 2
            splits = load_dataset(replace(spec, seed=shuffle_seed))
            started = time.perf_counter()
            result = run_kernel_defense_trial(
                splits, ShiftConfig(d_mu=d_mu, sigma=sigma), defense, noise_seed)
            elapsed_ms = (time.perf_counter() - started) * 1e3
            report.records.append({
                "run_id": run_id,
                "trial": trial,
                "d_mu": d_mu,
                **result.metrics,
                "wall_time_ms": round(elapsed_ms, 3) if timings else None,
            })
        reports.append(report)
    return reports


def run_generalization(spec: DatasetSpec, shift_cfg: ShiftConfig,
                       defense: DefenseConfig, new_query_trials: int,
                       run_id: str | None = None,
                       timings: bool = False) -> DefenseReport:
    """Fix one solved surrogate and re-attack it with freshly drawn queries.

    New queries re-noise the same base attacker rows from the same shifted
    distribution; the attacker refits against the fixed surrogate's outputs
    each trial.
    """
    run_id = run_id if run_id is not None else f"generalize-{spec.seed}"
    seeds = _trial_seeds(spec.seed, 2 + new_query_trials)
    splits = load_dataset(replace(spec, seed=int(seeds[0])))
    base = run_kernel_defense_trial(splits, shift_cfg, defense, int(seeds[1]))
    report = DefenseReport(run_id=run_id, label=f"d_mu={shift_cfg.d_mu:g}")
    k_def, k_att = defense.defender_kernel, defense.attacker_kernel
    for trial in range(new_query_trials):
        started = time.perf_counter()
        x_new = shift_attacker(splits.x_attacker, shift_cfg, int(seeds[2 + trial]))
        k1_new = gram(k_att, x_new, x_new)
        supervision = gram(k_def, x_new, splits.x_train) @ base.theta_opt
        w_new = krr_fit(k1_new, defense.lam, supervision)
        pred = gram(k_att, splits.x_test, x_new) @ w_new
        elapsed_ms = (time.perf_counter() - started) * 1e3
        report.records.append({
            "run_id": run_id,
            "trial": trial,
            "d_mu": shift_cfg.d_mu,
            "mse_h_new_queries": _mse(pred, splits.y_test),
            "mse_h_original": base.metrics["mse_h_surrogate"],
            "wall_time_ms": round(elapsed_ms, 3) if timings else None,
        })
    return report


# ---------------------------------------------------------------------------
# differentiable-model protocol (label-partitioned classification)


@dataclass(frozen=True)
class SgdExperimentConfig:
    """Desk-scale analog of the label-partitioned classification experiment.

    A seeded random Fourier feature map stands in for a pretrained network
    body; only the final linear layer is trainable on either side. Targets
    are one-hot with squared loss.
    """

    defender_labels: tuple[int, ...] = (0, 1, 2)
    attacker_label_sets: tuple[tuple[int, ...], ...] = ((0, 1, 2), (1, 2, 3), (7, 8, 9))
    n_classes: int = 10
    feature_dim: int = 32
    rff_gamma: float = 0.25
    feature_amplitude: float = 6.0
    eps: float = 1.0
    lambda_c: float = 0.1
    beta: float = 0.3
    eta: float = 0.01
    attacker_steps: int = 15
    outer_steps: int = 15
    batch_size: int = 64
    n_pretrain: int = 400
    fit_ridge: float = 1e-2


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _ridge_head_fit(phi: np.ndarray, targets: np.ndarray, ridge: float) -> np.ndarray:
    w = np.linalg.solve(phi.T @ phi + ridge * np.eye(phi.shape[1]), phi.T @ targets)
    return w.T.ravel()  # (k, p) row-major, matching LinearHead's layout


def run_sgd_experiment(spec: DatasetSpec, cfg: SgdExperimentConfig,
                       run_id: str | None = None,
                       timings: bool = False) -> DefenseReport:
    """Train f on defender labels, defend with barrier ascent, report accuracy
    of the four tracked models per attacker label set."""
    run_id = run_id if run_id is not None else f"sgd-exp-{spec.seed}"
    x, labels = _raw_data(spec)
    if spec.source == "synthetic":
        raise ValueError("the sgd experiment needs labeled data "
                         "(synthetic-clusters or a CSV with integer targets)")
    labels = labels.astype(np.int64)
    rng = np.random.default_rng(spec.seed)

    defender_mask = np.isin(labels, cfg.defender_labels)
    defender_pool = rng.permutation(np.nonzero(defender_mask)[0])
    pretrain_pool = rng.permutation(x.shape[0])[:cfg.n_pretrain]

    sizes = (spec.n_train, spec.n_objective, spec.n_constraint, spec.n_test)
    if sum(sizes) > defender_pool.shape[0]:
        raise SizeOverflow(
            f"defender pool has {defender_pool.shape[0]} rows, need {sum(sizes)}")
    bounds = np.cumsum((0,) + sizes)
    idx_train, idx_obj, idx_con, idx_test = (
        defender_pool[bounds[i]:bounds[i + 1]] for i in range(4))

    mean = x[idx_train].mean(axis=0)
    scale = np.where(x[idx_train].std(axis=0) < 1e-12, 1.0, x[idx_train].std(axis=0))
    xs = (x - mean) / scale

    n_feat = x.shape[1]
    surrogate = LinearHead(
        RandomFourierFeatures(n_feat, cfg.feature_dim, cfg.rff_gamma,
                              seed=spec.seed, amplitude=cfg.feature_amplitude),
        n_outputs=cfg.n_classes)
    attacker_head = LinearHead(
        RandomFourierFeatures(n_feat, cfg.feature_dim, cfg.rff_gamma,
                              seed=spec.seed + 1, amplitude=cfg.feature_amplitude),
        n_outputs=cfg.n_classes)

    theta_star = _ridge_head_fit(surrogate.features(xs[idx_train]),
                                 _one_hot(labels[idx_train], cfg.n_classes),
                                 cfg.fit_ridge)
    w0 = _ridge_head_fit(attacker_head.features(xs[pretrain_pool]),
                         _one_hot(labels[pretrain_pool], cfg.n_classes),
                         cfg.fit_ridge)

    f_obj = surrogate.predict(theta_star, xs[idx_obj])
    f_con = surrogate.predict(theta_star, xs[idx_con])
    x_test, y_test = xs[idx_test], labels[idx_test]
    onehot_test = _one_hot(y_test, cfg.n_classes)

    def eval_model(head: LinearHead, params: np.ndarray) -> tuple[float, float]:
        pred = head.predict(params, x_test)
        accuracy = float(np.mean(np.argmax(pred, axis=1) == y_test))
        return accuracy, _mse(pred, onehot_test)

    report = DefenseReport(run_id=run_id, label="label-partition")
    n_att_needed = cfg.attacker_steps * cfg.batch_size
    for setting, att_labels in enumerate(cfg.attacker_label_sets):
        att_pool = np.nonzero(np.isin(labels, att_labels))[0]
        pool_rng = np.random.default_rng(spec.seed + 101 + setting)
        if att_pool.shape[0] < cfg.batch_size:
            raise SizeOverflow(f"attacker pool for labels {att_labels} too small")
        take = min(att_pool.shape[0], n_att_needed)
        x_att = xs[pool_rng.permutation(att_pool)[:take]]
        batches = make_batches(take, cfg.batch_size, cfg.attacker_steps,
                               seed=spec.seed + 301 + setting)
        attacker = UnrolledAttacker(
            model=attacker_head, w0=w0,
            learning_rates=(cfg.eta,) * cfg.attacker_steps,
            minibatches=batches, samples=x_att, surrogate=surrogate)
        obj_batches = make_batches(idx_obj.shape[0],
                                   min(cfg.batch_size, idx_obj.shape[0]),
                                   cfg.outer_steps, seed=spec.seed + 501 + setting)
        data = DefenseData(x_obj=xs[idx_obj], f_obj=f_obj,
                           x_con=xs[idx_con], f_con=f_con,
                           objective_batches=obj_batches)
        barrier = BarrierConfig.uniform(cfg.lambda_c, cfg.eps, cfg.beta,
                                        cfg.outer_steps)
        started = time.perf_counter()
        theta_opt, trace = sga_defend(surrogate, attacker, barrier, data, theta_star)
        elapsed_ms = (time.perf_counter() - started) * 1e3

        w_vs_surrogate = unroll(attacker, theta_opt).w
        w_vs_true = unroll(attacker, theta_star).w
        acc_f, mse_f = eval_model(surrogate, theta_star)
        acc_g, mse_g = eval_model(surrogate, theta_opt)
        acc_hs, mse_hs = eval_model(attacker_head, w_vs_surrogate)
        acc_ht, mse_ht = eval_model(attacker_head, w_vs_true)
        report.records.append({
            "run_id": run_id,
            "trial": setting,
            "labels": "-".join(str(c) for c in att_labels),
            "acc_f": acc_f, "acc_g_opt": acc_g,
            "acc_h_surrogate": acc_hs, "acc_h_true": acc_ht,
            "mse_f": mse_f, "mse_g_opt": mse_g,
            "mse_h_surrogate": mse_hs, "mse_h_true": mse_ht,
            "constraint_value": constraint_loss(surrogate, theta_opt,
                                                xs[idx_con], f_con),
            "feasible_iterations": sum(r.constraint_after < cfg.eps for r in trace),
            "outer_steps": len(trace),
            "wall_time_ms": round(elapsed_ms, 3) if timings else None,
        })
    return report


# ---------------------------------------------------------------------------
# report files


def write_jsonl(path: str, header: dict, records) -> None:
    """JSON-lines report: one header record then one record per trial."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"record": "header", **header}, sort_keys=True) + "\n")
        for record in records:
            fh.write(json.dumps({"record": "trial", **record}, sort_keys=True) + "\n")


def write_csv_summary(path: str, reports: list[DefenseReport],
                      metrics: tuple[str, ...] = SWEEP_METRICS) -> None:
    """One row of medians per report label."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"median_{m}" for m in metrics])
        for report in reports:
            writer.writerow([report.label] + [f"{report.median(m):.10g}"
                                              for m in metrics])
