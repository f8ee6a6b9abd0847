"""Episodic meta-training, early stopping, sweeps, and per-task certification.

Training loops over tasks in a seeded-shuffled order; each visit splits the
task into support and query halves, runs the hypernetwork on the support set,
and takes one Adam step on the query surrogate loss (binary cross-entropy).
Validation 0-1 error is tracked every epoch with the message noise forced to
zero, and the returned parameters are those of the best validation epoch.

Certification consumes a *test* task only: the full sample goes through the
hypernetwork, the empirical loss is measured on the complement of the
compression set, and the architecture-appropriate certificates are computed.
The meta-training collection is never an input to certification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import bounds
from .autodiff import Tensor
from .hypernet import (CompressionArtifacts, HypernetConfig, HypernetParams,
                       decode_gamma, downstream_forward, downstream_shapes,
                       hypernet_forward, init_hypernet_params)
from .optim import Adam
from .rng import Rng
from .tasks import TaskDataset


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainProtocol:
    support_size: int
    learning_rate: float = 1e-4
    max_epochs: int = 200
    patience: int = 20
    n_mc: int = 100

    def __post_init__(self):
        if self.support_size < 1:
            raise ValueError("support_size must be >= 1")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError("need 1 <= patience <= max_epochs")
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_error: float


@dataclass
class TrainingLog:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_val_error: float = math.inf
    stopped_early: bool = False


@dataclass(frozen=True)
class CertEntry:
    kind: str
    certificate: bounds.Certificate
    emp_loss: float          # the empirical loss fed to the bound
    emp_loss_kind: str       # "zero_one" or "linear"
    mc_stderr: float | None  # standard error of the MC estimate, if any

    @property
    def tau_star(self) -> float:
        return self.certificate.tau_star


@dataclass
class CertRow:
    task_id: int
    architecture: str
    m_prime: int
    c_effective: int
    b: int
    emp_complement_01: float
    emp_complement_linear: float
    test_query_error: float
    certificates: list[CertEntry]
    indices: tuple[int, ...] = ()
    # message actually decoded: omega for SCH_PLUS, the one posterior draw
    # behind the disintegrated certificate for PBSCH, else None
    sampled_message: np.ndarray | None = None


def split_support_query(task: TaskDataset, support_size: int,
                        rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Seeded uniform split into disjoint, exhaustive index sets."""
    m = len(task)
    if not 1 <= support_size < m:
        raise ValueError(f"support_size must be in [1, {m - 1}], got {support_size}")
    perm = rng.permutation(m)
    return perm[:support_size], perm[support_size:]


def _task_logits(params: HypernetParams, cfg: HypernetConfig, sup_x, sup_y,
                 eval_x, rng: Rng | None = None,
                 eps=None) -> tuple[Tensor, CompressionArtifacts]:
    gamma, artifacts = hypernet_forward(params, cfg, sup_x, sup_y, rng=rng, eps=eps)
    logits = downstream_forward(gamma, artifacts.mlp3_shapes, ad.constant(eval_x))
    return logits, artifacts


def _zero_eps(cfg: HypernetConfig) -> np.ndarray | None:
    return np.zeros(cfg.b) if cfg.has_gaussian_message else None


def _validation_error(params, cfg, protocol, tasks, rng: Rng) -> float:
    """Mean query 0-1 error over the validation tasks, message noise at zero."""
    errs = []
    for pos, task in enumerate(tasks):
        sup, qry = split_support_query(task, protocol.support_size, rng.split(pos))
        logits, _ = _task_logits(params, cfg, task.features[sup], task.labels[sup],
                                 task.features[qry], eps=_zero_eps(cfg))
        errs.append(ad.zero_one_loss(logits.data, task.labels[qry]))
    return float(np.mean(errs))


def meta_train(train_tasks: list[TaskDataset], val_tasks: list[TaskDataset],
               cfg: HypernetConfig, protocol: TrainProtocol,
               rng: Rng) -> tuple[HypernetParams, TrainingLog]:
    """Train the hypernetwork; returns the best-validation-epoch parameters."""
    if not train_tasks or not val_tasks:
        raise ValueError("need at least one training task and one validation task")
    min_size = min(len(t) for t in train_tasks)
    if protocol.support_size >= min_size:
        raise ValueError(f"support_size {protocol.support_size} must be < "
                         f"smallest task size {min_size}")
    params = init_hypernet_params(cfg, rng.split(0))
    optimizer = Adam(params.tensors, lr=protocol.learning_rate)
    log = TrainingLog()
    best_snapshot = params.snapshot()
    for epoch in range(protocol.max_epochs):
        order = rng.split(1, epoch).permutation(len(train_tasks))
        losses = []
        for task_pos in order:
            task = train_tasks[int(task_pos)]
            visit = rng.split(2, epoch, int(task_pos))
            sup, qry = split_support_query(task, protocol.support_size, visit.split(0))
            try:
                logits, _ = _task_logits(params, cfg, task.features[sup],
                                         task.labels[sup], task.features[qry],
                                         rng=visit.split(1))
            except ValueError as exc:
                if "NaN" not in str(exc):
                    raise
                raise TrainingDivergedError(
                    f"non-finite forward pass at epoch {epoch}, "
                    f"task {task.task_id}: {exc}") from exc
            loss = ad.binary_cross_entropy(logits, task.labels[qry])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, task {task.task_id}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(value)
        val_error = _validation_error(params, cfg, protocol, val_tasks, rng.split(3))
        log.epochs.append(EpochStats(epoch, float(np.mean(losses)), val_error))
        if val_error < log.best_val_error:
            log.best_val_error = val_error
            log.best_epoch = epoch
            best_snapshot = params.snapshot()
        elif epoch - log.best_epoch >= protocol.patience:
            log.stopped_early = True
            break
    params.load_snapshot(best_snapshot)
    return params, log


# ---------------------------------------------------------------------------
# certification


def _complement_indices(m: int, indices) -> np.ndarray:
    mask = np.ones(m, dtype=bool)
    if len(indices) > 0:
        mask[np.asarray(indices, dtype=np.intp)] = False
    return np.nonzero(mask)[0]


def _loss_of_kind(logits: np.ndarray, labels: np.ndarray, kind: str) -> float:
    if kind == "zero_one":
        return ad.zero_one_loss(logits, labels)
    if kind == "linear":
        return ad.linear_loss(logits, labels)
    raise ValueError(f"unknown loss kind {kind!r}")


def _decoded_loss(params, cfg, task: TaskDataset, artifacts: CompressionArtifacts,
                  message: np.ndarray | None, comp: np.ndarray, kind: str) -> float:
    gamma = decode_gamma(params, cfg, task.features, task.labels,
                         artifacts.indices, message)
    logits = downstream_forward(gamma, artifacts.mlp3_shapes,
                                ad.constant(task.features[comp]))
    return _loss_of_kind(logits.data, task.labels[comp], kind)


def mc_expected_loss(params: HypernetParams, cfg: HypernetConfig, task: TaskDataset,
                     artifacts: CompressionArtifacts, n_mc: int, rng: Rng,
                     loss_kind: str = "zero_one") -> tuple[float, float]:
    """Monte-Carlo estimate of the message-posterior expected complement loss.

    Draws n_mc messages from N(mu, I), decodes each, and averages the chosen
    loss over the complement set.  Returns (mean, standard error).
    """
    if artifacts.gaussian_mean is None:
        raise ValueError("mc_expected_loss needs a Gaussian message bottleneck")
    comp = _complement_indices(len(task), artifacts.indices)
    draws = np.empty(n_mc)
    for i in range(n_mc):
        message = artifacts.gaussian_mean + rng.normal(cfg.b)
        draws[i] = _decoded_loss(params, cfg, task, artifacts, message, comp, loss_kind)
    stderr = float(draws.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else 0.0
    return float(draws.mean()), stderr


def certify_task(params: HypernetParams, cfg: HypernetConfig, task: TaskDataset,
                 delta: float, rng: Rng, n_mc: int = 100,
                 loss_kind: str = "zero_one") -> CertRow:
    """Certify the predictor the hypernetwork emits for one fresh task.

    The full task sample feeds the bottleneck; empirical losses are measured
    on the complement of the compression set.  ``loss_kind`` selects the loss
    certified by the expectation-type (Gaussian-message) bounds; the sample
    compression architectures always emit both the binomial 0-1 certificate
    and the kl certificate on the linear loss.
    """
    m = len(task)
    if m <= cfg.c:
        raise ValueError(f"task size {m} must exceed compression size {cfg.c}")
    gamma, artifacts = hypernet_forward(params, cfg, task.features, task.labels,
                                        eps=_zero_eps(cfg))
    comp = _complement_indices(m, artifacts.indices)
    logits = downstream_forward(gamma, artifacts.mlp3_shapes,
                                ad.constant(task.features)).data.reshape(-1)
    emp_01 = ad.zero_one_loss(logits[comp], task.labels[comp])
    emp_lin = ad.linear_loss(logits[comp], task.labels[comp])
    c_eff = artifacts.c_effective
    n_comp = m - c_eff

    entries: list[CertEntry] = []
    sampled_message = None
    if cfg.architecture in ("SCH_MINUS", "SCH_PLUS"):
        sampled_message = artifacts.binary_message
        K = int(round(emp_01 * n_comp))
        budget01 = bounds.BoundBudget(m, c_eff, cfg.b, delta, emp_loss=emp_01)
        entries.append(CertEntry("SCH_BINARY", bounds.bound_sch_binary(budget01, K),
                                 emp_01, "zero_one", None))
        budget_lin = bounds.BoundBudget(m, c_eff, cfg.b, delta, emp_loss=emp_lin)
        entries.append(CertEntry("SCH_REAL", bounds.bound_sch_real(budget_lin),
                                 emp_lin, "linear", None))
    elif cfg.architecture == "PBH":
        mu_sq = float(artifacts.gaussian_mean @ artifacts.gaussian_mean)
        mc_mean, mc_se = mc_expected_loss(params, cfg, task, artifacts, n_mc,
                                          rng.split(1), loss_kind)
        budget = bounds.BoundBudget(m, 0, cfg.b, delta, emp_loss=mc_mean,
                                    mu_norm_sq=mu_sq)
        entries.append(CertEntry("PB", bounds.bound_pb(budget),
                                 mc_mean, loss_kind, mc_se))
    elif cfg.architecture == "PBSCH":
        mu_sq = float(artifacts.gaussian_mean @ artifacts.gaussian_mean)
        mc_mean, mc_se = mc_expected_loss(params, cfg, task, artifacts, n_mc,
                                          rng.split(1), loss_kind)
        budget = bounds.BoundBudget(m, c_eff, cfg.b, delta, emp_loss=mc_mean,
                                    mu_norm_sq=mu_sq)
        entries.append(CertEntry("PBSCH", bounds.bound_pbsch(budget),
                                 mc_mean, loss_kind, mc_se))
        # disintegrated variant: one message sampled from the posterior
        omega = artifacts.gaussian_mean + rng.split(2).normal(cfg.b)
        sampled_message = omega
        emp_star = _decoded_loss(params, cfg, task, artifacts, omega, comp, loss_kind)
        budget_star = bounds.BoundBudget(m, c_eff, cfg.b, delta, emp_loss=emp_star,
                                         mu_norm_sq=mu_sq)
        entries.append(CertEntry("PBSCH_DISINTEGRATED",
                                 bounds.bound_pbsch_disintegrated(budget_star),
                                 emp_star, loss_kind, None))

    # plain support/query test error, for table parity with meta-test usage
    sup, qry = split_support_query(task, m // 2, rng.split(0))
    q_logits, _ = _task_logits(params, cfg, task.features[sup], task.labels[sup],
                               task.features[qry], eps=_zero_eps(cfg))
    test_query_error = ad.zero_one_loss(q_logits.data, task.labels[qry])

    return CertRow(task.task_id, cfg.architecture, m, c_eff, cfg.b,
                   emp_01, emp_lin, test_query_error, entries,
                   indices=artifacts.indices, sampled_message=sampled_message)


# ---------------------------------------------------------------------------
# hyperparameter sweep


@dataclass
class SweepRow:
    learning_rate: float
    mlp1: tuple[int, ...]
    mlp2: tuple[int, ...]
    mlp3: tuple[int, ...]
    c: int
    b: int
    val_error: float | None
    best_epoch: int | None
    skipped: str | None = None


# Default grid, matching the published hyperparameter search space.
DEFAULT_GRID = {
    "learning_rate": [1e-3, 1e-4],
    "mlp1": [(200, 200), (500, 500)],
    "mlp2": [(100,), (200,)],
    "mlp3": [(100,), (200, 200)],
    "c": [0, 1, 2, 4, 6, 8],
    "b": [0, 1, 2, 4, 8, 16, 32, 64, 128],
}


def sweep(train_tasks, val_tasks, architecture: str, protocol: TrainProtocol,
          rng: Rng, grid: dict | None = None, input_dim: int = 2,
          log_fn=None) -> tuple[SweepRow | None, list[SweepRow]]:
    """Train every valid grid point; select by validation error.

    Invalid architecture/size combinations are skipped and recorded.  Ties
    break toward the smaller compression set, then the smaller message.
    """
    grid = {**DEFAULT_GRID, **(grid or {})}
    rows: list[SweepRow] = []
    point = 0
    for lr in grid["learning_rate"]:
        for mlp1 in grid["mlp1"]:
            for mlp2 in grid["mlp2"]:
                for mlp3 in grid["mlp3"]:
                    for c in grid["c"]:
                        for b in grid["b"]:
                            point += 1
                            try:
                                cfg = HypernetConfig(architecture, c=c, b=b,
                                                     input_dim=input_dim,
                                                     mlp1=tuple(mlp1), mlp2=tuple(mlp2),
                                                     mlp3=tuple(mlp3))
                            except ValueError as exc:
                                rows.append(SweepRow(lr, tuple(mlp1), tuple(mlp2),
                                                     tuple(mlp3), c, b, None, None,
                                                     skipped=str(exc)))
                                if log_fn:
                                    log_fn(f"skip point {point}: {exc}")
                                continue
                            run_protocol = TrainProtocol(
                                support_size=protocol.support_size,
                                learning_rate=lr,
                                max_epochs=protocol.max_epochs,
                                patience=protocol.patience,
                                n_mc=protocol.n_mc)
                            _, log = meta_train(train_tasks, val_tasks, cfg,
                                                run_protocol, rng.split(point))
                            rows.append(SweepRow(lr, tuple(mlp1), tuple(mlp2),
                                                 tuple(mlp3), c, b,
                                                 log.best_val_error, log.best_epoch))
                            if log_fn:
                                log_fn(f"point {point}: c={c} b={b} lr={lr} "
                                       f"val_error={log.best_val_error:.4f}")
    return select_best(rows), rows


def select_best(rows: list[SweepRow]) -> SweepRow | None:
    """Lowest validation error; ties prefer smaller c, then smaller b."""
    trained = [r for r in rows if r.skipped is None]
    return min(trained, key=lambda r: (r.val_error, r.c, r.b), default=None)
