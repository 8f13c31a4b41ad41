"""Training loop, metrics, cross-validation driver, and hyperparameter search.

The model trains with MSE on z-scored labels (scaler fitted on the training
split only) using Adam, shuffling per epoch and early-stopping on
validation RMSE.  Reported metrics are always computed on de-normalized
predictions, so RMSE stays in log S units.

Cross-validation instruments which dataset indices reach gradient steps
and the scaler fit, so leakage is asserted rather than assumed.  The
hyperparameter search draws random configurations from the published
search space; a failed trial is logged and skipped, never fatal.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SplitRng, Tape
from .data import Dataset, LabelScaler, FoldPlan
from .featurize import MoleculeGraph, build_graph
from .model import Batch, ModelConfig, ModelParams, make_batch, model_forward
from .smiles import parse

__all__ = [
    "LengthMismatch",
    "EmptyInput",
    "ConstantTarget",
    "NonFiniteLoss",
    "Metrics",
    "TrainConfig",
    "TrainHistory",
    "TrainAudit",
    "TrainResult",
    "CVResult",
    "EvalReport",
    "rmse",
    "r2",
    "Adam",
    "graphs_from_dataset",
    "predict",
    "train_one",
    "cross_validate",
    "SEARCH_SPACE",
    "sample_trial_config",
    "search_hparams",
    "evaluate",
]


class LengthMismatch(ValueError):
    def __init__(self, n: int, m: int):
        super().__init__(f"input lengths differ: {n} vs {m}")


class EmptyInput(ValueError):
    def __init__(self, what: str):
        super().__init__(f"{what} requires at least one value")


class ConstantTarget(ValueError):
    def __init__(self) -> None:
        super().__init__("R^2 is undefined for a constant target (zero total sum of squares)")


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(
            f"loss became non-finite ({value}) at epoch {epoch}, batch {batch}; "
            "try a lower learning rate"
        )
        self.epoch = epoch
        self.batch = batch


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    r2: float
    rmse: float
    n: int


def rmse(y, y_hat) -> float:
    """Root mean squared error: sqrt(mean((y - y_hat)^2))."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise LengthMismatch(y.size, y_hat.size)
    if y.size == 0:
        raise EmptyInput("rmse")
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def r2(y, y_hat) -> float:
    """Coefficient of determination: 1 - SSres/SStot."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise LengthMismatch(y.size, y_hat.size)
    if y.size == 0:
        raise EmptyInput("r2")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ConstantTarget()
    ss_res = float(np.sum((y - y_hat) ** 2))
    return 1.0 - ss_res / ss_tot


def compute_metrics(y, y_hat) -> Metrics:
    return Metrics(r2=r2(y, y_hat), rmse=rmse(y, y_hat), n=int(np.size(y)))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment estimation; decay 0.9/0.999, epsilon 1e-8, no weight decay.

    Updates the parameter arrays in place.
    """

    def __init__(self, arrays: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.arrays = arrays
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self._v = {k: np.zeros_like(v) for k, v in arrays.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for key, grad in grads.items():
            if grad is None:
                continue
            grad = grad.astype(self.arrays[key].dtype, copy=False)
            m = self._m[key]
            v = self._v[key]
            m += (1.0 - self.beta1) * (grad - m)
            v += (1.0 - self.beta2) * (grad * grad - v)
            m_hat = m / correction1
            v_hat = v / correction2
            self.arrays[key] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Flat training configuration: schedule fields plus the model fields
    that the hyperparameter search samples."""

    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 300
    patience: int = 30
    seed: int = 0
    hidden_dim: int = 128
    transformer_depth: int = 6
    heads: int = 8
    mlp_dim: int = 256
    dropout: float = 0.2519

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            hidden_dim=self.hidden_dim,
            transformer_depth=self.transformer_depth,
            heads=self.heads,
            mlp_dim=self.mlp_dim,
            dropout=self.dropout,
            seed=self.seed,
        )


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_rmse: list[float] = field(default_factory=list)
    best_epoch: int = -1
    wall_time: float = 0.0


@dataclass
class TrainAudit:
    """Dataset indices that actually reached training machinery."""

    gradient_indices: set[int] = field(default_factory=set)
    scaler_indices: set[int] = field(default_factory=set)


@dataclass
class TrainResult:
    params: ModelParams
    scaler: LabelScaler
    history: TrainHistory
    audit: TrainAudit


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------

def graphs_from_dataset(dataset: Dataset) -> list[MoleculeGraph]:
    return [build_graph(parse(r.smiles), label=r.log_s) for r in dataset.records]


def predict(params: ModelParams, graphs: Sequence[MoleculeGraph],
            batch_size: int = 64) -> np.ndarray:
    """Evaluation-mode predictions in normalized label space, one per graph."""
    outputs = []
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start : start + batch_size]
        tape = Tape()
        batch = make_batch(chunk)
        out = model_forward(batch, params.wrap(tape), params.config, tape,
                          training=False)
        outputs.append(out.values.astype(np.float64))
    return np.concatenate(outputs) if outputs else np.zeros(0)


def _labels_of(graphs: Sequence[MoleculeGraph]) -> np.ndarray:
    labels = [g.label for g in graphs]
    if any(label is None for label in labels):
        raise ValueError("all graphs must carry labels for training/evaluation")
    return np.array(labels, dtype=np.float64)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_one(
    train_graphs: Sequence[MoleculeGraph],
    val_graphs: Sequence[MoleculeGraph],
    config: TrainConfig,
    train_ids: Sequence[int] | None = None,
    audit: TrainAudit | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train one model; returns the best-epoch weights by validation RMSE.

    ``train_ids`` (parallel to ``train_graphs``) feeds the leakage audit:
    every index whose molecule reaches a gradient step or the scaler fit is
    recorded in the returned audit.
    """
    if not train_graphs or not val_graphs:
        raise EmptyInput("train_one")
    started = time.monotonic()
    if train_ids is None:
        train_ids = list(range(len(train_graphs)))
    if audit is None:
        audit = TrainAudit()

    train_labels = _labels_of(train_graphs)
    val_labels = _labels_of(val_graphs)
    scaler = LabelScaler.fit(train_labels)
    audit.scaler_indices.update(int(train_ids[i]) for i in range(len(train_graphs)))
    normalized = scaler.apply(train_labels).astype(np.float32)

    params = ModelParams.init(config.model_config())
    optimizer = Adam(params.arrays, lr=config.lr)
    root_rng = SplitRng(config.seed)
    shuffle_rng = root_rng.split()
    dropout_rng = root_rng.split()

    history = TrainHistory()
    best_val = math.inf
    best_params = params.copy()
    since_best = 0

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_graphs))
        epoch_loss = 0.0
        for batch_no, start in enumerate(range(0, len(order), config.batch_size)):
            chosen = order[start : start + config.batch_size]
            audit.gradient_indices.update(int(train_ids[i]) for i in chosen)
            batch = make_batch([train_graphs[i] for i in chosen])
            tape = Tape()
            wrapped = params.wrap(tape)
            pred = model_forward(batch, wrapped, params.config, tape,
                               training=True, rng=dropout_rng)
            loss = ad.mse(pred, tape.tensor(normalized[chosen]))
            loss_value = float(loss.values)
            if not math.isfinite(loss_value):
                raise NonFiniteLoss(epoch, batch_no, loss_value)
            tape.backward(loss)
            optimizer.step({k: t.grad for k, t in wrapped.items()})
            epoch_loss += loss_value * len(chosen)
        history.train_loss.append(epoch_loss / len(train_graphs))

        val_pred = scaler.invert(predict(params, val_graphs))
        val_score = rmse(val_labels, val_pred)
        history.val_rmse.append(val_score)
        if log is not None:
            log(f"epoch {epoch}: train_loss={history.train_loss[-1]:.6f} "
                f"val_rmse={val_score:.6f}")

        if val_score < best_val:
            best_val = val_score
            best_params = params.copy()
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    history.wall_time = time.monotonic() - started
    return TrainResult(params=best_params, scaler=scaler, history=history,
                       audit=audit)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

@dataclass
class CVResult:
    per_fold: list[Metrics]
    mean_r2: float
    std_r2: float
    mean_rmse: float
    std_rmse: float
    audits: list[TrainAudit]


def _run_fold(graphs: Sequence[MoleculeGraph], plan: FoldPlan, fold: int,
              config: TrainConfig, log: Callable[[str], None] | None = None,
              ) -> tuple[Metrics, TrainAudit]:
    """Train on 9 folds (with a carved-out validation slice), test on one.

    The early-stopping validation set is 10% of the training folds, chosen
    by a seeded shuffle; the test fold touches nothing but final metrics.
    """
    test_idx = plan.test_indices(fold)
    train_idx = plan.train_indices(fold)
    carve_rng = SplitRng(config.seed).split_many(plan.k)[fold]
    order = carve_rng.permutation(len(train_idx))
    val_count = max(1, len(train_idx) // 10)
    val_idx = train_idx[order[:val_count]]
    fit_idx = train_idx[order[val_count:]]
    if len(fit_idx) == 0:
        fit_idx, val_idx = val_idx, val_idx

    result = train_one(
        [graphs[i] for i in fit_idx],
        [graphs[i] for i in val_idx],
        config,
        train_ids=fit_idx,
        log=log,
    )
    forbidden = set(int(i) for i in test_idx)
    touched = result.audit.gradient_indices | result.audit.scaler_indices
    if touched & forbidden:
        raise AssertionError(
            f"leakage: test-fold indices {sorted(touched & forbidden)} reached training"
        )
    preds = result.scaler.invert(predict(result.params, [graphs[i] for i in test_idx]))
    test_labels = np.array([graphs[i].label for i in test_idx], dtype=np.float64)
    return compute_metrics(test_labels, preds), result.audit


def cross_validate(graphs: Sequence[MoleculeGraph], plan: FoldPlan,
                   config: TrainConfig,
                   log: Callable[[str], None] | None = None,
                   workers: int = 1) -> CVResult:
    """Full k-fold protocol; aggregate = mean of per-fold metrics, not pooled.

    Folds are independent, so ``workers`` > 1 trains them in a thread pool;
    results are identical to the serial order because each fold is seeded
    on its own.
    """
    plan.validate()
    per_fold: list[Metrics] = []
    audits: list[TrainAudit] = []
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(
                lambda fold: _run_fold(graphs, plan, fold, config),
                range(plan.k)))
    else:
        outcomes = [_run_fold(graphs, plan, fold, config, log=log)
                    for fold in range(plan.k)]
    for fold, (metrics, audit) in enumerate(outcomes):
        per_fold.append(metrics)
        audits.append(audit)
        if log is not None:
            log(f"fold {fold}: r2={metrics.r2:.4f} rmse={metrics.rmse:.4f} "
                f"n={metrics.n}")
    r2s = np.array([m.r2 for m in per_fold])
    rmses = np.array([m.rmse for m in per_fold])
    return CVResult(
        per_fold=per_fold,
        mean_r2=float(r2s.mean()),
        std_r2=float(r2s.std()),
        mean_rmse=float(rmses.mean()),
        std_rmse=float(rmses.std()),
        audits=audits,
    )


# ---------------------------------------------------------------------------
# Hyperparameter search
# ---------------------------------------------------------------------------

# The published search space: continuous ranges sampled uniformly,
# quantized ranges on their grids, choices uniformly.
SEARCH_SPACE = {
    "lr": (3e-4, 7e-4),
    "hidden_dim": (92, 128, 2),
    "dropout": (0.25, 0.35),
    "transformer_depth": (2, 4, 6, 8, 12),
    "heads": (4, 8, 12, 16),
    "batch_size": (24, 72, 8),
}


def sample_trial_config(rng: SplitRng, base: TrainConfig) -> TrainConfig:
    """Draw one configuration from the search space.

    The width/heads pair is redrawn until the width divides evenly, so
    every trial is runnable.
    """
    lr = float(rng.uniform((), *SEARCH_SPACE["lr"]))
    drop = float(rng.uniform((), *SEARCH_SPACE["dropout"]))
    depth = int(rng.choice(SEARCH_SPACE["transformer_depth"]))
    lo, hi, step = SEARCH_SPACE["batch_size"]
    batch = int(rng.choice(range(lo, hi + 1, step)))
    while True:
        d_lo, d_hi, d_step = SEARCH_SPACE["hidden_dim"]
        dim = int(rng.choice(range(d_lo, d_hi + 1, d_step)))
        heads = int(rng.choice(SEARCH_SPACE["heads"]))
        if dim % heads == 0:
            break
    return replace(base, lr=lr, dropout=drop, transformer_depth=depth,
                   batch_size=batch, hidden_dim=dim, heads=heads)


def search_hparams(
    graphs: Sequence[MoleculeGraph],
    plan: FoldPlan,
    base: TrainConfig,
    trials: int = 200,
    folds_per_trial: int = 2,
    seed: int = 0,
    log: Callable[[str], None] | None = None,
) -> tuple[TrainConfig | None, list[dict]]:
    """Random search; each trial scored by abbreviated CV over a fold subset.

    Returns the best configuration (lowest mean RMSE; None if every trial
    failed) and the complete trial log.
    """
    rng = SplitRng(seed)
    folds_used = list(range(min(folds_per_trial, plan.k)))
    trial_log: list[dict] = []
    best_config: TrainConfig | None = None
    best_score = math.inf
    for trial in range(trials):
        config = sample_trial_config(rng, base)
        entry = {
            "trial": trial,
            "lr": config.lr,
            "hidden_dim": config.hidden_dim,
            "dropout": config.dropout,
            "transformer_depth": config.transformer_depth,
            "heads": config.heads,
            "batch_size": config.batch_size,
        }
        try:
            scores = [
                _run_fold(graphs, plan, fold, config)[0].rmse
                for fold in folds_used
            ]
            entry["mean_rmse"] = float(np.mean(scores))
            entry["status"] = "ok"
            if entry["mean_rmse"] < best_score:
                best_score = entry["mean_rmse"]
                best_config = config
        except Exception as exc:  # a failed trial must never abort the search
            entry["mean_rmse"] = math.nan
            entry["status"] = f"failed: {exc}"
        trial_log.append(entry)
        if log is not None:
            log(f"trial {trial}: {entry['status']} "
                f"mean_rmse={entry['mean_rmse']}")
    return best_config, trial_log


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    metrics: Metrics
    rows: list[tuple[str, float, float, float]]  # (smiles, y, y_hat, error)
    mean_error: float
    histogram_edges: np.ndarray
    histogram_counts: np.ndarray


def evaluate(params: ModelParams, scaler: LabelScaler,
             graphs: Sequence[MoleculeGraph]) -> EvalReport:
    """Metrics plus per-molecule rows and a 0.25-wide error histogram."""
    if not graphs:
        raise EmptyInput("evaluate")
    y = _labels_of(graphs)
    y_hat = scaler.invert(predict(params, graphs))
    errors = y_hat - y

    width = 0.25
    lo = math.floor(errors.min() / width) * width
    hi = math.ceil(errors.max() / width) * width
    if hi <= lo:
        hi = lo + width
    edges = np.arange(lo, hi + width / 2, width)
    counts, _ = np.histogram(errors, bins=edges)

    rows = [
        (g.source_smiles, float(a), float(b), float(e))
        for g, a, b, e in zip(graphs, y, y_hat, errors)
    ]
    return EvalReport(
        metrics=compute_metrics(y, y_hat),
        rows=rows,
        mean_error=float(errors.mean()),
        histogram_edges=edges,
        histogram_counts=counts,
    )
