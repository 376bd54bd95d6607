"""Label-smoothed cross-entropy training with Adam, plateau LR halving and
early stopping that restores the best-validation weights."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from msgl.autograd import functional as F
from msgl.autograd.random import RngStream
from msgl.autograd.tensor import Tensor, no_grad
from msgl.errors import ConfigurationError, UsageError
from msgl.model import ModelConfig, ModelParams, classify, init_params, predict, save_checkpoint
from msgl.preprocessing import WindowedDataset, batch_iter

logger = logging.getLogger(__name__)

# sub-stream tags derived from the training seed
_INIT_TAG, _SHUFFLE_TAG, _DROPOUT_TAG = 1, 2, 3

TRAIN_LOG_COLUMNS = ["epoch", "train_loss", "val_loss", "val_acc", "lr", "seconds"]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 32
    max_epochs: int = 50
    smoothing: float = 0.1
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    early_stop_patience: int = 25
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    min_lr: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigurationError(f"smoothing must be in [0, 1), got {self.smoothing}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigurationError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigurationError("patiences must be >= 1")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("lr, batch_size and max_epochs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**dict(doc))


# --------------------------------------------------------------------- loss

def label_smoothing_ce(logits, targets, smoothing: float = 0.1) -> Tensor:
    """Mean over the batch axis of -sum_c q_c log softmax(logits)_c.

    ``logits`` has shape (..., B, C) and ``targets`` shape (B,); the target
    distribution is q = (1 - smoothing) * onehot + smoothing / C. Any leading
    axes in front of the batch axis are kept.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim < 2:
        logits = F.reshape(logits, (1,) + logits.shape)
        targets = targets.reshape(1)
    C = logits.shape[-1]
    if targets.shape != (logits.shape[-2],):
        raise UsageError(f"expected {logits.shape[-2]} targets, got shape {targets.shape}")
    if not np.issubdtype(targets.dtype, np.integer) or targets.min(initial=0) < 0 or targets.max(initial=0) >= C:
        raise UsageError(f"targets must be integer class indices in [0, {C})")
    q = np.full((len(targets), C), smoothing / C)
    q[np.arange(len(targets)), targets] += 1.0 - smoothing
    per_sample = -(F.log_softmax(logits, axis=-1) * q).sum(axis=-1)
    return per_sample.mean(axis=-1)


# --------------------------------------------------------------------- Adam

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Union[ModelParams, Mapping[str, Tensor]]) -> "OptimizerState":
        items = params.items()
        return cls(
            m={n: np.zeros_like(p.data) for n, p in items},
            v={n: np.zeros_like(p.data) for n, p in params.items()},
        )


def adam_step(
    params: Union[ModelParams, Mapping[str, Tensor]],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update from the gradients stored on ``params``.

    Parameter arrays are rebound, never written in place, so snapshots taken
    earlier stay valid.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# --------------------------------------------------------------------- schedules

@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the monitored loss has
    failed to strictly improve for more than ``patience`` epochs in a row.
    The counter restarts after each reduction; there is no cooldown."""

    lr: float
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-6
    best: float = float("inf")
    counter: int = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.counter = 0
        else:
            self.counter += 1
            if self.counter > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.counter = 0
        return self.lr


@dataclass
class EarlyStopping:
    """Signal a stop on the first epoch that makes more than ``patience``
    consecutive epochs without a strict improvement of the best loss (the
    26th flat epoch for patience 25, counted like the plateau rule),
    remembering the best parameters."""

    patience: int = 25
    best: float = float("inf")
    best_epoch: int = 0
    counter: int = 0
    snapshot: Optional[dict[str, np.ndarray]] = None

    def step(self, val_loss: float, epoch: int, params: Optional[ModelParams] = None) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.counter = 0
            if params is not None:
                self.snapshot = params.snapshot()
        else:
            self.counter += 1
        return self.counter > self.patience


# --------------------------------------------------------------------- log

@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def deterministic_rows(self) -> list[tuple]:
        """Rows without the wall-clock column, for run-to-run comparison."""
        return [tuple(r[c] for c in TRAIN_LOG_COLUMNS if c != "seconds") for r in self.rows]

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAIN_LOG_COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in TRAIN_LOG_COLUMNS[1:]])


# --------------------------------------------------------------------- loop

def evaluate_loss(
    params: ModelParams, cfg: ModelConfig, ds: WindowedDataset, smoothing: float, batch_size: int = 256
) -> tuple[float, float]:
    """Eval-mode (mean smoothed CE, accuracy) over every window of ``ds``."""
    total, correct = 0.0, 0
    with no_grad():
        for X, y in batch_iter(ds, batch_size):
            logits = classify(params, cfg, X, training=False)
            total += float(label_smoothing_ce(logits, y, smoothing).item()) * len(y)
            correct += int((predict(logits) == y).sum())
    return total / len(ds), correct / len(ds)


def fit(
    cfg: ModelConfig,
    train_ds: WindowedDataset,
    val_ds: WindowedDataset,
    tcfg: TrainConfig = TrainConfig(),
    params: Optional[ModelParams] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> tuple[ModelParams, TrainLog]:
    """Train ``cfg`` on ``train_ds``, selecting the epoch with the lowest
    validation loss. Returns the restored best parameters and the epoch log.

    With ``out_dir`` set, ``best.ckpt``, ``last.ckpt`` and ``train_log.csv``
    are written there.
    """
    if len(train_ds) == 0:
        raise UsageError("training set is empty")
    if len(val_ds) == 0:
        raise UsageError("validation set is empty")
    root = RngStream(tcfg.seed)
    if params is None:
        params = init_params(cfg, root.child(_INIT_TAG))
    shuffle_rng = root.child(_SHUFFLE_TAG)
    dropout_rng = root.child(_DROPOUT_TAG)
    opt = OptimizerState.for_params(params)
    sched = PlateauScheduler(tcfg.lr, tcfg.plateau_factor, tcfg.plateau_patience, tcfg.min_lr)
    stopper = EarlyStopping(tcfg.early_stop_patience)
    log = TrainLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, tcfg.max_epochs + 1):
        started = time.perf_counter()
        lr = sched.lr
        loss_sum = 0.0
        for X, y in batch_iter(train_ds, tcfg.batch_size, shuffle=True, rng=shuffle_rng):
            params.zero_grad()
            logits = classify(params, cfg, X, training=True, rng=dropout_rng)
            loss = label_smoothing_ce(logits, y, tcfg.smoothing)
            loss.backward()
            adam_step(params, opt, lr, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
            loss_sum += float(loss.item()) * len(y)
        params.zero_grad()
        train_loss = loss_sum / len(train_ds)
        val_loss, val_acc = evaluate_loss(params, cfg, val_ds, tcfg.smoothing)
        log.append(
            epoch=epoch, train_loss=train_loss, val_loss=val_loss, val_acc=val_acc, lr=lr,
            seconds=time.perf_counter() - started,
        )
        logger.info("epoch %d train %.5f val %.5f acc %.4f lr %.2e", epoch, train_loss, val_loss, val_acc, lr)
        stop = stopper.step(val_loss, epoch, params)
        if out is not None and stopper.best_epoch == epoch:
            save_checkpoint(out / "best.ckpt", params, cfg)
        sched.step(val_loss)
        if stop:
            logger.info("early stop at epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break

    if out is not None:
        save_checkpoint(out / "last.ckpt", params, cfg)
    if stopper.snapshot is not None:
        params.restore(stopper.snapshot)
    if out is not None:
        log.write_csv(out / "train_log.csv")
    return params, log
