"""Mini-batch training loop with best-validation checkpoint selection."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..metrics import accuracy, average_precision
from .checkpoint import save_checkpoint
from .layers import NonFiniteError
from .model import DetectorModel
from .optim import DEFAULT_LR, AdamState, adam_step

logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 32


@dataclass
class TrainConfig:
    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = 20
    seed: int = 1337
    lr: float = DEFAULT_LR
    checkpoint_every: int = 0
    val_fraction: float = 0.2
    normalize_inputs: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite. ``last_good`` holds the previous epoch's model."""

    def __init__(self, message, last_good, history):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


class ArrayDataset:
    """In-memory ``(N, C, H, W)`` features with 0/1 labels."""

    def __init__(self, x, y):
        self.x = np.asarray(x, dtype=np.float32)
        self.y = np.asarray(y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError("features and labels differ in length")

    @property
    def labels(self):
        return self.y

    def __len__(self):
        return len(self.y)

    def batches(self, batch_size, seed=0, epoch=0, shuffle=True):
        idx = np.arange(len(self.y))
        if shuffle:
            idx = np.random.default_rng([seed, epoch]).permutation(idx)
        for start in range(0, len(idx), batch_size):
            sel = idx[start:start + batch_size]
            yield self.x[sel], self.y[sel]


def input_statistics(dataset):
    """Per-channel mean and 1/std of a dataset's ``(N, C, H, W)`` features."""
    x = dataset.x
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    std = x.std(axis=(0, 2, 3), dtype=np.float64)
    scale = np.divide(1.0, std, out=np.ones_like(std), where=std > 0)
    return mean, scale


def predict_scores(model: DetectorModel, dataset, batch_size=64):
    scores, labels = [], []
    for x, y in dataset.batches(batch_size, shuffle=False):
        scores.append(model.predict_proba(x))
        labels.append(y)
    return np.concatenate(scores), np.concatenate(labels)


def _check_both_classes(dataset, what):
    present = set(np.unique(dataset.labels).tolist())
    if present != {0, 1}:
        missing = "0_real" if 0 not in present else "1_fake"
        raise ValueError(f"{what} set has no samples of class {missing}")


def train(config: TrainConfig, train_set, val_set, *, checkpoint_dir=None, meta=None):
    """Fit a fresh :class:`DetectorModel` with Adam on mean BCE.

    Inputs are standardized per channel with statistics of the training set
    (stored in the model). Each epoch reshuffles with an RNG derived from ``(config.seed, epoch)``.
    Returns ``(best_model, history)``; the best model is the epoch with the
    highest validation accuracy (validation AP breaks ties, earlier epoch
    wins full ties).
    """
    _check_both_classes(train_set, "training")
    model = DetectorModel.initialize(config.seed)
    if config.normalize_inputs:
        model.set_input_normalization(*input_statistics(train_set))
    params = model.parameters()
    state = AdamState.for_params(params, lr=config.lr)
    history = []
    best, best_key = model.copy(), None
    for epoch in range(config.epochs):
        last_good = model.copy()
        total, count = 0.0, 0
        try:
            for x, y in train_set.batches(config.batch_size, config.seed, epoch, shuffle=True):
                loss = model.loss_and_grads(x, y)
                if not math.isfinite(loss):
                    raise NonFiniteError(f"loss={loss}")
                adam_step(params, model.gradients(), state)
                total += loss * len(y)
                count += len(y)
        except NonFiniteError as exc:
            msg = f"training diverged in epoch {epoch} at step {state.t}: {exc}"
            logger.error(msg)
            raise TrainingDiverged(msg, last_good, history) from exc
        scores, labels = predict_scores(model, val_set)
        val_acc = accuracy(scores, labels)
        val_ap = average_precision(scores, labels) if len(set(labels.tolist())) == 2 else float("nan")
        row = {"epoch": epoch, "train_loss": total / count, "val_acc": val_acc, "val_ap": val_ap}
        history.append(row)
        logger.info("epoch %d loss %.5f val_acc %.2f val_ap %.2f", epoch, row["train_loss"], val_acc, val_ap)
        key = (val_acc, -np.inf if math.isnan(val_ap) else val_ap)
        if best_key is None or key > best_key:
            best, best_key = model.copy(), key
        if checkpoint_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch:03d}.nprm", model, meta)
    return best, history


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_acc", "val_ap"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_acc"]), repr(row["val_ap"])])
