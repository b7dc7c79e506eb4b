"""Classifier optimization: confidence-weighted cross-entropy and the training loop.

The loss applies a per-sample weight w_i in (0, 1] to the true-class
log-probability, so synthetic samples with low assigned confidence
contribute proportionally less to each update.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import Dataset, split_dataset
from .models import ClassifierModel

PROB_CLAMP = 1e-12
ROW_SUM_TOL = 1e-5


class TrainingError(ValueError):
    """Raised for malformed loss inputs or training configs."""


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite; carries the log so far."""

    def __init__(self, message: str, log: "TrainLog"):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    trainable_scope: str = "all"
    seed: int = 0
    patience: int = 10  # 0 disables early stopping
    val_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.trainable_scope not in ("all", "fc_only"):
            raise TrainingError(f"unknown trainable_scope: {self.trainable_scope!r}")


@dataclass
class TrainEpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float | None
    seconds: float


@dataclass
class TrainLog:
    records: list[TrainEpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "loss", "train_acc", "val_acc", "seconds"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.loss), repr(r.train_acc),
                                 "" if r.val_acc is None else repr(r.val_acc),
                                 f"{r.seconds:.3f}"])
        return path


def weighted_cross_entropy(y_true, y_pred, w) -> torch.Tensor:
    """Mean over the batch of -w_i * sum_j y_true_ij * log(y_pred_ij).

    ``y_true`` is one-hot, ``y_pred`` holds probability rows, ``w`` holds
    per-sample weights in (0, 1]. Probabilities are clamped at 1e-12 before
    the log. Returns a differentiable scalar tensor.
    """
    yt = torch.as_tensor(y_true)
    yp = torch.as_tensor(y_pred)
    wt = torch.as_tensor(w, dtype=yp.dtype)
    if yt.shape != yp.shape:
        raise TrainingError(f"shape mismatch: y_true {tuple(yt.shape)} vs y_pred {tuple(yp.shape)}")
    if wt.ndim == 0:
        wt = wt.expand(yp.shape[0])
    if wt.shape != (yp.shape[0],):
        raise TrainingError(f"weight vector of shape {tuple(wt.shape)} does not match "
                            f"batch size {yp.shape[0]}")
    with torch.no_grad():
        row_sums = yp.detach().sum(dim=1)
        if not torch.all((row_sums - 1.0).abs() <= ROW_SUM_TOL):
            raise TrainingError("y_pred rows must sum to 1 within 1e-5")
        if torch.any(wt <= 0) or torch.any(wt > 1):
            raise TrainingError("weights must lie in (0, 1]")
    per_sample = -(yt.to(yp.dtype) * torch.log(yp.clamp_min(PROB_CLAMP))).sum(dim=1)
    return (wt * per_sample).mean()


def _one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    return torch.eye(num_classes, dtype=torch.float32)[labels]


def train_classifier(model: ClassifierModel, train_set: Dataset,
                     cfg: TrainConfig) -> tuple[ClassifierModel, TrainLog]:
    """Minimize the weighted cross-entropy over shuffled mini-batches.

    With ``trainable_scope='fc_only'`` the convolutional stack is frozen:
    its parameters and batch-norm statistics are untouched. With patience > 0
    a stratified held-out slice of the train set drives early stopping, and
    the best-validation parameters are restored at the end. Deterministic for
    a given ``cfg.seed``.
    """
    if len(train_set) == 0:
        raise TrainingError("train_set is empty")
    labels = train_set.labels_array()
    if labels.max() >= model.num_classes:
        raise TrainingError(f"label id {labels.max()} exceeds model num_classes "
                            f"{model.num_classes}")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    val_set: Dataset | None = None
    fit_set = train_set
    if cfg.patience > 0:
        try:
            fit_set, val_set = split_dataset(train_set, cfg.val_fraction, cfg.seed)
        except Exception:
            val_set = None  # too few samples per class; train on everything

    x = torch.from_numpy(fit_set.images_array()).unsqueeze(1)
    y = torch.from_numpy(fit_set.labels_array())
    w = torch.from_numpy(fit_set.weights_array())
    y_onehot = _one_hot(y, model.num_classes)

    model.set_trainable_scope(cfg.trainable_scope)
    net = model.net
    optimizer = torch.optim.Adam((p for p in net.parameters() if p.requires_grad),
                                 lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))

    log = TrainLog()
    best_val = -1.0
    best_state = None
    stale = 0
    n = len(fit_set)

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        net.train()
        if cfg.trainable_scope == "fc_only":
            net.features.eval()

        perm = rng.permutation(n)
        epoch_loss = 0.0
        correct = 0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs at least two samples
            xb, yb, wb = x[idx], y_onehot[idx], w[idx]
            probs = net(xb)
            loss = weighted_cross_entropy(yb, probs, wb)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", log)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(idx)
            correct += int((probs.detach().argmax(1) == y[idx]).sum())
            seen += len(idx)

        train_acc = correct / max(seen, 1)
        val_acc = None
        if val_set is not None:
            probs = model.predict_proba(val_set.images_array())
            val_acc = float((probs.argmax(1) == val_set.labels_array()).mean())
        log.records.append(TrainEpochRecord(epoch, epoch_loss / max(seen, 1), train_acc,
                                            val_acc, time.perf_counter() - started))

        if val_set is not None and cfg.patience > 0:
            if val_acc > best_val:
                best_val = val_acc
                best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break

    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    return model, log


def gradient_check_loss(y_true, y_pred_logits, w, h: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of the weighted loss
    composed with softmax and a central finite-difference estimate.

    Intended for small instances (up to ~10x7); runs in float64.
    """
    yt = torch.as_tensor(np.asarray(y_true), dtype=torch.float64)
    logits = torch.as_tensor(np.asarray(y_pred_logits), dtype=torch.float64)
    wt = torch.as_tensor(np.asarray(w), dtype=torch.float64)
    if wt.ndim == 0:
        wt = wt.expand(logits.shape[0])

    def loss_at(z: torch.Tensor) -> torch.Tensor:
        return weighted_cross_entropy(yt, torch.softmax(z, dim=1), wt)

    z = logits.clone().requires_grad_(True)
    analytic = torch.autograd.grad(loss_at(z), z)[0].numpy()

    numeric = np.zeros_like(analytic)
    flat = logits.clone()
    for i in range(flat.shape[0]):
        for j in range(flat.shape[1]):
            bumped = flat.clone()
            bumped[i, j] += h
            up = float(loss_at(bumped))
            bumped[i, j] -= 2 * h
            down = float(loss_at(bumped))
            numeric[i, j] = (up - down) / (2 * h)

    denom = np.maximum(np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
