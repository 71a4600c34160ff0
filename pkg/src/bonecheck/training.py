"""Weighted binary cross-entropy, Adam, and the end-to-end training loop.

Optimizer defaults follow the reference setup: lr=1e-4, beta1=0.9,
beta2=0.999, epsilon=1e-7, decay=1e-4 (applied as lr_t = lr/(1+decay*t)
per step), amsgrad off. Labels: y=1 normal, y=0 abnormal; class weights
act as per-sample loss multipliers.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as dat
from .autograd import Tensor, ShapeMismatchError, _accumulate, backward
from .models import ModelGraph, save_checkpoint


class DivergenceError(RuntimeError):
    """Training loss went non-finite."""


class NonFiniteGradientError(RuntimeError):
    pass


def bce_loss(p: Tensor, y: np.ndarray, sample_weights: np.ndarray | None = None) -> Tensor:
    """Mean over the batch of w_i * (-y_i*log p_i - (1-y_i)*log(1-p_i)).

    p: (B,1) or (B,) probabilities from the sigmoid head. Probabilities
    are clipped away from exactly 0/1 only as a float-rounding guard.
    """
    y = np.asarray(y, dtype=p.data.dtype).reshape(-1)
    n = y.size
    if p.data.size != n:
        raise ShapeMismatchError(f"bce_loss: {p.data.size} probabilities vs {n} labels")
    if sample_weights is None:
        w = np.ones(n, dtype=p.data.dtype)
    else:
        w = np.asarray(sample_weights, dtype=p.data.dtype).reshape(-1)
        if w.size != n:
            raise ShapeMismatchError(f"bce_loss: {w.size} weights vs {n} labels")
    tiny = 1e-7 if p.data.dtype == np.float32 else 1e-12
    pc = np.clip(p.data.reshape(-1), tiny, 1.0 - tiny)
    loss = float(np.mean(w * (-y * np.log(pc) - (1.0 - y) * np.log1p(-pc))))

    def back(g):
        if p.requires_grad:
            gscal = g.reshape(())[()]
            dp = w * (pc - y) / (pc * (1.0 - pc)) / n
            _accumulate(p, (gscal * dp).reshape(p.shape).astype(p.data.dtype))

    return Tensor._from_op(np.asarray(loss, dtype=p.data.dtype), (p,), back)


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    decay: float = 1e-4
    amsgrad: bool = False
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    vhat_max: dict = field(default_factory=dict)


def adam_step(parameters: dict[str, Tensor], gradients: dict[str, np.ndarray],
              state: AdamState) -> None:
    """One Adam update in place; missing gradients count as zero."""
    state.t += 1
    t = state.t
    lr_t = state.lr / (1.0 + state.decay * t)
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in parameters.items():
        g = gradients.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        if state.amsgrad:
            prev = state.vhat_max.get(name)
            vhat = state.vhat_max[name] = vhat if prev is None else np.maximum(prev, vhat)
        p.data = p.data - (lr_t * mhat / (np.sqrt(vhat) + state.epsilon)).astype(p.data.dtype)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    use_class_weights: bool = True
    checkpoint_path: str | None = None
    patience: int | None = None          # early stop on valid loss; None = off
    stop_at_train_acc: float | None = None  # stop once train accuracy reaches this
    lr: float = 1e-4
    decay: float = 1e-4
    target_size: tuple[int, int] = (64, 64)
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_acc: float
    seconds: float


TrainLog = list[EpochRecord]


def _forward_batch(model: ModelGraph, images: np.ndarray) -> Tensor:
    return model.forward(Tensor(images))


def evaluate_split(model: ModelGraph, manifest: dat.DatasetManifest,
                   target_size: tuple[int, int], batch_size: int,
                   class_weights: tuple[float, float] | None) -> tuple[float, float]:
    """(mean loss, per-view accuracy) on a split, preprocessing only."""
    losses, correct, total = [], 0, 0
    for batch in dat.batch_iterator(manifest, batch_size=batch_size,
                                    target_size=target_size,
                                    class_weights=class_weights):
        p = _forward_batch(model, batch.images)
        losses.append(bce_loss(p, batch.labels, batch.weights).item() * len(batch.labels))
        pred_normal = p.data.reshape(-1) >= 0.5
        correct += int(np.sum(pred_normal == (batch.labels == 1)))
        total += len(batch.labels)
    return float(np.sum(losses) / total), correct / total


def train(model: ModelGraph, train_manifest: dat.DatasetManifest,
          valid_manifest: dat.DatasetManifest, config: TrainConfig,
          ) -> tuple[ModelGraph, TrainLog]:
    """Train in place; returns the model and the per-epoch log.

    Checkpoints at best validation loss when checkpoint_path is set.
    Deterministic for a fixed config/seed (wall time aside).
    """
    if not model.has_head():
        raise ValueError("model must carry a sigmoid head")
    if not train_manifest.studies or not valid_manifest.studies:
        raise dat.DatasetError("train and valid manifests must be non-empty")

    weights = dat.compute_class_weights(train_manifest) if config.use_class_weights else None
    aug = dat.AugmentationConfig(target_size=config.target_size,
                                 seed=config.seed) if config.augment else None
    state = AdamState(lr=config.lr, decay=config.decay)
    log: TrainLog = []
    best_valid = np.inf
    since_best = 0

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        epoch_losses, epoch_n, epoch_correct = [], 0, 0
        for batch in dat.batch_iterator(train_manifest, batch_size=config.batch_size,
                                        shuffle=True, seed=config.seed, epoch=epoch,
                                        target_size=config.target_size,
                                        augment_config=aug, class_weights=weights):
            model.set_requires_grad(True)
            p = _forward_batch(model, batch.images)
            loss = bce_loss(p, batch.labels, batch.weights)
            if not np.isfinite(loss.item()):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}")
            backward(loss)
            grads = {name: t.grad for name, t in model.parameters.items()
                     if t.grad is not None}
            adam_step(model.parameters, grads, state)
            epoch_losses.append(loss.item() * len(batch.labels))
            epoch_n += len(batch.labels)
            epoch_correct += int(np.sum(
                (p.data.reshape(-1) >= 0.5) == (batch.labels == 1)))
        model.set_requires_grad(False)
        valid_loss, valid_acc = evaluate_split(model, valid_manifest,
                                               config.target_size,
                                               config.batch_size, weights)
        record = EpochRecord(epoch, float(np.sum(epoch_losses) / epoch_n),
                             valid_loss, valid_acc, time.perf_counter() - t0)
        log.append(record)
        if valid_loss < best_valid:
            best_valid = valid_loss
            since_best = 0
            if config.checkpoint_path:
                save_checkpoint(model, config.checkpoint_path)
        else:
            since_best += 1
            if config.patience is not None and since_best > config.patience:
                break
        if (config.stop_at_train_acc is not None
                and epoch_correct / epoch_n >= config.stop_at_train_acc):
            break
    model.set_requires_grad(False)
    return model, log


def write_train_log(log: TrainLog, path) -> None:
    """CSV: epoch,train_loss,valid_loss,valid_acc,seconds."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "valid_loss", "valid_acc", "seconds"])
        for r in log:
            writer.writerow([r.epoch, f"{r.train_loss:.8f}", f"{r.valid_loss:.8f}",
                             f"{r.valid_acc:.6f}", f"{r.seconds:.3f}"])
