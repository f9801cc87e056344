"""Optimizer, schedule, loss, datasets, and the deterministic training loop."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable, backward
from .errors import DataFormatError, DivergenceError


@dataclass
class SgdState:
    """SGD with momentum and coupled weight decay: v <- m v + (g + wd θ); θ <- θ - lr v."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    no_decay: frozenset = frozenset()  # parameter names exempt from decay
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


def sgd_step(params: dict, state: SgdState) -> None:
    """One update over a name -> Variable mapping; grads must be populated."""
    for name, var in params.items():
        if var.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        g = var.grad
        if state.weight_decay and name not in state.no_decay:
            g = g + state.weight_decay * var.value
        v = state.velocity.get(name)
        v = g if v is None else state.momentum * v + g
        state.velocity[name] = v
        var.value = var.value - state.lr * v


@dataclass
class StepSchedule:
    """Piecewise-constant learning rate: multiply at each passed milestone."""

    base_lr: float
    milestones: list = field(default_factory=list)  # [(epoch, multiplier)]

    def __post_init__(self):
        epochs = [e for e, _ in self.milestones]
        if epochs != sorted(epochs) or len(set(epochs)) != len(epochs):
            raise ValueError("milestone epochs must be strictly increasing")

    def lr(self, epoch: int) -> float:
        lr = self.base_lr
        for e, mult in self.milestones:
            if epoch >= e:
                lr *= mult
        return lr


def softmax_cross_entropy(logits: Variable, labels: np.ndarray) -> Variable:
    """Mean negative log softmax probability of the true class, max-shifted."""
    labels = np.asarray(labels)
    k = logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    shift = logits.value.max(axis=1, keepdims=True)  # constant w.r.t. the tape
    z = logits - Variable(shift)
    lse = ad.log(ad.vsum(ad.exp(z), axis=1)) + Variable(shift[:, 0])
    return ad.vmean(lse - ad.pick(logits, labels))


# ---------------------------------------------------------------------------
# datasets

CIFAR10_RECORD_BYTES = 3073
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class DatasetSource:
    """In-memory dataset: images (n, 3, 32, 32) float in [0,1] or standardized."""

    images: np.ndarray
    labels: np.ndarray
    classes: int

    def split(self, val_fraction: float = 0.2):
        n_val = int(len(self.labels) * val_fraction)
        n_train = len(self.labels) - n_val
        train = DatasetSource(self.images[:n_train], self.labels[:n_train], self.classes)
        val = DatasetSource(self.images[n_train:], self.labels[n_train:], self.classes)
        return train, val


def load_cifar10(path: str, split: str = "train", standardize: bool = True) -> DatasetSource:
    """Parse CIFAR-10 binary batch files (1 label byte + 3072 channel-major pixels).

    ``path`` may be one file or a directory holding the standard batch files.
    """
    if os.path.isdir(path):
        names = (["data_batch_%d.bin" % i for i in range(1, 6)] if split == "train"
                 else ["test_batch.bin"])
        files = [os.path.join(path, n) for n in names]
    else:
        files = [path]
    images, labels = [], []
    for fname in files:
        try:
            raw = np.fromfile(fname, dtype=np.uint8)
        except OSError as exc:
            raise DataFormatError(f"cannot read {fname}: {exc}") from exc
        if raw.size % CIFAR10_RECORD_BYTES != 0:
            offset = (raw.size // CIFAR10_RECORD_BYTES) * CIFAR10_RECORD_BYTES
            raise DataFormatError(
                f"{fname}: size {raw.size} is not a multiple of {CIFAR10_RECORD_BYTES} "
                f"(truncated after byte {offset})"
            )
        records = raw.reshape(-1, CIFAR10_RECORD_BYTES)
        lab = records[:, 0]
        if lab.max(initial=0) > 9:
            bad = int(np.argmax(lab > 9))
            raise DataFormatError(
                f"{fname}: record {bad} has label byte {lab[bad]} > 9 "
                f"(byte offset {bad * CIFAR10_RECORD_BYTES})"
            )
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
        labels.append(lab)
    x = np.concatenate(images).astype(np.float64) / 255.0
    y = np.concatenate(labels).astype(np.int64)
    if standardize:
        mean = np.array(CIFAR10_MEAN).reshape(1, 3, 1, 1)
        std = np.array(CIFAR10_STD).reshape(1, 3, 1, 1)
        x = (x - mean) / std
    return DatasetSource(images=x, labels=y, classes=10)


def synthetic_dataset(seed: int, classes: int = 4, samples: int = 2000,
                      noise_std: float = 0.6, instance_gain: float = 0.0) -> DatasetSource:
    """Seeded separable image blobs: low-frequency class prototype plus noise.

    ``instance_gain`` > 0 applies a random per-instance scale (log-uniform in
    [exp(-g), exp(g)]) and shift, the kind of per-sample heterogeneity that
    instance-level normalizers remove but batch statistics cannot.
    """
    rng = np.random.default_rng(seed)
    protos = np.kron(rng.standard_normal((classes, 3, 8, 8)),
                     np.ones((1, 1, 4, 4)))  # (classes, 3, 32, 32)
    labels = np.arange(samples) % classes
    labels = rng.permutation(labels)
    noise = rng.standard_normal((samples, 3, 32, 32)) * noise_std
    images = protos[labels] + noise
    if instance_gain > 0:
        gains = np.exp(rng.uniform(-instance_gain, instance_gain, samples))
        shifts = rng.uniform(-1.0, 1.0, samples)
        images = images * gains[:, None, None, None] + shifts[:, None, None, None]
    images = (images - images.mean()) / images.std()  # unit-scale inputs
    return DatasetSource(images=images, labels=labels.astype(np.int64), classes=classes)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    error_rate: float
    lr: float
    wall_time_s: float


def evaluate(model, data: DatasetSource, batch_size: int, dtype) -> tuple[float, float]:
    """(mean loss, error rate) over a dataset in eval mode."""
    losses, wrong, total = [], 0, 0
    for start in range(0, len(data.labels), batch_size):
        xb = data.images[start:start + batch_size].astype(dtype)
        yb = data.labels[start:start + batch_size]
        logits = model.forward(Variable(xb), mode="eval")
        loss = softmax_cross_entropy(logits, yb)
        losses.append(float(loss.value) * len(yb))
        wrong += int((logits.value.argmax(axis=1) != yb).sum())
        total += len(yb)
    return sum(losses) / total, wrong / total


def train(model, data: DatasetSource, sgd: SgdState, schedule: StepSchedule,
          epochs: int, batch_size: int, seed: int, dtype=np.float32,
          val_fraction: float = 0.2) -> list[EpochRecord]:
    """Deterministic epoch loop; one train and one val record per epoch."""
    train_set, val_set = data.split(val_fraction)
    rng = np.random.default_rng(seed)
    records = []
    t0 = time.perf_counter()
    params = model.parameters()
    for epoch in range(epochs):
        sgd.lr = schedule.lr(epoch)
        order = rng.permutation(len(train_set.labels))
        epoch_loss, wrong, total = 0.0, 0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            xb = train_set.images[idx].astype(dtype)
            yb = train_set.labels[idx]
            model.zero_grads()
            with Tape() as tape:
                logits = model.forward(Variable(xb), mode="train")
                loss = softmax_cross_entropy(logits, yb)
                if not np.isfinite(loss.value):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, step {start // batch_size}"
                    )
                backward(tape, loss)
            tape.release()
            sgd_step(params, sgd)
            epoch_loss += float(loss.value) * len(yb)
            wrong += int((logits.value.argmax(axis=1) != yb).sum())
            total += len(yb)
        records.append(EpochRecord(epoch, "train", epoch_loss / total, wrong / total,
                                   sgd.lr, time.perf_counter() - t0))
        val_loss, val_err = evaluate(model, val_set, batch_size, dtype)
        records.append(EpochRecord(epoch, "val", val_loss, val_err, sgd.lr,
                                   time.perf_counter() - t0))
    return records
