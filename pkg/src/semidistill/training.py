"""Training procedures: supervised teacher, KL-distilled student, evaluation.

Both loops use SGD with momentum and weight decay (decay coupled into the
gradient before the momentum buffer, the classical formulation implemented
by ``torch.optim.SGD``) at a constant learning rate.

Determinism: batch shuffling and augmentation draw from numpy generators
seeded as (config.seed, epoch, stream), so a run is a pure function of its
config and inputs.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import data as data_mod
from .errors import ConfigError, TrainingError
from .losses import cross_entropy_mean, distillation_loss, softmax
from .models import ModelHandle, ModelSpec, build_model
from .softlabels import SoftLabelSet, check_provenance
from .weights_io import load_weights, save_weights, weights_digest

CHECKPOINT_POLICIES = ("best_val", "last")


@dataclass
class TrainConfig:
    epochs: int = 30
    momentum: float = 0.9
    weight_decay: float = 5e-4
    learning_rate: float | None = None  # None -> the model spec's rate
    batch_size: int = 128
    seed: int = 0
    temperature: float = 1.0
    checkpoint_policy: str = "best_val"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate is not None and self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.checkpoint_policy not in CHECKPOINT_POLICIES:
            raise ConfigError(f"unknown checkpoint_policy: {self.checkpoint_policy!r}")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float
    wall_time: float = 0.0


def _rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def evaluate(
    handle: ModelHandle,
    images: np.ndarray,
    labels: np.ndarray,
    spec: data_mod.PreprocessSpec,
    batch_size: int = 256,
) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class."""
    if len(images) == 0:
        raise TrainingError("evaluate: empty index set")
    eval_spec = spec.without_augmentation()
    handle.module.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = data_mod.preprocess_batch(images[start : start + batch_size], eval_spec)
            logits = handle.module(torch.from_numpy(x)).numpy()
            correct += int((np.argmax(logits, axis=1) == labels[start : start + batch_size]).sum())
    return correct / len(images)


def predict_probs(
    handle: ModelHandle,
    images: np.ndarray,
    spec: data_mod.PreprocessSpec,
    temperature: float = 1.0,
    batch_size: int = 256,
) -> np.ndarray:
    """Evaluation-mode class probabilities on un-augmented images (float32)."""
    eval_spec = spec.without_augmentation()
    handle.module.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = data_mod.preprocess_batch(images[start : start + batch_size], eval_spec)
            logits = handle.module(torch.from_numpy(x))
            rows.append(softmax(logits, temperature).numpy())
    return np.concatenate(rows).astype(np.float32)


def select_checkpoint_epoch(history: list[EpochMetrics], policy: str) -> int:
    """Index into history of the reporting checkpoint (best_val ties -> earliest)."""
    if policy == "last":
        return len(history) - 1
    best = 0
    for i, m in enumerate(history):
        if m.val_accuracy > history[best].val_accuracy:
            best = i
    return best


def _make_optimizer(handle: ModelHandle, config: TrainConfig) -> torch.optim.SGD:
    lr = config.learning_rate if config.learning_rate is not None else handle.spec.learning_rate
    return torch.optim.SGD(
        handle.module.parameters(),
        lr=lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def _run_epochs(handle, config, n_examples, epoch_step, epoch_eval):
    """Shared loop: per-epoch shuffle/augment RNG streams, metrics, checkpointing."""
    history: list[EpochMetrics] = []
    best_state = None
    best_epoch = -1
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        shuffle_rng = _rng(config.seed, epoch, 0)
        augment_rng = _rng(config.seed, epoch, 1)
        handle.module.train()
        losses = []
        for batch in _batches(n_examples, config.batch_size, shuffle_rng):
            loss = epoch_step(batch, augment_rng)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} (divergence)")
            losses.append(loss)
            handle.state_version += 1
        train_acc, val_acc = epoch_eval()
        history.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                train_accuracy=train_acc,
                val_accuracy=val_acc,
                wall_time=time.perf_counter() - t0,
            )
        )
        if config.checkpoint_policy == "best_val":
            idx = select_checkpoint_epoch(history, "best_val")
            if idx == epoch - 1 and idx != best_epoch:
                best_state = {k: v.clone() for k, v in handle.module.state_dict().items()}
                best_epoch = idx
    if config.checkpoint_policy == "best_val" and best_state is not None:
        handle.module.load_state_dict(best_state)
    return history


def train_teacher(
    handle: ModelHandle,
    source: data_mod.DatasetSource,
    labeled_idx: np.ndarray,
    val_idx: np.ndarray,
    config: TrainConfig,
    preprocess_spec: data_mod.PreprocessSpec,
) -> tuple[ModelHandle, list[EpochMetrics]]:
    """Supervised cross-entropy training on the labeled subset."""
    labeled_idx = np.asarray(labeled_idx)
    if len(labeled_idx) == 0:
        raise TrainingError("train_teacher: empty labeled set")
    images = source.images[labeled_idx]
    labels = source.labels[labeled_idx]
    val_images = source.images[np.asarray(val_idx)]
    val_labels = source.labels[np.asarray(val_idx)]
    optimizer = _make_optimizer(handle, config)
    torch.manual_seed(config.seed)

    def step(batch, augment_rng):
        x = torch.from_numpy(data_mod.preprocess_batch(images[batch], preprocess_spec, augment_rng))
        y = torch.from_numpy(labels[batch])
        optimizer.zero_grad()
        loss = cross_entropy_mean(handle.module(x), y)
        loss.backward()
        optimizer.step()
        return float(loss.detach())

    def epoch_eval():
        return (
            evaluate(handle, images, labels, preprocess_spec),
            evaluate(handle, val_images, val_labels, preprocess_spec),
        )

    history = _run_epochs(handle, config, len(labeled_idx), step, epoch_eval)
    return handle, history


def teacher_identity(handle: ModelHandle) -> str:
    """Content hash over teacher weights and spec, for soft-label provenance."""
    doc = f"{handle.spec.name}:{handle.spec.num_classes}:{weights_digest(handle.module.state_dict())}"
    return hashlib.sha256(doc.encode()).hexdigest()


def generate_soft_labels(
    teacher: ModelHandle,
    source: data_mod.DatasetSource,
    split: data_mod.SplitIndex,
    preprocess_spec: data_mod.PreprocessSpec,
    temperature: float = 1.0,
) -> SoftLabelSet:
    """One probability row per train-split example, on un-augmented images."""
    if preprocess_spec.augment_enabled:
        raise ConfigError("soft-label generation requires augmentation disabled")
    rows = predict_probs(teacher, source.images[split.train_idx], preprocess_spec, temperature)
    return SoftLabelSet(
        teacher_id=teacher_identity(teacher),
        dataset_checksum=split.checksum,
        split_seed=split.seed,
        temperature_used=temperature,
        rows=rows,
    )


def distill_student(
    student: ModelHandle,
    source: data_mod.DatasetSource,
    split: data_mod.SplitIndex,
    config: TrainConfig,
    preprocess_spec: data_mod.PreprocessSpec,
    soft_labels: SoftLabelSet | None = None,
    teacher: ModelHandle | None = None,
    train_idx: np.ndarray | None = None,
) -> tuple[ModelHandle, list[EpochMetrics]]:
    """KL-distillation over the full train split (labeled + unlabeled).

    Ground-truth labels are never read on the optimization path. Teacher
    signal comes either from a cached SoftLabelSet (default; targets from
    clean images) or live from a teacher forward on the identical batch.
    """
    if (soft_labels is None) == (teacher is None):
        raise ConfigError("provide exactly one of soft_labels (cached) or teacher (live)")
    train_idx = np.asarray(train_idx if train_idx is not None else split.train_idx)
    if len(train_idx) == 0:
        raise TrainingError("distill_student: empty train set")
    if soft_labels is not None:
        check_provenance(
            soft_labels, source.checksum, split.seed, n_rows=len(train_idx)
        )
        target_rows = torch.from_numpy(soft_labels.rows)
    images = source.images[train_idx]
    val_images = source.images[split.val_idx]
    val_labels = source.labels[split.val_idx]
    optimizer = _make_optimizer(student, config)
    torch.manual_seed(config.seed)

    def step(batch, augment_rng):
        x = torch.from_numpy(data_mod.preprocess_batch(images[batch], preprocess_spec, augment_rng))
        if soft_labels is not None:
            targets = target_rows[batch]
        else:
            teacher.module.eval()
            with torch.no_grad():
                targets = softmax(teacher.module(x), 1.0)
        optimizer.zero_grad()
        loss = distillation_loss(targets, student.module(x), config.temperature)
        loss.backward()
        optimizer.step()
        return float(loss.detach())

    def epoch_eval():
        # train accuracy over everything the student trains on (labels are
        # used for reporting only, never by the optimizer)
        return (
            evaluate(student, images, source.labels[train_idx], preprocess_spec),
            evaluate(student, val_images, val_labels, preprocess_spec),
        )

    history = _run_epochs(student, config, len(train_idx), step, epoch_eval)
    return student, history


def save_checkpoint(
    handle: ModelHandle, path, config: TrainConfig, epoch: int, history=None
) -> None:
    """Weights container plus a JSON training-state sidecar."""
    save_weights(handle.module.state_dict(), path)
    sidecar = {
        "epoch": epoch,
        "spec": asdict(handle.spec),
        "config": asdict(config),
        "optimizer_buffers": None,
        "history": [asdict(m) for m in history] if history is not None else None,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh)


def load_checkpoint(path) -> tuple[ModelHandle, dict]:
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    spec = ModelSpec(**sidecar["spec"])
    handle = build_model(spec)
    handle.module.load_state_dict(load_weights(path))
    return handle, sidecar
