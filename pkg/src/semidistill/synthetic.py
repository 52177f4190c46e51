"""Synthetic class-structured data in the CIFAR-10 binary layout.

Used for desk-scale runs and the test suite. Every image is a weak class
template plus a strong smooth per-example pattern plus pixel noise. The
per-example pattern is easy for a conv net to fit but carries no class
information, so supervised training on a small labeled subset memorizes it
and overfits, while the class template can only be extracted by averaging
over many examples — the regime distillation over the unlabeled pool is
meant to exploit.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import RECORDS_PER_FILE, TEST_FILE, TRAIN_FILES


def _smooth_fields(rng: np.random.Generator, n: int, detail: int) -> np.ndarray:
    low = rng.standard_normal((n, detail, detail, 3)).astype(np.float32)
    scale = 32 // detail
    return np.kron(low, np.ones((1, scale, scale, 1), dtype=np.float32))


def write_synthetic_cifar(
    root,
    seed: int = 0,
    class_amp: float = 65.0,
    distractor_amp: float = 70.0,
    noise_sigma: float = 10.0,
    detail: int = 8,
) -> Path:
    """Write five train batches plus one test batch of synthetic records."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    base = _smooth_fields(rng, 10, detail)
    for name in TRAIN_FILES + [TEST_FILE]:
        labels = rng.integers(0, 10, size=RECORDS_PER_FILE)
        distractors = _smooth_fields(rng, RECORDS_PER_FILE, detail)
        noise = rng.standard_normal((RECORDS_PER_FILE, 32, 32, 3)).astype(np.float32)
        images = (
            128.0
            + class_amp * base[labels]
            + distractor_amp * distractors
            + noise_sigma * noise
        )
        images = np.clip(images, 0, 255).astype(np.uint8)
        planes = images.transpose(0, 3, 1, 2).reshape(len(images), 3072)
        records = np.concatenate([labels[:, None].astype(np.uint8), planes], axis=1)
        (root / name).write_bytes(records.tobytes())
    return root
