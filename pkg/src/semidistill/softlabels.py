"""Persisted teacher soft labels.

File layout: 16-byte header (magic ``SLBL``, format version, N, C as
little-endian uint32) followed by N*C little-endian float32 rows in
train-index order, plus a JSON sidecar carrying provenance.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError, ProvenanceError
from .losses import check_prob_rows

MAGIC = b"SLBL"
VERSION = 1


@dataclass
class SoftLabelSet:
    teacher_id: str
    dataset_checksum: str
    split_seed: int
    temperature_used: float
    rows: np.ndarray  # (N, C) float32, aligned to train_idx order


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_soft_labels(labels: SoftLabelSet, path) -> Path:
    rows = np.ascontiguousarray(labels.rows, dtype="<f4")
    check_prob_rows(rows)
    n, c = rows.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, n, c))
        fh.write(rows.tobytes())
    sidecar_path(path).write_text(
        json.dumps(
            {
                "teacher_id": labels.teacher_id,
                "dataset_checksum": labels.dataset_checksum,
                "split_seed": labels.split_seed,
                "temperature_used": labels.temperature_used,
            }
        )
    )
    return path


def load_soft_labels(path) -> SoftLabelSet:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing soft-label file: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise DatasetError(f"{path}: bad soft-label magic")
    version, n, c = struct.unpack("<III", raw[4:16])
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported soft-label version {version}")
    expected = 16 + 4 * n * c
    if len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, got {len(raw)}")
    rows = np.frombuffer(raw, dtype="<f4", offset=16).reshape(n, c).copy()
    check_prob_rows(rows)
    meta = json.loads(sidecar_path(path).read_text())
    return SoftLabelSet(
        teacher_id=meta["teacher_id"],
        dataset_checksum=meta["dataset_checksum"],
        split_seed=meta["split_seed"],
        temperature_used=meta["temperature_used"],
        rows=rows,
    )


def check_provenance(
    labels: SoftLabelSet,
    dataset_checksum: str,
    split_seed: int,
    teacher_id: str | None = None,
    n_rows: int | None = None,
) -> None:
    if labels.dataset_checksum != dataset_checksum:
        raise ProvenanceError(
            "soft-label provenance check failed: dataset checksum mismatch"
        )
    if labels.split_seed != split_seed:
        raise ProvenanceError(
            f"soft-label provenance check failed: split seed {labels.split_seed} != {split_seed}"
        )
    if teacher_id is not None and labels.teacher_id != teacher_id:
        raise ProvenanceError(
            "soft-label provenance check failed: teacher id mismatch"
        )
    if n_rows is not None and len(labels.rows) != n_rows:
        raise ProvenanceError(
            f"soft-label provenance check failed: {len(labels.rows)} rows for {n_rows} train examples"
        )
