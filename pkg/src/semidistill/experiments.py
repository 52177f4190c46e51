"""Experiment matrix: (teacher arch x student arch x label fraction x seed).

Each cell runs split -> partition -> teacher training -> soft labels ->
student distillation -> evaluation, with artifact reuse: one teacher per
(arch, fraction, seed) is shared by all of its students, and a completed
cell is a no-op on re-run (manifest-hash idempotence).
"""

from __future__ import annotations

import hashlib
import json
import os
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import training
from .errors import ConfigError, SemidistillError
from .models import build_model, count_parameters, make_spec, registry_names
from .softlabels import check_provenance, load_soft_labels, save_soft_labels
from .training import TrainConfig

SCHEMA_VERSION = 1
CELL_KINDS = ("distill", "baseline")


class CellFailure(SemidistillError):
    """A cell failed; carries the failed RunRecord with the stage named."""

    def __init__(self, record: "RunRecord"):
        self.record = record
        super().__init__(f"cell {record.cell} failed at stage {record.failed_stage}: {record.error}")


def overfit_gap(train_accuracy: float, val_accuracy: float) -> float:
    """train - val accuracy of one checkpoint; negative means underfit."""
    for name, v in (("train_accuracy", train_accuracy), ("val_accuracy", val_accuracy)):
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"{name} must be in [0, 1], got {v}")
    return train_accuracy - val_accuracy


def percent_increase(student_val: float, teacher_val: float) -> float:
    """Validation-accuracy gain of the student over its teacher, in percent."""
    if teacher_val <= 0:
        raise ConfigError(f"teacher_val must be > 0, got {teacher_val}")
    return 100.0 * (student_val - teacher_val) / teacher_val


@dataclass(frozen=True)
class CellId:
    teacher: str
    student: str
    fraction: float
    seed: int
    kind: str = "distill"

    def __post_init__(self):
        if self.kind not in CELL_KINDS:
            raise ConfigError(f"unknown cell kind: {self.kind!r}")

    def slug(self) -> str:
        frac = f"{self.fraction:g}".replace(".", "p")
        return f"{self.kind}_{self.teacher}__{self.student}_f{frac}_s{self.seed}"


@dataclass
class ExperimentConfig:
    data_root: str
    output_dir: str
    registry: str = "desk"
    teachers: list[str] = field(default_factory=lambda: registry_names("desk"))
    students: list[str] = field(default_factory=lambda: registry_names("desk"))
    fractions: list[float] = field(default_factory=lambda: [0.10, 0.25, 0.50, 1.00])
    seeds: list[int] = field(default_factory=lambda: [0])
    train_config: TrainConfig = field(default_factory=TrainConfig)
    subset_size: int | None = None  # cap on train examples, for desk-scale runs
    stratified: bool = True
    augment: bool = True
    include_baselines: bool = False

    def __post_init__(self):
        if isinstance(self.train_config, dict):
            self.train_config = TrainConfig(**self.train_config)
        if not self.fractions:
            raise ConfigError("fractions list must not be empty")
        if any(not 0.0 < f <= 1.0 for f in self.fractions):
            raise ConfigError(f"fractions must lie in (0, 1]: {self.fractions}")
        if not self.seeds:
            raise ConfigError("seeds list must not be empty")
        known = registry_names(self.registry)
        for name in list(self.teachers) + list(self.students):
            if name not in known:
                raise ConfigError(f"{name!r} is not in the {self.registry!r} registry")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return cls(**doc)


@dataclass
class RunRecord:
    schema_version: int
    cell: dict
    status: str
    config_hash: str
    error: str | None = None
    failed_stage: str | None = None
    teacher_val: float | None = None
    student_val: float | None = None
    teacher_train: float | None = None
    student_train: float | None = None
    overfit_gap_teacher: float | None = None
    overfit_gap_student: float | None = None
    pct_increase: float | None = None
    teacher_params: int | None = None
    student_params: int | None = None
    teacher_history: list | None = None
    student_history: list | None = None
    artifacts: dict = field(default_factory=dict)


_PARAM_COUNT_CACHE: dict[str, int] = {}


def arch_parameter_count(name: str, num_classes: int = 10) -> int:
    if name not in _PARAM_COUNT_CACHE:
        _PARAM_COUNT_CACHE[name] = count_parameters(build_model(make_spec(name, num_classes)))
    return _PARAM_COUNT_CACHE[name]


def _cell_config_hash(config: ExperimentConfig, cell: CellId) -> str:
    doc = {
        "cell": asdict(cell),
        "train_config": asdict(config.train_config),
        "registry": config.registry,
        "subset_size": config.subset_size,
        "stratified": config.stratified,
        "augment": config.augment,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _subset_split(split: data_mod.SplitIndex, subset_size: int | None, seed: int):
    """Optionally shrink train/val (keeping the 4:1 proportion) for desk runs."""
    if subset_size is None or subset_size >= len(split.train_idx):
        return split
    rng = np.random.default_rng([seed, 99])
    train = rng.permutation(split.train_idx)[:subset_size]
    val = rng.permutation(split.val_idx)[: max(subset_size // 4, 1)]
    return data_mod.SplitIndex(
        train_idx=np.sort(train),
        val_idx=np.sort(val),
        test_idx=split.test_idx,
        seed=split.seed,
        checksum=split.checksum,
    )


def _history_dicts(history):
    return [asdict(m) for m in history]


def _checkpoint_metrics(history, policy):
    idx = training.select_checkpoint_epoch(history, policy)
    return history[idx].train_accuracy, history[idx].val_accuracy


def prepare_cell_inputs(config: ExperimentConfig, cell: CellId, source: data_mod.DatasetSource):
    """Split, labeled partition and preprocessing spec for one cell."""
    split = _subset_split(data_mod.make_splits(source, cell.seed), config.subset_size, cell.seed)
    partition = data_mod.partition_labels(
        split, cell.fraction, cell.seed, config.stratified, labels=source.labels
    )
    mean, std = data_mod.compute_normalization(source, split.train_idx)
    preprocess_spec = data_mod.PreprocessSpec(
        normalize_mean=mean, normalize_std=std, augment_enabled=config.augment
    )
    return split, partition, preprocess_spec


def cell_train_config(config: ExperimentConfig, cell: CellId) -> TrainConfig:
    """The cell's seed drives every RNG stream of its training runs."""
    return replace(config.train_config, seed=cell.seed)


def _prepare_teacher(config, cell, source, split, partition, preprocess_spec):
    """Train (or reload) the teacher shared by all students of this cell key."""
    key = f"{cell.teacher}_f{cell.fraction:g}_s{cell.seed}"
    tdir = Path(config.output_dir) / "teachers" / key
    ckpt = tdir / "checkpoint.ntc"
    teacher_cell = CellId(cell.teacher, cell.teacher, cell.fraction, cell.seed, "baseline")
    want_hash = _cell_config_hash(config, teacher_cell)
    if ckpt.exists():
        handle, sidecar = training.load_checkpoint(ckpt)
        if sidecar.get("manifest_hash") == want_hash:
            history = [training.EpochMetrics(**m) for m in sidecar["history"]]
            return handle, history, ckpt
    tdir.mkdir(parents=True, exist_ok=True)
    train_config = cell_train_config(config, cell)
    handle = build_model(make_spec(cell.teacher), init_seed=cell.seed)
    handle, history = training.train_teacher(
        handle, source, partition.labeled_idx, split.val_idx, train_config, preprocess_spec
    )
    epoch = training.select_checkpoint_epoch(history, train_config.checkpoint_policy)
    training.save_checkpoint(handle, ckpt, train_config, history[epoch].epoch, history)
    sidecar_file = Path(str(ckpt) + ".json")
    sidecar = json.loads(sidecar_file.read_text())
    sidecar["manifest_hash"] = want_hash
    sidecar_file.write_text(json.dumps(sidecar))
    return handle, history, ckpt


def _prepare_soft_labels(config, cell, teacher, source, split, preprocess_spec):
    key = f"{cell.teacher}_f{cell.fraction:g}_s{cell.seed}"
    path = Path(config.output_dir) / "softlabels" / f"{key}.slbl"
    teacher_id = training.teacher_identity(teacher)
    if path.exists():
        labels = load_soft_labels(path)
        check_provenance(
            labels, source.checksum, split.seed, teacher_id=teacher_id, n_rows=len(split.train_idx)
        )
        return labels, path
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = training.generate_soft_labels(
        teacher, source, split, preprocess_spec.without_augmentation()
    )
    save_soft_labels(labels, path)
    return labels, path


def run_cell(
    config: ExperimentConfig,
    cell: CellId,
    source: data_mod.DatasetSource | None = None,
) -> RunRecord:
    """Execute one matrix cell end to end; idempotent on re-run."""
    config_hash = _cell_config_hash(config, cell)
    cell_dir = Path(config.output_dir) / "cells" / cell.slug()
    record_path = cell_dir / "record.json"
    if record_path.exists():
        doc = json.loads(record_path.read_text())
        if doc.get("config_hash") == config_hash and doc.get("status") == "ok":
            return RunRecord(**doc)

    train_config = cell_train_config(config, cell)
    stage = "ingest"
    try:
        if source is None:
            source = data_mod.ingest(config.data_root)
        stage = "partition"
        split, partition, preprocess_spec = prepare_cell_inputs(config, cell, source)

        stage = "teacher"
        teacher, teacher_history, teacher_ckpt = _prepare_teacher(
            config, cell, source, split, partition, preprocess_spec
        )
        teacher_train, teacher_val = _checkpoint_metrics(
            teacher_history, config.train_config.checkpoint_policy
        )

        artifacts = {"teacher_checkpoint": str(teacher_ckpt)}
        if cell.kind == "baseline":
            stage = "baseline"
            student = build_model(make_spec(cell.student), init_seed=cell.seed + 1)
            student, student_history = training.train_teacher(
                student, source, partition.labeled_idx, split.val_idx,
                train_config, preprocess_spec,
            )
        else:
            stage = "soft_labels"
            soft, soft_path = _prepare_soft_labels(
                config, cell, teacher, source, split, preprocess_spec
            )
            artifacts["soft_labels"] = str(soft_path)
            stage = "distill"
            student = build_model(make_spec(cell.student), init_seed=cell.seed + 1)
            student, student_history = training.distill_student(
                student, source, split, train_config, preprocess_spec, soft_labels=soft
            )
        stage = "evaluate"
        student_train, student_val = _checkpoint_metrics(
            student_history, config.train_config.checkpoint_policy
        )
        cell_dir.mkdir(parents=True, exist_ok=True)
        student_ckpt = cell_dir / "student.ntc"
        epoch = training.select_checkpoint_epoch(
            student_history, config.train_config.checkpoint_policy
        )
        training.save_checkpoint(
            student, student_ckpt, train_config, student_history[epoch].epoch
        )
        artifacts["student_checkpoint"] = str(student_ckpt)

        record = RunRecord(
            schema_version=SCHEMA_VERSION,
            cell=asdict(cell),
            status="ok",
            config_hash=config_hash,
            teacher_val=teacher_val,
            student_val=student_val,
            teacher_train=teacher_train,
            student_train=student_train,
            overfit_gap_teacher=overfit_gap(teacher_train, teacher_val),
            overfit_gap_student=overfit_gap(student_train, student_val),
            pct_increase=percent_increase(student_val, teacher_val),
            teacher_params=arch_parameter_count(cell.teacher),
            student_params=arch_parameter_count(cell.student),
            teacher_history=_history_dicts(teacher_history),
            student_history=_history_dicts(student_history),
            artifacts=artifacts,
        )
    except Exception as exc:
        record = RunRecord(
            schema_version=SCHEMA_VERSION,
            cell=asdict(cell),
            status="failed",
            config_hash=config_hash,
            error=f"{type(exc).__name__}: {exc}",
            failed_stage=stage,
        )
        if not isinstance(exc, SemidistillError):
            record.error += "\n" + traceback.format_exc(limit=3)
        cell_dir.mkdir(parents=True, exist_ok=True)
        record_path.write_text(json.dumps(asdict(record)))
        raise CellFailure(record) from exc

    cell_dir.mkdir(parents=True, exist_ok=True)
    record_path.write_text(json.dumps(asdict(record)))
    return record


def matrix_cells(config: ExperimentConfig) -> list[CellId]:
    """All (teacher, student, fraction, seed) cells under the size constraint."""
    cells = []
    for teacher in config.teachers:
        for student in config.students:
            if arch_parameter_count(student) > arch_parameter_count(teacher):
                continue
            for fraction in config.fractions:
                for seed in config.seeds:
                    cells.append(CellId(teacher, student, fraction, seed))
    if config.include_baselines:
        for student in config.students:
            for fraction in config.fractions:
                for seed in config.seeds:
                    cells.append(CellId(student, student, fraction, seed, "baseline"))
    return cells


def append_ledger(ledger_path, record: RunRecord) -> None:
    """Atomic append: rewrite to a temp file, then rename over the ledger."""
    ledger_path = Path(ledger_path)
    existing = ledger_path.read_text() if ledger_path.exists() else ""
    tmp = ledger_path.with_suffix(".tmp")
    tmp.write_text(existing + json.dumps(asdict(record)) + "\n")
    os.replace(tmp, ledger_path)


def run_matrix(config: ExperimentConfig, log=None) -> list[RunRecord]:
    """Run every cell fail-soft, appending each RunRecord to the ledger."""
    source = data_mod.ingest(config.data_root)
    Path(config.output_dir).mkdir(parents=True, exist_ok=True)
    ledger_path = Path(config.output_dir) / "ledger.jsonl"
    records = []
    for cell in matrix_cells(config):
        try:
            record = run_cell(config, cell, source=source)
        except CellFailure as exc:
            record = exc.record
        records.append(record)
        append_ledger(ledger_path, record)
        if log is not None:
            log(
                f"[{record.status}] {cell.slug()}"
                + (
                    f" teacher_val={record.teacher_val:.4f} student_val={record.student_val:.4f}"
                    if record.status == "ok"
                    else f" ({record.error})"
                )
            )
    return records


def load_ledger(ledger_path) -> list[RunRecord]:
    path = Path(ledger_path)
    if not path.is_file():
        raise ConfigError(f"missing ledger: {path}")
    records = []
    for line in path.read_text().splitlines():
        if line.strip():
            records.append(RunRecord(**json.loads(line)))
    return records
