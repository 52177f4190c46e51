"""Command-line surface for the pipeline stages.

Every subcommand accepts ``--config FILE`` (a JSON document of the same
fields as the flags); explicit flags win over config-file values. Errors
are emitted as one JSON object on stderr. Exit codes: 0 success, 1 stage
failure, 2 usage error.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from . import data as data_mod
from . import experiments, report, training
from .errors import ProvenanceError, SemidistillError
from .experiments import CellFailure, CellId, ExperimentConfig
from .models import build_model, make_spec

OUTPUT_DIR_ENV = "SEMIDISTILL_OUT"


def _load_config(config_path) -> dict:
    if not config_path:
        return {}
    return json.loads(Path(config_path).read_text())


def _merged(config_path, **flags) -> dict:
    doc = _load_config(config_path)
    for key, value in flags.items():
        if value is not None:
            doc[key] = value
    return doc


def _require(doc: dict, *keys):
    for key in keys:
        if doc.get(key) is None:
            raise click.UsageError(f"missing required option --{key.replace('_', '-')}")


def _default_output_dir(doc: dict) -> dict:
    if doc.get("output_dir") is None and os.environ.get(OUTPUT_DIR_ENV):
        doc["output_dir"] = os.environ[OUTPUT_DIR_ENV]
    return doc


def _experiment_config(doc: dict) -> ExperimentConfig:
    _default_output_dir(doc)
    _require(doc, "data_root", "output_dir")
    train_keys = ("epochs", "batch_size", "seed", "temperature", "learning_rate",
                  "momentum", "weight_decay", "checkpoint_policy")
    train_config = doc.pop("train_config", {})
    for key in train_keys:
        if doc.get(key) is not None:
            train_config[key] = doc.pop(key)
        else:
            doc.pop(key, None)
    doc["train_config"] = train_config
    return ExperimentConfig.from_dict(doc)


def _emit(doc: dict) -> None:
    click.echo(json.dumps(doc, indent=2, default=str))


@click.group()
def main():
    """Semi-supervised knowledge distillation pipeline."""


def _common_cell_options(fn):
    for opt in reversed(
        [
            click.option("--config", "config_path", type=click.Path(exists=True)),
            click.option("--data-root", "data_root"),
            click.option("--output-dir", "output_dir"),
            click.option("--registry", type=click.Choice(["desk", "paper"])),
            click.option("--fraction", type=float),
            click.option("--seed", type=int),
            click.option("--subset-size", "subset_size", type=int),
            click.option("--epochs", type=int),
            click.option("--batch-size", "batch_size", type=int),
            click.option("--learning-rate", "learning_rate", type=float),
            click.option("--temperature", type=float),
            click.option("--augment/--no-augment", "augment", default=None),
        ]
    ):
        fn = opt(fn)
    return fn


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--data-root", "data_root")
def ingest(config_path, data_root):
    """Validate the CIFAR-10 binary archive and print its checksum."""
    doc = _merged(config_path, data_root=data_root)
    _require(doc, "data_root")
    source = data_mod.ingest(doc["data_root"])
    _emit(
        {
            "checksum": source.checksum,
            "n_train": source.n_train,
            "n_test": source.n_test,
            "num_classes": source.num_classes,
        }
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--data-root", "data_root")
@click.option("--seed", type=int)
@click.option("--fraction", type=float)
@click.option("--stratified/--no-stratified", default=None)
@click.option("--out", "out_path")
def split(config_path, data_root, seed, fraction, stratified, out_path):
    """Write a replayable split manifest (train/val/test, optional partition)."""
    doc = _merged(config_path, data_root=data_root, seed=seed, fraction=fraction,
                  stratified=stratified, out_path=out_path)
    _require(doc, "data_root", "out_path")
    source = data_mod.ingest(doc["data_root"])
    split_index = data_mod.make_splits(source, doc.get("seed", 0))
    partition = None
    if doc.get("fraction") is not None:
        partition = data_mod.partition_labels(
            split_index, doc["fraction"], doc.get("seed", 0),
            doc.get("stratified", True), labels=source.labels,
        )
    data_mod.save_split_manifest(doc["out_path"], split_index, partition)
    _emit({"manifest": doc["out_path"], "sizes": [len(split_index.train_idx),
          len(split_index.val_idx), len(split_index.test_idx)]})


@main.command("train-teacher")
@_common_cell_options
@click.option("--arch")
def train_teacher(config_path, arch, **flags):
    """Train one supervised teacher for (arch, fraction, seed)."""
    doc = _merged(config_path, **flags)
    arch = arch or doc.pop("arch", None)
    if arch is None:
        raise click.UsageError("missing required option --arch")
    doc.setdefault("teachers", [arch])
    doc.setdefault("students", [arch])
    fraction = doc.pop("fraction", 1.0)
    seed = doc.pop("seed", 0)
    config = _experiment_config(doc)
    cell = CellId(arch, arch, fraction, seed)
    source = data_mod.ingest(config.data_root)
    split_index, partition, spec = experiments.prepare_cell_inputs(config, cell, source)
    teacher, history, ckpt = experiments._prepare_teacher(
        config, cell, source, split_index, partition, spec
    )
    idx = training.select_checkpoint_epoch(history, config.train_config.checkpoint_policy)
    _emit(
        {
            "checkpoint": str(ckpt),
            "epochs": len(history),
            "train_accuracy": history[idx].train_accuracy,
            "val_accuracy": history[idx].val_accuracy,
        }
    )


@main.command("soft-labels")
@_common_cell_options
@click.option("--arch")
@click.option("--out", "out_path")
def soft_labels(config_path, arch, out_path, **flags):
    """Generate (or reuse) the teacher's soft-label cache for one cell."""
    doc = _merged(config_path, **flags)
    arch = arch or doc.pop("arch", None)
    if arch is None:
        raise click.UsageError("missing required option --arch")
    doc.setdefault("teachers", [arch])
    doc.setdefault("students", [arch])
    doc.pop("out_path", None)
    fraction = doc.pop("fraction", 1.0)
    seed = doc.pop("seed", 0)
    config = _experiment_config(doc)
    cell = CellId(arch, arch, fraction, seed)
    source = data_mod.ingest(config.data_root)
    split_index, partition, spec = experiments.prepare_cell_inputs(config, cell, source)
    teacher, _, _ = experiments._prepare_teacher(config, cell, source, split_index, partition, spec)
    labels, path = experiments._prepare_soft_labels(config, cell, teacher, source, split_index, spec)
    _emit({"soft_labels": str(path), "rows": len(labels.rows), "teacher_id": labels.teacher_id})


@main.command()
@_common_cell_options
@click.option("--teacher", "teacher_arch")
@click.option("--student", "student_arch")
@click.option("--soft-labels", "soft_label_path", type=click.Path())
def distill(config_path, teacher_arch, student_arch, soft_label_path, **flags):
    """Run one distillation cell (teacher -> student at a label fraction)."""
    doc = _merged(config_path, **flags)
    teacher_arch = teacher_arch or doc.pop("teacher", None)
    student_arch = student_arch or doc.pop("student", None) or teacher_arch
    if teacher_arch is None:
        raise click.UsageError("missing required option --teacher")
    soft_label_path = soft_label_path or doc.pop("soft_labels", None)
    if soft_label_path is not None and not Path(soft_label_path).is_file():
        raise ProvenanceError(
            f"soft-label provenance check failed: missing file {soft_label_path}"
        )
    doc.setdefault("teachers", [teacher_arch])
    doc.setdefault("students", [student_arch])
    fraction = doc.pop("fraction", 1.0)
    seed = doc.pop("seed", 0)
    config = _experiment_config(doc)
    cell = CellId(teacher_arch, student_arch, fraction, seed)
    record = experiments.run_cell(config, cell)
    _emit(
        {
            "cell": record.cell,
            "status": record.status,
            "teacher_val": record.teacher_val,
            "student_val": record.student_val,
            "pct_increase": record.pct_increase,
            "artifacts": record.artifacts,
        }
    )


@main.command("eval")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--data-root", "data_root")
@click.option("--checkpoint", "checkpoint")
@click.option("--seed", type=int)
@click.option("--set", "eval_set", type=click.Choice(["train", "val", "test"]))
def eval_cmd(config_path, data_root, checkpoint, seed, eval_set):
    """Evaluate a checkpoint on the train, val or test split."""
    doc = _merged(config_path, data_root=data_root, checkpoint=checkpoint,
                  seed=seed, eval_set=eval_set)
    _require(doc, "data_root", "checkpoint")
    source = data_mod.ingest(doc["data_root"])
    split_index = data_mod.make_splits(source, doc.get("seed", 0))
    idx = getattr(split_index, f"{doc.get('eval_set', 'val')}_idx")
    handle, _ = training.load_checkpoint(doc["checkpoint"])
    mean, std = data_mod.compute_normalization(source, split_index.train_idx)
    spec = data_mod.PreprocessSpec(normalize_mean=mean, normalize_std=std, augment_enabled=False)
    acc = training.evaluate(handle, source.images[idx], source.labels[idx], spec)
    _emit({"set": doc.get("eval_set", "val"), "n": len(idx), "accuracy": acc})


@main.command("run-matrix")
@_common_cell_options
@click.option("--teachers")
@click.option("--students")
@click.option("--fractions")
@click.option("--seeds")
@click.option("--include-baselines/--no-include-baselines", "include_baselines", default=None)
def run_matrix(config_path, teachers, students, fractions, seeds, include_baselines, **flags):
    """Run the full experiment matrix fail-soft, appending to the ledger."""
    doc = _merged(config_path, include_baselines=include_baselines, **flags)
    doc.pop("fraction", None)
    doc.pop("seed", None)
    if teachers:
        doc["teachers"] = teachers.split(",")
    if students:
        doc["students"] = students.split(",")
    if fractions:
        doc["fractions"] = [float(f) for f in fractions.split(",")]
    if seeds:
        doc["seeds"] = [int(s) for s in seeds.split(",")]
    config = _experiment_config(doc)
    records = experiments.run_matrix(config, log=click.echo)
    failed = [r for r in records if r.status != "ok"]
    _emit(
        {
            "ledger": str(Path(config.output_dir) / "ledger.jsonl"),
            "cells": len(records),
            "failed": len(failed),
        }
    )
    if failed:
        raise SemidistillError(f"{len(failed)} of {len(records)} cells failed")


@main.command("report")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--ledger", "ledger")
@click.option("--out-dir", "out_dir")
def report_cmd(config_path, ledger, out_dir):
    """Emit CSV tables and charts from a run ledger."""
    doc = _merged(config_path, ledger=ledger, output_dir=out_dir)
    _default_output_dir(doc)
    _require(doc, "ledger", "output_dir")
    bundle = report.emit_report(doc["ledger"], doc["output_dir"])
    _emit(
        {
            "tables": {k: str(v) for k, v in bundle.tables.items()},
            "plots": {k: str(v) for k, v in bundle.plots.items()},
            "manifest": str(bundle.manifest),
        }
    )


def cli(argv) -> int:
    """Run the CLI programmatically; returns the process exit status."""
    try:
        main.main(args=list(argv), standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        hint = exc.ctx.get_usage() if exc.ctx else main.get_usage(click.Context(main))
        sys.stderr.write(hint + "\n" + exc.format_message() + "\n")
        return 2
    except click.Abort:
        return 1
    except CellFailure as exc:
        sys.stderr.write(
            json.dumps({"error": exc.record.error, "stage": exc.record.failed_stage}) + "\n"
        )
        return 1
    except SemidistillError as exc:
        sys.stderr.write(json.dumps({"error": str(exc), "stage": exc.stage}) + "\n")
        return 1


def entrypoint() -> None:
    sys.exit(cli(sys.argv[1:]))
