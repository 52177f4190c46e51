import dataclasses

import numpy as np
import pytest
import torch
from torch import nn

from semidistill import data as data_mod
from semidistill import training
from semidistill.errors import ConfigError, ProvenanceError, TrainingError
from semidistill.models import ModelHandle, build_model, make_spec
from semidistill.softlabels import load_soft_labels, save_soft_labels
from semidistill.training import TrainConfig

FAST = TrainConfig(epochs=2, batch_size=64, learning_rate=0.02, checkpoint_policy="last")


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.epochs == 30
        assert cfg.momentum == 0.9
        assert cfg.weight_decay == 5e-4
        assert cfg.batch_size == 128
        assert cfg.checkpoint_policy == "best_val"

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"epochs": 0},
            {"momentum": 1.0},
            {"momentum": -0.1},
            {"weight_decay": -1e-4},
            {"batch_size": 0},
            {"learning_rate": -0.1},
            {"temperature": 0.0},
            {"checkpoint_policy": "latest"},
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestOptimizerUpdate:
    def test_matches_closed_form_momentum_sgd(self):
        # quadratic loss 0.5*||w||^2: gradient is w itself, so three steps of
        # v <- mu*v + g + lambda*w ; w <- w - lr*v are checkable by hand
        lr, mu, wd = 0.1, 0.9, 0.01
        w = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
        opt = torch.optim.SGD([w], lr=lr, momentum=mu, weight_decay=wd)
        expected = np.array([1.0, -2.0])
        velocity = np.zeros(2)
        for _ in range(3):
            opt.zero_grad()
            loss = 0.5 * (w * w).sum()
            loss.backward()
            opt.step()
            grad = expected + wd * expected
            velocity = mu * velocity + grad
            expected = expected - lr * velocity
            assert np.max(np.abs(w.detach().numpy() - expected)) < 1e-12


class OracleModule(nn.Module):
    """Reads the class id that the test encodes as a constant pixel level."""

    def __init__(self, scale=20.0):
        super().__init__()
        self.scale = scale

    def forward(self, x):
        cls = torch.round(x.mean(dim=(1, 2, 3)) * 255.0 / self.scale).long()
        cls = torch.clamp(cls, 0, 9)
        return torch.nn.functional.one_hot(cls, 10).float()


def oracle_handle():
    return ModelHandle(spec=make_spec("desk-small"), module=OracleModule(), parameter_count=0)


class TestEvaluate:
    def test_oracle_model_is_perfect(self, plain_spec):
        labels = np.arange(40) % 10
        images = (labels[:, None, None, None] * 20).astype(np.uint8) * np.ones(
            (1, 32, 32, 3), dtype=np.uint8
        )
        spec = data_mod.PreprocessSpec(augment_enabled=False)
        assert training.evaluate(oracle_handle(), images, labels, spec) == 1.0

    def test_constant_model_on_balanced_labels(self, source, split0, plain_spec):
        # zeroed head -> all-zero logits -> argmax ties resolve to class 0
        handle = build_model(make_spec("desk-small"))
        with torch.no_grad():
            handle.module.fc.weight.zero_()
            handle.module.fc.bias.zero_()
        idx = np.concatenate(
            [np.flatnonzero(source.labels[:2000] == c)[:20] for c in range(10)]
        )
        acc = training.evaluate(handle, source.images[idx], source.labels[idx], plain_spec)
        assert acc == pytest.approx(0.1)

    def test_empty_set_rejected(self, source, plain_spec):
        with pytest.raises(TrainingError):
            training.evaluate(oracle_handle(), source.images[:0], source.labels[:0], plain_spec)


class TestCheckpointSelection:
    def make_history(self, vals):
        return [
            training.EpochMetrics(epoch=i + 1, train_loss=0.0, train_accuracy=0.0, val_accuracy=v)
            for i, v in enumerate(vals)
        ]

    def test_best_val_ties_go_earliest(self):
        history = self.make_history([0.5, 0.7, 0.7, 0.6])
        assert training.select_checkpoint_epoch(history, "best_val") == 1

    def test_last(self):
        history = self.make_history([0.5, 0.7, 0.6])
        assert training.select_checkpoint_epoch(history, "last") == 2


class TestTeacherTraining:
    def test_history_and_determinism(self, source, tiny_split, plain_spec):
        handle_a = build_model(make_spec("desk-small"), init_seed=0)
        _, hist_a = training.train_teacher(
            handle_a, source, tiny_split.train_idx, tiny_split.val_idx, FAST, plain_spec
        )
        assert [m.epoch for m in hist_a] == [1, 2]
        for m in hist_a:
            assert 0.0 <= m.train_accuracy <= 1.0
            assert 0.0 <= m.val_accuracy <= 1.0
            assert np.isfinite(m.train_loss)

        handle_b = build_model(make_spec("desk-small"), init_seed=0)
        _, hist_b = training.train_teacher(
            handle_b, source, tiny_split.train_idx, tiny_split.val_idx, FAST, plain_spec
        )
        for a, b in zip(hist_a, hist_b):
            assert a.train_loss == b.train_loss
            assert a.val_accuracy == b.val_accuracy
        for key, tensor in handle_a.module.state_dict().items():
            assert torch.equal(tensor, handle_b.module.state_dict()[key])

    def test_empty_labeled_set(self, source, tiny_split, plain_spec):
        handle = build_model(make_spec("desk-small"))
        with pytest.raises(TrainingError):
            training.train_teacher(
                handle, source, np.array([], dtype=np.int64), tiny_split.val_idx, FAST, plain_spec
            )

    def test_best_val_restores_best_weights(self, source, tiny_split, plain_spec):
        config = dataclasses.replace(FAST, epochs=3, checkpoint_policy="best_val")
        handle = build_model(make_spec("desk-small"), init_seed=0)
        handle, history = training.train_teacher(
            handle, source, tiny_split.train_idx, tiny_split.val_idx, config, plain_spec
        )
        best = training.select_checkpoint_epoch(history, "best_val")
        val_images = source.images[tiny_split.val_idx]
        val_labels = source.labels[tiny_split.val_idx]
        acc = training.evaluate(handle, val_images, val_labels, plain_spec)
        assert acc == pytest.approx(history[best].val_accuracy)


@pytest.fixture(scope="module")
def teacher(source, tiny_split, plain_spec):
    handle = build_model(make_spec("desk-small"), init_seed=0)
    handle, _ = training.train_teacher(
        handle, source, tiny_split.train_idx, tiny_split.val_idx, FAST, plain_spec
    )
    return handle


class TestSoftLabels:
    def test_rows_align_with_train_split(self, teacher, source, tiny_split, plain_spec):
        labels = training.generate_soft_labels(teacher, source, tiny_split, plain_spec)
        assert labels.rows.shape == (len(tiny_split.train_idx), 10)
        assert labels.rows.dtype == np.float32
        assert np.max(np.abs(labels.rows.sum(axis=1) - 1.0)) < 1e-5
        assert labels.split_seed == tiny_split.seed
        assert labels.dataset_checksum == source.checksum

    def test_rejects_augmented_spec(self, teacher, source, tiny_split):
        spec = data_mod.PreprocessSpec(augment_enabled=True)
        with pytest.raises(ConfigError):
            training.generate_soft_labels(teacher, source, tiny_split, spec)

    def test_regeneration_is_bit_identical(self, teacher, source, tiny_split, plain_spec):
        a = training.generate_soft_labels(teacher, source, tiny_split, plain_spec)
        b = training.generate_soft_labels(teacher, source, tiny_split, plain_spec)
        assert np.array_equal(a.rows, b.rows)
        assert a.teacher_id == b.teacher_id

    def test_round_trip_bit_exact(self, teacher, source, tiny_split, plain_spec, tmp_path):
        labels = training.generate_soft_labels(teacher, source, tiny_split, plain_spec)
        path = tmp_path / "cache.slbl"
        save_soft_labels(labels, path)
        loaded = load_soft_labels(path)
        assert np.array_equal(loaded.rows, labels.rows)
        assert loaded.teacher_id == labels.teacher_id
        assert loaded.temperature_used == labels.temperature_used

    def test_provenance_rejections(self, teacher, source, tiny_split, plain_spec):
        from semidistill.softlabels import check_provenance

        labels = training.generate_soft_labels(teacher, source, tiny_split, plain_spec)
        with pytest.raises(ProvenanceError, match="checksum"):
            check_provenance(labels, "deadbeef", tiny_split.seed)
        with pytest.raises(ProvenanceError, match="seed"):
            check_provenance(labels, source.checksum, tiny_split.seed + 1)
        with pytest.raises(ProvenanceError, match="teacher"):
            check_provenance(labels, source.checksum, tiny_split.seed, teacher_id="other")
        with pytest.raises(ProvenanceError, match="rows"):
            check_provenance(labels, source.checksum, tiny_split.seed, n_rows=3)


class TestDistillation:
    def test_requires_exactly_one_signal(self, source, tiny_split, plain_spec, teacher):
        student = build_model(make_spec("desk-small"), init_seed=1)
        with pytest.raises(ConfigError):
            training.distill_student(student, source, tiny_split, FAST, plain_spec)

    def test_mimicry_fixed_point(self, source, tiny_split, plain_spec, teacher):
        # same weights, zero learning rate: the student already matches the
        # teacher, so every batch loss sits at numerical zero
        student = build_model(make_spec("desk-small"), init_seed=0)
        student.module.load_state_dict(teacher.module.state_dict())
        before = {k: v.clone() for k, v in student.module.state_dict().items()}
        config = dataclasses.replace(FAST, learning_rate=0.0)
        student, history = training.distill_student(
            student, source, tiny_split, config, plain_spec, teacher=teacher
        )
        assert history[0].train_loss < 1e-5
        for key, tensor in student.module.state_dict().items():
            assert torch.equal(tensor, before[key])

    def test_cached_equals_live(self, source, tiny_split, plain_spec, teacher):
        cached = training.generate_soft_labels(teacher, source, tiny_split, plain_spec)
        student_a = build_model(make_spec("desk-small"), init_seed=1)
        student_a, hist_a = training.distill_student(
            student_a, source, tiny_split, FAST, plain_spec, soft_labels=cached
        )
        student_b = build_model(make_spec("desk-small"), init_seed=1)
        student_b, hist_b = training.distill_student(
            student_b, source, tiny_split, FAST, plain_spec, teacher=teacher
        )
        for a, b in zip(hist_a, hist_b):
            assert a.train_loss == pytest.approx(b.train_loss, abs=1e-5)
            assert a.val_accuracy == pytest.approx(b.val_accuracy, abs=0.02)

    def test_cached_provenance_enforced(self, source, tiny_split, plain_spec, teacher):
        cached = training.generate_soft_labels(teacher, source, tiny_split, plain_spec)
        stale = dataclasses.replace(cached, split_seed=tiny_split.seed + 1)
        student = build_model(make_spec("desk-small"), init_seed=1)
        with pytest.raises(ProvenanceError):
            training.distill_student(
                student, source, tiny_split, FAST, plain_spec, soft_labels=stale
            )

    def test_empty_train_set(self, source, tiny_split, plain_spec, teacher):
        student = build_model(make_spec("desk-small"), init_seed=1)
        with pytest.raises(TrainingError):
            training.distill_student(
                student, source, tiny_split, FAST, plain_spec, teacher=teacher,
                train_idx=np.array([], dtype=np.int64),
            )


class TestCheckpointIO:
    def test_round_trip(self, source, tiny_split, plain_spec, tmp_path):
        handle = build_model(make_spec("desk-small"), init_seed=0)
        handle, history = training.train_teacher(
            handle, source, tiny_split.train_idx, tiny_split.val_idx, FAST, plain_spec
        )
        path = tmp_path / "teacher.ntc"
        training.save_checkpoint(handle, path, FAST, epoch=2, history=history)
        loaded, sidecar = training.load_checkpoint(path)
        assert sidecar["epoch"] == 2
        assert sidecar["spec"]["name"] == "desk-small"
        assert len(sidecar["history"]) == 2
        for key, tensor in handle.module.state_dict().items():
            assert torch.equal(loaded.module.state_dict()[key], tensor)
