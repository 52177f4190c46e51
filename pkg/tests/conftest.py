import numpy as np
import pytest
import torch

from semidistill import data as data_mod
from semidistill.synthetic import write_synthetic_cifar

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    return write_synthetic_cifar(root)


@pytest.fixture(scope="session")
def source(data_root):
    return data_mod.ingest(data_root)


@pytest.fixture(scope="session")
def split0(source):
    return data_mod.make_splits(source, seed=0)


def small_split(split, n_train=400, n_val=100, seed=7):
    """A tiny SplitIndex carved out of a full split, for fast training tests."""
    rng = np.random.default_rng(seed)
    train = np.sort(rng.permutation(split.train_idx)[:n_train])
    val = np.sort(rng.permutation(split.val_idx)[:n_val])
    return data_mod.SplitIndex(
        train_idx=train,
        val_idx=val,
        test_idx=split.test_idx,
        seed=split.seed,
        checksum=split.checksum,
    )


@pytest.fixture(scope="session")
def tiny_split(split0):
    return small_split(split0)


@pytest.fixture(scope="session")
def plain_spec():
    return data_mod.PreprocessSpec(
        normalize_mean=np.full(3, 0.5, dtype=np.float32),
        normalize_std=np.full(3, 0.25, dtype=np.float32),
        augment_enabled=False,
    )
