"""Shared fixtures: synthetic datasets in the CIFAR-100 binary format.

Set ADAPTIVE_ATTN_DATA to a directory holding the real train.bin/test.bin to
run the data-dependent suites against actual CIFAR-100.
"""

import os

import pytest

from spanattn.data import write_synthetic_cifar100

DATA_ENV_VAR = "ADAPTIVE_ATTN_DATA"


def _real_data_dir():
    path = os.environ.get(DATA_ENV_VAR)
    if path and os.path.exists(os.path.join(path, "train.bin")) \
            and os.path.exists(os.path.join(path, "test.bin")):
        return path
    return None


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory):
    """Real CIFAR-100 binaries when available, else a mid-size synthetic set
    (enough for the 5000-image validation carve-out)."""
    real = _real_data_dir()
    if real:
        return real
    root = tmp_path_factory.mktemp("cifar_synth")
    write_synthetic_cifar100(root, seed=42, n_train=12000, n_test=2000)
    return root


@pytest.fixture(scope="session")
def full_scale_dir(tmp_path_factory):
    """Standard-size dataset (50000 train / 10000 test records)."""
    real = _real_data_dir()
    if real:
        return real
    root = tmp_path_factory.mktemp("cifar_full")
    write_synthetic_cifar100(root, seed=7, n_train=50000, n_test=10000)
    return root
