import os
from pathlib import Path

import numpy as np
import pytest

from configuration import DATA_ROOT_ENV
from data_process import DatasetHandle
from model_zoo import ArchitectureSpec, LayerSpec
from sn_core import OwnerIdentity, SNPattern, generate_keypair
from training import TrainingConfig

TIMESTAMP = "2024-01-01T00:00:00+00:00"


def make_images(n: int, seed: int, noise: float = 0.3):
    """8x8 gray images, class c is a bright 4x2 bar at columns 2c+1..2c+2."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 3
    images = rng.uniform(0.0, noise, size=(n, 8, 8, 1))
    for i, c in enumerate(labels):
        images[i, 3:7, 2 * c + 1 : 2 * c + 3, 0] = 0.9
    return images.astype(np.float32), labels


@pytest.fixture
def tiny_spec() -> ArchitectureSpec:
    layers = [
        LayerSpec.conv(4),
        LayerSpec.maxpool(4),
        LayerSpec.dense(16),
        LayerSpec.dense(3, "softmax"),
    ]
    spec = ArchitectureSpec(
        name="tiny", layers=layers, input_shape=(8, 8, 1), num_classes=3, split_index=3
    )
    return spec.validate_shapes()


@pytest.fixture
def tiny_data() -> DatasetHandle:
    train_x, train_y = make_images(300, seed=0)
    test_x, test_y = make_images(90, seed=1)
    return DatasetHandle.from_arrays("tiny", train_x, train_y, test_x, test_y, num_classes=3)


@pytest.fixture
def tiny_pattern() -> SNPattern:
    return SNPattern(block=[[1, 0], [0, 1]])


@pytest.fixture
def tiny_config() -> TrainingConfig:
    return TrainingConfig(
        epochs=1,
        teacher_batch=50,
        student_batch=50,
        val_size=30,
        test_batch_size=64,
        seed=0,
    )


@pytest.fixture
def key_file(tmp_path) -> str:
    path = tmp_path / "owner.pem"
    generate_keypair(str(path), seed=b"test-owner")
    return str(path)


@pytest.fixture
def identity(key_file) -> OwnerIdentity:
    return OwnerIdentity(owner_name="Acme Corp", timestamp=TIMESTAMP, keypair_ref=key_file)


@pytest.fixture(scope="session")
def mnist_root() -> str:
    root = os.environ.get(DATA_ROOT_ENV, "")
    if not root or not (Path(root) / "MNIST" / "raw" / "train-images-idx3-ubyte").exists():
        pytest.skip(f"MNIST not found under ${DATA_ROOT_ENV}")
    return root
