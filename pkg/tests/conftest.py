# Ensure repo root is on sys.path so the `rpca` package can be imported from tests
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import pytest

from rpca.data import SplitPolicy, build_manifest, stratified_split
from rpca.model import ModelVariant
from rpca.synthetic import SHAPE_CLASSES, make_synthetic_dataset
from rpca.train import TrainConfig, train

SHAPES = list(SHAPE_CLASSES)[:3]


@pytest.fixture(scope="session")
def shapes_root(tmp_path_factory):
    """Three coloured-shape classes, twelve 64×64 images each."""
    root = tmp_path_factory.mktemp("shapes")
    return make_synthetic_dataset(root, per_class=12, classes=SHAPES, size=64, seed=7)


@pytest.fixture(scope="session")
def shapes_manifest(shapes_root):
    """Six train / two val / four test images per class."""
    manifest = build_manifest(shapes_root)
    policy = SplitPolicy(
        mode="count_table",
        per_class_train_counts={c: 6 for c in manifest.classes},
        per_class_val_counts={c: 2 for c in manifest.classes},
        seed=3,
    )
    return stratified_split(manifest, policy)


def toy_train_config(**overrides) -> TrainConfig:
    settings = dict(epochs=2, lr=0.05, momentum=0.9, batch_size=6, seed=11, trainable_backbone=False)
    settings.update(overrides)
    return TrainConfig(**settings)


@pytest.fixture(scope="session")
def toy_run(shapes_manifest, tmp_path_factory):
    """A short full-variant run on the toy backbone, with checkpoints on disk."""
    out = tmp_path_factory.mktemp("toy_run")
    checkpoint = train(
        toy_train_config(), ModelVariant(kind="full", backbone="toy"), shapes_manifest, out_dir=out, device="cpu"
    )
    return checkpoint, out
