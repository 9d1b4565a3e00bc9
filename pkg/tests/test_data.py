"""Ingestion, stratified splitting, augmentation and batch iteration."""
import pytest
import torch
from PIL import Image

from rpca.data import (
    AugmentConfig,
    BlurConfig,
    DatasetManifest,
    ManifestRecord,
    SplitPolicy,
    augment,
    batch_iterator,
    build_manifest,
    eval_transform,
    resize_to_source,
    stratified_split,
)
from rpca.errors import ConfigurationError, DataPipelineError, IngestionError, SplitError
from rpca.womensports import DATASET_DISTRIBUTIONS, WOMENSPORTS_COUNTS, WOMENSPORTS_TOTAL_IMAGES, count_table


def table_sized_manifest() -> DatasetManifest:
    """Records only (no files) with the published per-class image totals."""
    classes = sorted(WOMENSPORTS_COUNTS)
    records = []
    for index, name in enumerate(classes):
        train, test = WOMENSPORTS_COUNTS[name]
        records.extend(ManifestRecord(f"{name}/{i:05d}.jpg", name, index) for i in range(train + test))
    return DatasetManifest(records=records, classes=classes, root="/nonexistent")


def test_published_table_totals():
    assert len(WOMENSPORTS_COUNTS) == 50
    assert sum(tr + te for tr, te in WOMENSPORTS_COUNTS.values()) == WOMENSPORTS_TOTAL_IMAGES
    assert DATASET_DISTRIBUTIONS["womensports"][0] == 50
    with pytest.raises(ConfigurationError):
        count_table("imagenet")


def test_count_table_split_reproduces_per_class_counts():
    split = stratified_split(table_sized_manifest(), SplitPolicy.from_table("womensports", seed=0))
    counts = split.split_counts()
    # the per-class table sums to 1675; the prose total of 1676 is not reachable from it
    assert counts["train"] == 1675
    assert counts["val"] == 0
    assert counts["test"] == WOMENSPORTS_TOTAL_IMAGES - 1675
    per_class = split.class_split_counts()
    assert (per_class["Archery"]["train"], per_class["Archery"]["test"]) == (30, 574)
    assert (per_class["Basketball"]["train"], per_class["Basketball"]["test"]) == (40, 757)
    for name, (train, test) in WOMENSPORTS_COUNTS.items():
        assert per_class[name]["train"] == train
        assert per_class[name]["test"] == test


def test_mirrored_validation_split():
    split = stratified_split(table_sized_manifest(), SplitPolicy.from_table("womensports", with_val=True, seed=0))
    counts = split.split_counts()
    assert (counts["train"], counts["val"], counts["test"]) == (1675, 1675, 30154)


def test_split_is_deterministic_in_seed():
    manifest = table_sized_manifest()
    a = stratified_split(manifest, SplitPolicy.from_table("womensports", seed=4))
    b = stratified_split(manifest, SplitPolicy.from_table("womensports", seed=4))
    c = stratified_split(manifest, SplitPolicy.from_table("womensports", seed=5))
    assert a.to_csv_text() == b.to_csv_text()
    assert a.to_csv_text() != c.to_csv_text()


def test_ratio_split_rounds_per_class():
    records = [ManifestRecord(f"a/{i}.png", "a", 0) for i in range(30)] + [
        ManifestRecord(f"b/{i}.png", "b", 1) for i in range(50)
    ]
    manifest = DatasetManifest(records, ["a", "b"], "/x")
    split = stratified_split(manifest, SplitPolicy(mode="ratio", train_ratio=0.05, val_ratio=0.05))
    per_class = split.class_split_counts()
    assert per_class["a"]["train"] == 2  # 1.5 rounds half up
    assert per_class["b"]["train"] == 3  # 2.5 rounds half up
    assert per_class["b"]["val"] == 3


def test_split_errors():
    records = [ManifestRecord(f"a/{i}.png", "a", 0) for i in range(3)]
    manifest = DatasetManifest(records, ["a"], "/x")
    with pytest.raises(SplitError):
        stratified_split(manifest, SplitPolicy.uniform(["a"], 5))
    with pytest.raises(SplitError):
        stratified_split(manifest, SplitPolicy(per_class_train_counts={"b": 1}))
    done = stratified_split(manifest, SplitPolicy.uniform(["a"], 1))
    with pytest.raises(SplitError):
        stratified_split(done, SplitPolicy.uniform(["a"], 1))
    assert stratified_split(done.unassigned(), SplitPolicy.uniform(["a"], 1)).split_counts()["train"] == 1
    with pytest.raises(ConfigurationError):
        SplitPolicy(mode="ratio", train_ratio=0.7, val_ratio=0.4)


def test_manifest_csv_round_trip(shapes_manifest, tmp_path):
    path = tmp_path / "manifest.csv"
    shapes_manifest.to_csv(path)
    again = DatasetManifest.from_csv(path, shapes_manifest.root)
    assert again == shapes_manifest
    assert path.read_bytes() == again.to_csv_text().encode("utf-8")


def test_manifest_rejects_foreign_csv(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(IngestionError):
        DatasetManifest.from_csv(path, tmp_path)


def test_ingest_skips_undecodable_files_and_empty_classes(tmp_path):
    (tmp_path / "cats").mkdir()
    (tmp_path / "dogs").mkdir()
    (tmp_path / "empty").mkdir()
    Image.new("RGB", (8, 8), (10, 20, 30)).save(tmp_path / "cats" / "a.png")
    Image.new("RGB", (8, 8), (30, 20, 10)).save(tmp_path / "dogs" / "b.png")
    (tmp_path / "dogs" / "broken.jpg").write_bytes(b"\xff\xd8\xff\xe0 not really a jpeg")
    (tmp_path / "empty" / "notes.txt").write_text("nothing here")

    manifest = build_manifest(tmp_path)

    assert manifest.classes == ["cats", "dogs"]
    assert [r.relative_path for r in manifest.records] == ["cats/a.png", "dogs/b.png"]
    assert {rel for rel, _ in manifest.skipped} == {"dogs/broken.jpg", "empty/notes.txt"}
    assert any("empty" in w for w in manifest.warnings)

    report = tmp_path / "skipped.tsv"
    manifest.write_skip_report(report)
    assert len(report.read_text().splitlines()) == 2


def test_ingest_requires_class_folders(tmp_path):
    with pytest.raises(IngestionError):
        build_manifest(tmp_path)


def _image(side=256, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(3, side, side, generator=g) * 255


def test_augment_is_deterministic_in_seed():
    image = _image()
    cfg = AugmentConfig(regime="extended")
    a = augment(image, cfg, 123)
    b = augment(image, cfg, 123)
    c = augment(image, cfg, 124)
    assert a.shape == (3, 224, 224)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert a.min() >= 0 and a.max() <= 255


def test_identity_augment_is_centre_crop():
    image = _image()
    cfg = AugmentConfig(rotation_deg=0.0, zoom_range=(1.0, 1.0), random_crop=False, hflip_prob=1.0)
    assert torch.equal(augment(image, cfg, 5), image[:, 16:240, 16:240])


def test_extended_regime_adds_flip():
    image = _image()
    cfg = AugmentConfig(
        rotation_deg=0.0,
        zoom_range=(1.0, 1.0),
        random_crop=False,
        hflip_prob=1.0,
        regime="extended",
        blur=BlurConfig(enabled=False),
    )
    assert torch.equal(augment(image, cfg, 5), image[:, 16:240, 16:240].flip(-1))


def test_augment_config_validation():
    with pytest.raises(ConfigurationError):
        AugmentConfig(crop_side=300)
    with pytest.raises(ConfigurationError):
        AugmentConfig(regime="heavy")
    with pytest.raises(ConfigurationError):
        AugmentConfig(blur=BlurConfig(kernel_side=4))


def test_eval_transform_centre_crop():
    image = _image()
    out = eval_transform(image)
    assert torch.equal(out, image[:, 16:240, 16:240])
    assert eval_transform(_image(64)).shape == (3, 224, 224)


def test_pad_resize_keeps_aspect_ratio():
    wide = torch.full((3, 50, 100), 200.0)
    out = resize_to_source(wide, 256, mode="pad")
    assert out.shape == (3, 256, 256)
    assert out[:, 0, :].abs().max() == 0  # padded band
    assert torch.allclose(out[:, 128, 10:246], torch.full((3, 236), 200.0), atol=1e-3)


def test_batch_iterator_covers_each_split_once(shapes_manifest):
    for split in ("train", "val", "test"):
        expected = [i for i, _ in shapes_manifest.split_records(split)]
        seen = []
        for images, labels, ids in batch_iterator(shapes_manifest, split, 4, epoch_seed=9, with_ids=True):
            assert images.shape[1:] == (3, 224, 224)
            assert len(images) == len(labels) == len(ids) <= 4
            seen.extend(ids.tolist())
        assert sorted(seen) == expected
        if split != "train":
            assert seen == expected


def test_batch_iterator_train_order_depends_on_epoch_seed(shapes_manifest):
    def order(seed):
        return [i for _, _, ids in batch_iterator(shapes_manifest, "train", 5, epoch_seed=seed, with_ids=True) for i in ids.tolist()]

    assert order(1) == order(1)
    assert order(1) != order(2)


def test_batch_iterator_augmented_batches_repeat(shapes_manifest):
    cfg = AugmentConfig(regime="extended")
    a = [x for x, _ in batch_iterator(shapes_manifest, "train", 6, epoch_seed=3, augment_config=cfg)]
    b = [x for x, _ in batch_iterator(shapes_manifest, "train", 6, epoch_seed=3, augment_config=cfg)]
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_batch_iterator_one_hot(shapes_manifest):
    _, labels = next(iter(batch_iterator(shapes_manifest, "test", 4, one_hot=True)))
    assert labels.shape == (4, 3)
    assert torch.equal(labels.sum(dim=1), torch.ones(4))


def test_batch_iterator_empty_split(shapes_manifest):
    with pytest.raises(DataPipelineError):
        next(iter(batch_iterator(shapes_manifest.unassigned(), "train", 4)))
