"""Dataset ingestion, stratified splitting, augmentation and batch iteration.

Images travel as channels-first float tensors ``(3, H, W)`` holding RGB values
in [0, 255]; backbone preprocessing happens inside the model.
"""
import csv
import dataclasses
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import DataLoader, Dataset
from torchvision.transforms import InterpolationMode
from torchvision.transforms.v2 import functional as TF

from rpca.config import config
from rpca.errors import (
    ConfigurationError,
    DataPipelineError,
    IngestionError,
    ParameterError,
    ShapeError,
    SplitError,
)
from rpca.womensports import count_table

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test", "unassigned")
MANIFEST_HEADER = ["relative_path", "class_name", "class_index", "split"]


@dataclass(frozen=True)
class ManifestRecord:
    relative_path: str
    class_name: str
    class_index: int
    split: str = "unassigned"


@dataclass
class DatasetManifest:
    """Image records under ``root`` plus the ordered class table."""

    records: List[ManifestRecord]
    classes: List[str]
    root: str
    skipped: List[Tuple[str, str]] = field(default_factory=list, compare=False)
    warnings: List[str] = field(default_factory=list, compare=False)

    def split_records(self, split: str) -> List[Tuple[int, ManifestRecord]]:
        """``(record index, record)`` pairs of one split, in manifest order."""
        return [(i, r) for i, r in enumerate(self.records) if r.split == split]

    def split_counts(self) -> Dict[str, int]:
        counts = {s: 0 for s in SPLITS}
        for r in self.records:
            counts[r.split] += 1
        return counts

    def class_split_counts(self) -> Dict[str, Dict[str, int]]:
        counts = {c: {s: 0 for s in SPLITS} for c in self.classes}
        for r in self.records:
            counts[r.class_name][r.split] += 1
        return counts

    @property
    def is_split(self) -> bool:
        return any(r.split != "unassigned" for r in self.records)

    def unassigned(self) -> "DatasetManifest":
        """Copy with every record reset to ``unassigned``."""
        return dataclasses.replace(
            self, records=[dataclasses.replace(r, split="unassigned") for r in self.records]
        )

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in self.records:
            writer.writerow([r.relative_path, r.class_name, r.class_index, r.split])
        return buf.getvalue()

    def checksum(self) -> str:
        return hashlib.sha256(self.to_csv_text().encode("utf-8")).hexdigest()

    def to_csv(self, path: Union[str, Path]):
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(self.to_csv_text())

    @classmethod
    def from_csv(cls, path: Union[str, Path], root: Union[str, Path]) -> "DatasetManifest":
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != MANIFEST_HEADER:
                raise IngestionError(f"{path} is not a manifest (header {header})")
            records = []
            for row in reader:
                rel, name, index, split = row
                if split not in SPLITS:
                    raise IngestionError(f"{path}: unknown split '{split}' for {rel}")
                records.append(ManifestRecord(rel, name, int(index), split))
        by_index = {r.class_index: r.class_name for r in records}
        classes = [by_index[i] for i in sorted(by_index)]
        if list(range(len(classes))) != sorted(by_index):
            raise IngestionError(f"{path}: class indices are not contiguous")
        return cls(records=records, classes=classes, root=str(root))

    def write_skip_report(self, path: Union[str, Path]):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for rel, reason in self.skipped:
                f.write(f"{rel}\t{reason}\n")


def _decodable(path: Path) -> Optional[str]:
    """Return None if ``path`` decodes as an image, else the reason it does not."""
    try:
        with Image.open(path) as im:
            im.load()
        return None
    except Exception as e:
        return f"{type(e).__name__}: {e}"


def build_manifest(root: Union[str, Path]) -> DatasetManifest:
    """Ingest a ``<root>/<class_name>/<image>`` tree.

    Undecodable files go to ``manifest.skipped``; class folders with no
    decodable image are left out of the class table with a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"Dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise IngestionError(f"Dataset root {root} has no class folders")

    classes: List[str] = []
    records: List[ManifestRecord] = []
    skipped: List[Tuple[str, str]] = []
    warnings: List[str] = []
    for class_dir in class_dirs:
        files = sorted(p for p in class_dir.rglob("*") if p.is_file() and not p.name.startswith("."))
        good = []
        for p in files:
            rel = p.relative_to(root).as_posix()
            reason = _decodable(p)
            if reason is None:
                good.append(rel)
            else:
                logger.warning("Skipping %s: %s", rel, reason)
                skipped.append((rel, reason))
        if not good:
            msg = f"Class folder '{class_dir.name}' has no decodable images"
            logger.warning(msg)
            warnings.append(msg)
            continue
        index = len(classes)
        classes.append(class_dir.name)
        records.extend(ManifestRecord(rel, class_dir.name, index) for rel in good)

    if not records:
        raise IngestionError(f"No decodable images under {root}")
    logger.info("Ingested %d images in %d classes (%d skipped)", len(records), len(classes), len(skipped))
    return DatasetManifest(records=records, classes=classes, root=str(root), skipped=skipped, warnings=warnings)


@dataclass
class SplitPolicy:
    """How many records of each class go to train and val; the rest is test."""

    mode: str = "count_table"  # count_table | ratio
    per_class_train_counts: Optional[Dict[str, int]] = None
    per_class_val_counts: Optional[Dict[str, int]] = None
    train_ratio: float = 0.05
    val_ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("count_table", "ratio"):
            raise ConfigurationError(f"Unknown split mode '{self.mode}'")
        if self.mode == "count_table" and not self.per_class_train_counts:
            raise ConfigurationError("count_table mode needs per_class_train_counts")
        if self.train_ratio < 0 or self.val_ratio < 0 or self.train_ratio + self.val_ratio > 1:
            raise ConfigurationError("Ratios must be non-negative and sum to at most 1")

    @classmethod
    def from_table(cls, name: str, with_val: bool = False, seed: int = 0) -> "SplitPolicy":
        """Published per-class counts; ``with_val`` mirrors them for validation (5/5/90)."""
        counts = count_table(name)
        return cls(
            mode="count_table",
            per_class_train_counts=counts,
            per_class_val_counts=dict(counts) if with_val else None,
            seed=seed,
        )

    @classmethod
    def uniform(cls, classes: List[str], count: int, with_val: bool = False, seed: int = 0) -> "SplitPolicy":
        counts = {c: count for c in classes}
        return cls(
            mode="count_table",
            per_class_train_counts=counts,
            per_class_val_counts=dict(counts) if with_val else None,
            seed=seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _class_counts(policy: SplitPolicy, class_name: str, n: int) -> Tuple[int, int]:
    if policy.mode == "count_table":
        if class_name not in policy.per_class_train_counts:
            raise SplitError(f"Count table has no entry for class '{class_name}'")
        train = policy.per_class_train_counts[class_name]
        val = (policy.per_class_val_counts or {}).get(class_name, 0)
    else:
        train = _round_half_up(policy.train_ratio * n)
        val = min(_round_half_up(policy.val_ratio * n), n - train)
    if train < 0 or val < 0 or train + val > n:
        raise SplitError(f"Class '{class_name}' has {n} images but {train} train + {val} val were requested")
    return train, val


def stratified_split(manifest: DatasetManifest, policy: SplitPolicy) -> DatasetManifest:
    """Assign train/val/test per class by a seeded shuffle of the path-sorted class records."""
    if manifest.is_split:
        raise SplitError("Manifest is already split; call unassigned() first")

    assignment: Dict[int, str] = {}
    for class_index, class_name in enumerate(manifest.classes):
        members = sorted(
            (i for i, r in enumerate(manifest.records) if r.class_index == class_index),
            key=lambda i: manifest.records[i].relative_path,
        )
        train, val = _class_counts(policy, class_name, len(members))
        rng = np.random.default_rng([policy.seed, class_index])
        for rank, pos in enumerate(rng.permutation(len(members))):
            split = "train" if rank < train else "val" if rank < train + val else "test"
            assignment[members[pos]] = split

    records = [dataclasses.replace(r, split=assignment[i]) for i, r in enumerate(manifest.records)]
    split = dataclasses.replace(manifest, records=records)
    counts = split.split_counts()
    logger.info("Split %d records: train=%d val=%d test=%d", len(records), counts["train"], counts["val"], counts["test"])
    return split


@dataclass
class BlurConfig:
    enabled: bool = True
    kernel_side: int = 5
    sigma_range: Tuple[float, float] = (0.1, 2.0)
    prob: float = 0.5


@dataclass
class AugmentConfig:
    """Training-time geometry and photometric jitter.

    ``zoom_range`` scales the sampling grid: factors below 1 zoom in.
    The ``basic`` regime uses rotation, zoom and crop only; ``extended``
    adds horizontal flips and Gaussian blur.
    """

    rotation_deg: float = 25.0
    zoom_range: Tuple[float, float] = (0.75, 1.25)
    crop_side: int = 224
    source_side: int = 256
    hflip_prob: float = 0.5
    blur: BlurConfig = field(default_factory=BlurConfig)
    regime: str = "basic"  # basic | extended
    random_crop: bool = True
    resize_mode: str = "stretch"  # stretch | pad

    def __post_init__(self):
        if isinstance(self.blur, dict):
            self.blur = BlurConfig(**self.blur)
        self.zoom_range = tuple(self.zoom_range)
        self.blur.sigma_range = tuple(self.blur.sigma_range)
        if self.crop_side > self.source_side:
            raise ConfigurationError("crop_side must not exceed source_side")
        if self.regime not in ("basic", "extended"):
            raise ConfigurationError(f"Unknown augmentation regime '{self.regime}'")
        if self.resize_mode not in ("stretch", "pad"):
            raise ConfigurationError(f"Unknown resize mode '{self.resize_mode}'")
        if self.blur.kernel_side % 2 != 1:
            raise ConfigurationError("Blur kernel side must be odd")

    @property
    def flip_active(self) -> bool:
        return self.regime == "extended"

    @property
    def blur_active(self) -> bool:
        return self.regime == "extended" and self.blur.enabled


def load_image(path: Union[str, Path]) -> torch.Tensor:
    """Decode an image file to an RGB ``(3, H, W)`` float tensor."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except Exception as e:
        raise IngestionError(f"Cannot decode {path}: {e}") from e
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).contiguous()


def resize_to_source(image: torch.Tensor, side: int = 256, mode: str = "stretch") -> torch.Tensor:
    h, w = image.shape[-2:]
    if (h, w) == (side, side):
        return image
    if mode == "stretch":
        out = TF.resize(image, [side, side], interpolation=InterpolationMode.BILINEAR, antialias=True)
    else:
        scale = side / max(h, w)
        nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
        out = TF.resize(image, [nh, nw], interpolation=InterpolationMode.BILINEAR, antialias=True)
        top, left = (side - nh) // 2, (side - nw) // 2
        out = TF.pad(out, [left, top, side - nw - left, side - nh - top], fill=0.0)
    return out.clamp(0.0, 255.0)


def _rotate_zoom(image: torch.Tensor, angle_deg: float, zoom: float) -> torch.Tensor:
    """Rotate about the centre and scale the sampling grid; borders reflect."""
    a = math.radians(angle_deg)
    theta = torch.tensor(
        [[zoom * math.cos(a), -zoom * math.sin(a), 0.0], [zoom * math.sin(a), zoom * math.cos(a), 0.0]],
        dtype=image.dtype,
    ).unsqueeze(0)
    grid = F.affine_grid(theta, [1, *image.shape], align_corners=False)
    return F.grid_sample(image.unsqueeze(0), grid, mode="bilinear", padding_mode="reflection", align_corners=False)[0]


def hflip(image: torch.Tensor) -> torch.Tensor:
    return image.flip(-1)


def augment(image: torch.Tensor, cfg: AugmentConfig, rng_seed: int) -> torch.Tensor:
    """Random rotation, zoom, crop (+ flip and blur when extended); deterministic in ``rng_seed``."""
    h, w = image.shape[-2:]
    if h < cfg.source_side or w < cfg.source_side:
        raise ShapeError(f"Augmentation expects {cfg.source_side}×{cfg.source_side} input, got {h}×{w}")
    image = resize_to_source(image, cfg.source_side, cfg.resize_mode)

    g = torch.Generator().manual_seed(int(rng_seed))
    # fixed draw order so every config consumes the stream identically
    u = torch.rand(5, generator=g, dtype=torch.float64).tolist()
    max_offset = cfg.source_side - cfg.crop_side
    top, left = torch.randint(0, max_offset + 1, (2,), generator=g).tolist()

    angle = (2 * u[0] - 1) * cfg.rotation_deg
    lo, hi = cfg.zoom_range
    zoom = lo + u[1] * (hi - lo)
    if angle != 0.0 or zoom != 1.0:
        image = _rotate_zoom(image, angle, zoom)

    if not cfg.random_crop:
        top = left = max_offset // 2
    image = image[..., top:top + cfg.crop_side, left:left + cfg.crop_side]

    if cfg.flip_active and u[2] < cfg.hflip_prob:
        image = hflip(image)
    if cfg.blur_active and u[3] < cfg.blur.prob:
        s_lo, s_hi = cfg.blur.sigma_range
        sigma = s_lo + u[4] * (s_hi - s_lo)
        k = cfg.blur.kernel_side
        image = TF.gaussian_blur(image, kernel_size=[k, k], sigma=[sigma, sigma])
    return image.clamp(0.0, 255.0).contiguous()


def eval_transform(
    image: Union[torch.Tensor, str, Path],
    source_side: int = 256,
    crop_side: int = 224,
    resize_mode: str = "stretch",
) -> torch.Tensor:
    """Resize to ``source_side`` and take the centre ``crop_side`` window."""
    if not isinstance(image, torch.Tensor):
        image = load_image(image)
    image = resize_to_source(image, source_side, resize_mode)
    off = (source_side - crop_side) // 2
    return image[..., off:off + crop_side, off:off + crop_side].contiguous()


def record_seed(epoch_seed: int, record_index: int) -> int:
    """Per-record augmentation seed, independent of worker assignment."""
    return int(np.random.SeedSequence([epoch_seed, record_index]).generate_state(1)[0])


def epoch_order(count: int, split: str, epoch_seed: int) -> List[int]:
    """Visiting order of a split's positions: shuffled for train, manifest order otherwise."""
    if split == "train":
        g = torch.Generator().manual_seed(int(epoch_seed))
        return torch.randperm(count, generator=g).tolist()
    return list(range(count))


class ManifestDataset(Dataset):
    """One split of a manifest as a torch Dataset yielding ``(image, label, record index)``."""

    def __init__(
        self,
        manifest: DatasetManifest,
        split: str,
        augment_config: Optional[AugmentConfig] = None,
        epoch_seed: int = 0,
        eval_resize_mode: str = "stretch",
    ):
        self.root = Path(manifest.root)
        self.items = manifest.split_records(split)
        self.augment_config = augment_config
        self.epoch_seed = epoch_seed
        self.eval_resize_mode = eval_resize_mode

    def __len__(self):
        return len(self.items)

    def __getitem__(self, pos: int):
        index, record = self.items[pos]
        image = load_image(self.root / record.relative_path)
        cfg = self.augment_config
        if cfg is not None:
            image = resize_to_source(image, cfg.source_side, cfg.resize_mode)
            image = augment(image, cfg, record_seed(self.epoch_seed, index))
        else:
            image = eval_transform(image, resize_mode=self.eval_resize_mode)
        return image, record.class_index, index


def batch_iterator(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    epoch_seed: int = 0,
    augment_config: Optional[AugmentConfig] = None,
    num_workers: Optional[int] = None,
    one_hot: bool = False,
    with_ids: bool = False,
) -> Iterator[tuple]:
    """Yield ``(images, labels)`` batches covering the split exactly once.

    Augmentation applies to the train split only. ``one_hot`` replaces the
    index labels with a ``(B, K)`` one-hot matrix; ``with_ids`` appends the
    manifest record indices.
    """
    if batch_size < 1:
        raise ParameterError("batch_size must be at least 1")
    dataset = ManifestDataset(
        manifest,
        split,
        augment_config=augment_config if split == "train" else None,
        epoch_seed=epoch_seed,
    )
    if len(dataset) == 0:
        raise DataPipelineError(f"Split '{split}' is empty")

    loader = DataLoader(
        dataset,
        batch_size=batch_size,
        sampler=epoch_order(len(dataset), split, epoch_seed),
        num_workers=config.num_workers if num_workers is None else num_workers,
    )
    num_classes = len(manifest.classes)
    for images, labels, ids in loader:
        if one_hot:
            labels = F.one_hot(labels, num_classes).to(images.dtype)
        yield (images, labels, ids) if with_ids else (images, labels)
