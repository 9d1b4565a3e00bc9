"""SGD training of a model variant, with atomic checkpoints and per-epoch history."""
import csv
import dataclasses
import io
import json
import logging
import math
import pickle
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from rpca.config import config
from rpca.data import AugmentConfig, DatasetManifest, batch_iterator
from rpca.errors import CheckpointError, ConfigurationError, ParameterError, RPCAError, TrainingError
from rpca.metrics import topk_accuracy
from rpca.model import ModelVariant, RegionAttentionNet, build_model

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
LR_SCHEDULES = ("constant", "step")
HISTORY_HEADER = ["epoch", "train_loss", "val_top1"]


@dataclass
class TrainConfig:
    """Optimisation settings. ``seed`` has no default: every run names its seed."""

    epochs: int = 100
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    seed: Optional[int] = None
    optimizer: str = "sgd"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    augment_regime: Optional[str] = None  # None → the variant's regime
    trainable_backbone: bool = True
    lr_schedule: str = "constant"
    lr_milestones: Tuple[int, ...] = (60, 85)
    lr_gamma: float = 0.1
    weight_decay: float = 0.0
    num_workers: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ConfigurationError(f"lr must be a finite non-negative number, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.optimizer != "sgd":
            raise ConfigurationError(f"Only the sgd optimizer is supported, got '{self.optimizer}'")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"Unknown lr_schedule '{self.lr_schedule}'")
        if self.augment_regime not in (None, "basic", "extended"):
            raise ConfigurationError(f"Unknown augmentation regime '{self.augment_regime}'")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for the 0-based ``epoch``."""
        if self.lr_schedule == "constant":
            return self.lr
        passed = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.lr * self.lr_gamma ** passed

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["lr_milestones"] = list(self.lr_milestones)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown train keys: {sorted(unknown)}")
        return cls(**data)


def cross_entropy_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of −log p(true class) over the batch; ``labels`` are one-hot rows."""
    if probs.shape != labels.shape or probs.dim() != 2:
        raise ParameterError(f"probs {tuple(probs.shape)} and labels {tuple(labels.shape)} must both be (B, K)")
    ones = labels == 1
    if not bool(((labels == 0) | ones).all()) or not bool((ones.sum(dim=1) == 1).all()):
        raise ParameterError("labels must be one-hot rows")
    true_prob = (probs * labels).sum(dim=1)
    return -torch.log(true_prob.clamp_min(PROB_FLOOR)).mean()


def sgd_step(
    theta: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    lr: float,
    momentum: float = 0.0,
    velocity: Optional[Mapping[str, torch.Tensor]] = None,
    weight_decay: float = 0.0,
) -> Tuple[Dict[str, torch.Tensor], Dict[str, torch.Tensor]]:
    """One momentum SGD update: v′ = μ·v + g, θ′ = θ − lr·v′.

    ``weight_decay`` adds ``λ·θ`` to each gradient before the update. This is the
    functional form of the ``torch.optim.SGD`` step ``train`` runs (dampening 0,
    no Nesterov, first step v′ = g).
    """
    new_theta, new_velocity = {}, {}
    for name, p in theta.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ParameterError(f"Gradient shape {tuple(g.shape)} does not match parameter '{name}' {tuple(p.shape)}")
        if not bool(torch.isfinite(g).all()):
            raise TrainingError("Non-finite gradient", parameter=name)
        if weight_decay:
            g = g + weight_decay * p
        v = g if velocity is None or name not in velocity else momentum * velocity[name] + g
        new_velocity[name] = v
        new_theta[name] = p - lr * v
    return new_theta, new_velocity


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _history_csv(history: List[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_HEADER)
    for row in history:
        val = row.get("val_top1")
        writer.writerow([row["epoch"], repr(float(row["train_loss"])), "" if val is None else repr(float(val))])
    return buf.getvalue()


def _parse_history(text: str) -> List[dict]:
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append(
            {
                "epoch": int(row["epoch"]),
                "train_loss": float(row["train_loss"]),
                "val_top1": float(row["val_top1"]) if row["val_top1"] else None,
            }
        )
    return rows


@dataclass
class Checkpoint:
    """Everything needed to resume evaluation of a trained model."""

    model: RegionAttentionNet
    variant: ModelVariant
    train_config: TrainConfig
    classes: List[str]
    epoch: int
    history: List[dict] = field(default_factory=list)
    rng_state: Optional[dict] = None

    def save(self, directory: Union[str, Path]) -> Path:
        """Write ``config.json``, ``weights.safetensors``, ``history.csv`` and ``rng_state`` atomically."""
        directory = Path(directory)
        directory.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}-", dir=directory.parent))
        try:
            meta = {
                "variant": self.variant.to_dict(),
                "train": self.train_config.to_dict(),
                "classes": self.classes,
                "epoch": self.epoch,
                "parameters": self.model.parameter_registry(),
            }
            (tmp / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
            state = {k: v.detach().cpu().contiguous() for k, v in self.model.state_dict().items()}
            save_file(state, str(tmp / "weights.safetensors"))
            (tmp / "history.csv").write_text(_history_csv(self.history))
            torch.save(self.rng_state or {}, tmp / "rng_state")
            backup = directory.with_name(f".{directory.name}.bak")
            if backup.exists():
                shutil.rmtree(backup)
            if directory.exists():
                directory.rename(backup)
            try:
                tmp.rename(directory)
            except OSError:
                if backup.exists():
                    backup.rename(directory)
                raise
            shutil.rmtree(backup, ignore_errors=True)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        logger.info("Saved checkpoint (epoch %d) to %s", self.epoch, directory)
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path], device: str = "cpu") -> "Checkpoint":
        """Read a checkpoint back; any unreadable or inconsistent file raises ``CheckpointError``."""
        directory = Path(directory)
        if not (directory / "config.json").exists():
            backup = directory.with_name(f".{directory.name}.bak")
            if not (backup / "config.json").exists():
                raise CheckpointError(f"No checkpoint at {directory}")
            # interrupted save: the previous checkpoint is still in the backup
            logger.warning("Checkpoint %s missing; loading its backup %s", directory, backup)
            directory = backup
        try:
            meta = json.loads((directory / "config.json").read_text())
            variant = ModelVariant.from_dict(meta["variant"])
            train_config = TrainConfig.from_dict(meta["train"])
            # architecture only; every tensor comes from the checkpoint
            model = build_model(
                variant, meta["classes"], pretrained=False, trainable_backbone=train_config.trainable_backbone
            )
            model.load_state_dict(load_file(str(directory / "weights.safetensors")), strict=True)
            model.to(device).eval()
            history = _parse_history((directory / "history.csv").read_text())
            rng_state = torch.load(directory / "rng_state", weights_only=True)
            classes, epoch = list(meta["classes"]), int(meta["epoch"])
        except RPCAError:
            raise
        except (OSError, ValueError, KeyError, TypeError, RuntimeError, SafetensorError, pickle.UnpicklingError) as e:
            raise CheckpointError(f"Cannot read checkpoint at {directory}: {type(e).__name__}: {e}") from e
        return cls(model, variant, train_config, classes, epoch, history, rng_state)


def _rng_state() -> dict:
    return {"torch": torch.get_rng_state()}


def _mean_loss(model, manifest, split, batch_size, device, num_workers) -> float:
    """Mean cross-entropy over a split in eval mode, without augmentation."""
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for images, labels in batch_iterator(manifest, split, batch_size, num_workers=num_workers, one_hot=True):
            images, labels = images.to(device), labels.to(device)
            probs = torch.softmax(model(images), dim=-1)
            total += cross_entropy_loss(probs, labels).item() * len(images)
            count += len(images)
    return total / count


def _split_top1(model, manifest, split, batch_size, device, num_workers) -> float:
    model.eval()
    probs, truth = [], []
    with torch.no_grad():
        for images, labels in batch_iterator(manifest, split, batch_size, num_workers=num_workers):
            probs.append(torch.softmax(model(images.to(device)), dim=-1).cpu())
            truth.append(labels)
    return topk_accuracy(torch.cat(probs), torch.cat(truth), k=1)


def train(
    train_config: TrainConfig,
    variant: ModelVariant,
    manifest: DatasetManifest,
    out_dir: Optional[Union[str, Path]] = None,
    device: Optional[str] = None,
    pretrained: bool = True,
    weights_dir: Optional[Union[str, Path]] = None,
) -> Checkpoint:
    """Run every configured epoch and return the final checkpoint.

    With ``out_dir`` set, writes ``out_dir/final`` and, when the manifest has
    a validation split, ``out_dir/best`` (highest val top-1, earliest epoch on
    ties).
    """
    if train_config.seed is None:
        raise ConfigurationError("Training needs an explicit seed")
    if not manifest.split_records("train"):
        raise TrainingError("Train split is empty")
    device = device or config.resolve_device()
    workers = train_config.num_workers

    torch.manual_seed(train_config.seed)
    np.random.seed(train_config.seed % 2**32)
    torch.use_deterministic_algorithms(True, warn_only=True)

    model = build_model(
        variant,
        manifest.classes,
        pretrained=pretrained,
        trainable_backbone=train_config.trainable_backbone,
        weights_dir=weights_dir,
    ).to(device)
    params = {name: p for name, p in model.named_parameters() if p.requires_grad}
    regime = train_config.augment_regime or variant.augment_regime
    augment_config = dataclasses.replace(train_config.augment, regime=regime)
    has_val = bool(manifest.split_records("val"))

    initial = _mean_loss(model, manifest, "train", train_config.batch_size, device, workers)
    history = [{"epoch": 0, "train_loss": initial, "val_top1": None}]
    logger.info(
        "Training %s/%s on %d images, %d trainable tensors, augmentation %s, initial loss %.4f",
        variant.kind,
        variant.backbone,
        len(manifest.split_records("train")),
        len(params),
        regime,
        initial,
    )

    optimizer = torch.optim.SGD(
        list(params.values()),
        lr=train_config.lr_at(0),
        momentum=train_config.momentum,
        weight_decay=train_config.weight_decay,
        foreach=False,
    )
    best_top1 = -1.0
    for epoch in range(1, train_config.epochs + 1):
        lr = train_config.lr_at(epoch - 1)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        total, count = 0.0, 0
        batches = batch_iterator(
            manifest,
            "train",
            train_config.batch_size,
            epoch_seed=epoch_seed(train_config.seed, epoch),
            augment_config=augment_config,
            num_workers=workers,
            one_hot=True,
        )
        for batch, (images, labels) in enumerate(batches):
            images, labels = images.to(device), labels.to(device)
            probs = torch.softmax(model(images), dim=-1)
            loss = cross_entropy_loss(probs, labels)
            if not torch.isfinite(loss):
                raise TrainingError("Non-finite loss", epoch=epoch, batch=batch)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            for name, p in params.items():
                if p.grad is None:
                    # unused this batch; still decays momentum like a zero gradient
                    p.grad = torch.zeros_like(p)
                elif not bool(torch.isfinite(p.grad).all()):
                    raise TrainingError("Non-finite gradient", epoch=epoch, batch=batch, parameter=name)
            optimizer.step()
            total += loss.item() * len(images)
            count += len(images)

        row = {"epoch": epoch, "train_loss": total / count, "val_top1": None}
        if has_val:
            row["val_top1"] = _split_top1(model, manifest, "val", train_config.batch_size, device, workers)
        history.append(row)
        logger.info(
            "epoch %d/%d lr=%g loss=%.4f%s",
            epoch,
            train_config.epochs,
            lr,
            row["train_loss"],
            f" val_top1={row['val_top1']:.4f}" if has_val else "",
        )

        if has_val and out_dir is not None and row["val_top1"] > best_top1:
            best_top1 = row["val_top1"]
            Checkpoint(
                model, variant, train_config, list(manifest.classes), epoch, list(history), _rng_state()
            ).save(Path(out_dir) / "best")

    model.eval()
    final = Checkpoint(model, variant, train_config, list(manifest.classes), train_config.epochs, history, _rng_state())
    if out_dir is not None:
        final.save(Path(out_dir) / "final")
    return final
