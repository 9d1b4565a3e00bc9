"""Evaluate a checkpoint on a manifest split and write the report files."""
import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import torch
from matplotlib.figure import Figure

from rpca.config import config
from rpca.data import DatasetManifest, batch_iterator
from rpca.errors import DataPipelineError, EvaluationError
from rpca.metrics import ConfusionMatrix, MetricsReport, confusion, prf_from_confusion, render_tables, topk_accuracy
from rpca.model import RegionAttentionNet
from rpca.train import Checkpoint

logger = logging.getLogger(__name__)


def predict(
    model: RegionAttentionNet,
    manifest: DatasetManifest,
    split: str,
    batch_size: int = 32,
    device: str = "cpu",
    num_workers: Optional[int] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Class probabilities ``(n, K)`` and true labels ``(n,)`` over a split, in manifest order."""
    model.eval()
    probs, labels = [], []
    with torch.no_grad():
        for images, y in batch_iterator(manifest, split, batch_size, num_workers=num_workers):
            probs.append(torch.softmax(model(images.to(device)), dim=-1).cpu())
            labels.append(y)
    return torch.cat(probs), torch.cat(labels)


def evaluate(
    checkpoint: Union[Checkpoint, str, Path],
    manifest: DatasetManifest,
    split: str = "test",
    batch_size: int = 32,
    device: Optional[str] = None,
    average: str = "macro",
    zero_division: str = "zero",
    num_workers: Optional[int] = None,
) -> MetricsReport:
    """Forward the split through the checkpointed model and aggregate every metric."""
    device = device or config.resolve_device()
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint, device=device)
    if list(checkpoint.classes) != list(manifest.classes):
        raise EvaluationError(
            f"Checkpoint classes ({len(checkpoint.classes)}) do not match the manifest ({len(manifest.classes)})"
        )
    model = checkpoint.model.to(device)
    try:
        probs, truth = predict(model, manifest, split, batch_size, device, num_workers)
    except DataPipelineError as e:
        raise EvaluationError(str(e)) from e

    num_classes = len(manifest.classes)
    cm = confusion(probs.argmax(dim=1), truth, num_classes, manifest.classes)
    prf = prf_from_confusion(cm, average=average, zero_division=zero_division)
    report = MetricsReport(
        variant=checkpoint.variant.kind,
        backbone=checkpoint.variant.backbone,
        split=split,
        top1=topk_accuracy(probs, truth, 1),
        top3=topk_accuracy(probs, truth, min(3, num_classes)),
        precision=prf["precision"],
        recall=prf["recall"],
        f1=prf["f1"],
        per_class=prf["per_class"],
        confusion=cm,
        param_count=model.parameter_registry()["total"],
        average=average,
        config={"variant": checkpoint.variant.to_dict(), "train": checkpoint.train_config.to_dict()},
    )
    logger.info(
        "%s/%s on %s: top1=%.4f top3=%.4f f1=%.4f (%d images)",
        report.variant,
        report.backbone,
        split,
        report.top1,
        report.top3,
        report.f1,
        cm.total,
    )
    return report


def plot_confusion(cm: ConfusionMatrix, path: Union[str, Path], title: str = "") -> Path:
    """Render the count matrix as a labelled heatmap PNG (true classes on rows)."""
    k = len(cm.classes)
    side = max(4.0, 0.35 * k + 2.0)
    fig = Figure(figsize=(side, side))
    ax = fig.add_subplot()
    im = ax.imshow(cm.counts, cmap="Blues", interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    ax.set_xticklabels(cm.classes, rotation=90, fontsize=7)
    ax.set_yticklabels(cm.classes, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title)
    if k <= 20:
        hi = cm.counts.max() if cm.counts.size else 0
        for i in range(k):
            for j in range(k):
                color = "white" if hi and cm.counts[i, j] > hi / 2 else "black"
                ax.text(j, i, str(int(cm.counts[i, j])), ha="center", va="center", fontsize=7, color=color)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    return Path(path)


def write_report(report: MetricsReport, out_dir: Union[str, Path]) -> Path:
    """Write ``report.json``, ``confusion.csv``, ``confusion.png``, ``table.txt`` and ``table.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    (out_dir / "confusion.csv").write_text(report.confusion.to_csv_text())
    plot_confusion(report.confusion, out_dir / "confusion.png", title=f"{report.variant} / {report.backbone} ({report.split})")
    tables = render_tables([report])
    (out_dir / "table.txt").write_text(tables["text"])
    (out_dir / "table.csv").write_text(tables["csv"])
    return out_dir
