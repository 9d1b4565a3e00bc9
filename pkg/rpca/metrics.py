"""Confusion matrices, top-k accuracy, precision/recall/F1 and table rendering."""
import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from sklearn.metrics import confusion_matrix

from rpca.errors import MetricError, ParameterError
from rpca.model import TABLE_ORDER, VARIANT_TITLES

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ["Backbone CNN", "Top-1 Acc", "Top-3 Acc", "Precision", "Recall", "F1-score", "Param (M)"]

BACKBONE_TITLES = {
    "resnet50": "ResNet-50",
    "xception": "Xception",
    "inceptionv3": "Inception-V3",
    "mobilenetv2": "MobileNet-V2",
    "toy": "Toy",
}


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    classes: List[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["true\\pred", *self.classes])
        for name, row in zip(self.classes, self.counts):
            writer.writerow([name, *(int(v) for v in row)])
        return buf.getvalue()


def _as_index_array(values) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.int64).reshape(-1)


def confusion(predicted, true, num_classes: int, classes: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    """Count ``(true, predicted)`` pairs into a ``K×K`` matrix."""
    pred, truth = _as_index_array(predicted), _as_index_array(true)
    if pred.shape != truth.shape:
        raise ParameterError(f"{len(pred)} predictions for {len(truth)} labels")
    if num_classes < 1:
        raise ParameterError("num_classes must be positive")
    for name, arr in (("predicted", pred), ("true", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ParameterError(f"{name} indices must lie in [0, {num_classes})")
    names = list(classes) if classes is not None else [str(k) for k in range(num_classes)]
    if pred.size == 0:
        return ConfusionMatrix(np.zeros((num_classes, num_classes), dtype=np.int64), names)
    counts = confusion_matrix(truth, pred, labels=list(range(num_classes))).astype(np.int64)
    return ConfusionMatrix(counts, names)


def _safe_div(num: np.ndarray, den: np.ndarray, zero_division: str) -> np.ndarray:
    fill = 0.0 if zero_division == "zero" else math.nan
    out = np.full(num.shape, fill, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def prf_from_confusion(cm: ConfusionMatrix, average: str = "macro", zero_division: str = "zero") -> dict:
    """Per-class and averaged precision, recall and F1.

    ``average`` is ``macro`` (unweighted class mean) or ``weighted`` (by true
    class support). 0/0 is 0 unless ``zero_division="nan"``.
    """
    if average not in ("macro", "weighted"):
        raise ParameterError(f"Unknown average '{average}'")
    if zero_division not in ("zero", "nan"):
        raise ParameterError(f"Unknown zero_division '{zero_division}'")
    if cm.total == 0:
        raise MetricError("Cannot compute precision/recall on an empty confusion matrix")

    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    precision = _safe_div(tp, tp + fp, zero_division)
    recall = _safe_div(tp, tp + fn, zero_division)
    f1 = _safe_div(2 * precision * recall, precision + recall, zero_division)

    if average == "macro":
        weights = np.full(len(tp), 1.0 / len(tp))
    else:
        support = counts.sum(axis=1)
        weights = support / support.sum()
    return {
        "precision": float(np.sum(weights * precision)),
        "recall": float(np.sum(weights * recall)),
        "f1": float(np.sum(weights * f1)),
        "per_class": {
            name: {"precision": float(p), "recall": float(r), "f1": float(f)}
            for name, p, r, f in zip(cm.classes, precision, recall, f1)
        },
    }


def top_k_indices(probs: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` largest entries per row; equal scores rank the lower class first."""
    order = torch.sort(torch.as_tensor(probs), dim=-1, descending=True, stable=True).indices
    return order[..., :k]


def topk_accuracy(probs: torch.Tensor, true, k: int = 1) -> float:
    probs = torch.as_tensor(probs)
    if probs.dim() != 2:
        raise ParameterError(f"probs must be (B, K), got {tuple(probs.shape)}")
    if k < 1 or k > probs.shape[1]:
        raise ParameterError(f"k must be in [1, {probs.shape[1]}], got {k}")
    truth = torch.as_tensor(true).reshape(-1, 1).to(torch.long)
    if truth.shape[0] != probs.shape[0]:
        raise ParameterError(f"{probs.shape[0]} probability rows for {truth.shape[0]} labels")
    if truth.shape[0] == 0:
        raise MetricError("Top-k accuracy of an empty batch is undefined")
    hits = (top_k_indices(probs, k) == truth).any(dim=1)
    return float(hits.double().mean())


@dataclass
class MetricsReport:
    variant: str
    backbone: str
    split: str
    top1: float
    top3: float
    precision: float
    recall: float
    f1: float
    per_class: Dict[str, dict]
    confusion: ConfusionMatrix
    param_count: int
    average: str = "macro"
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "backbone": self.backbone,
            "split": self.split,
            "top1": self.top1,
            "top3": self.top3,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "average": self.average,
            "param_count": self.param_count,
            "per_class": self.per_class,
            "classes": self.confusion.classes,
            "confusion": self.confusion.counts.tolist(),
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        data = json.loads(text)
        cm = ConfusionMatrix(np.asarray(data["confusion"], dtype=np.int64), list(data["classes"]))
        return cls(
            variant=data["variant"],
            backbone=data["backbone"],
            split=data["split"],
            top1=data["top1"],
            top3=data["top3"],
            precision=data["precision"],
            recall=data["recall"],
            f1=data["f1"],
            per_class=data["per_class"],
            confusion=cm,
            param_count=data["param_count"],
            average=data.get("average", "macro"),
            config=data.get("config", {}),
        )


def table_row(report: MetricsReport) -> List[str]:
    return [
        BACKBONE_TITLES.get(report.backbone, report.backbone),
        f"{100 * report.top1:.2f}",
        f"{100 * report.top3:.2f}",
        f"{100 * report.precision:.2f}",
        f"{100 * report.recall:.2f}",
        f"{100 * report.f1:.2f}",
        f"{report.param_count / 1e6:.1f}",
    ]


def _grouped(reports: Sequence[MetricsReport]) -> List[tuple]:
    order = {kind: i for i, kind in enumerate(TABLE_ORDER)}
    kinds = sorted({r.variant for r in reports}, key=lambda v: (order.get(v, len(order)), v))
    return [(kind, [r for r in reports if r.variant == kind]) for kind in kinds]


def render_tables(reports: Sequence[MetricsReport]) -> Dict[str, str]:
    """Aligned text and CSV renderings, one section per variant in table order.

    Returns ``{"text": ..., "csv": ...}``; the CSV carries a leading
    ``Variant`` column instead of section titles.
    """
    sections = []
    csv_buf = io.StringIO()
    writer = csv.writer(csv_buf, lineterminator="\n")
    writer.writerow(["Variant", *TABLE_COLUMNS])
    for kind, group in _grouped(reports):
        rows = [table_row(r) for r in group]
        widths = [max(len(col), *(len(row[i]) for row in rows)) for i, col in enumerate(TABLE_COLUMNS)]
        lines = [VARIANT_TITLES.get(kind, kind)]
        lines.append("  ".join(col.ljust(w) if i == 0 else col.rjust(w) for i, (col, w) in enumerate(zip(TABLE_COLUMNS, widths))))
        lines.append("  ".join("-" * w for w in widths))
        for row in rows:
            lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(row, widths))))
            writer.writerow([kind, *row])
        sections.append("\n".join(lines))
    return {"text": "\n\n".join(sections) + "\n", "csv": csv_buf.getvalue()}
