"""Grad-CAM heatmaps over the backbone's last feature map, and overlay rendering."""
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from matplotlib import colormaps
from matplotlib.figure import Figure
from PIL import Image

from rpca.data import eval_transform
from rpca.errors import DataPipelineError, ParameterError, ShapeError, UnsupportedModelError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


@dataclass
class Heatmap:
    """``data`` is an ``H×W`` map in [0, 1]; ``flat`` marks an all-zero map."""

    data: np.ndarray
    image_id: str
    target_class: int
    predicted_class: int
    flat: bool = False

    def to_dict(self, classes=None) -> dict:
        out = {
            "image_id": self.image_id,
            "target_class": self.target_class,
            "predicted_class": self.predicted_class,
            "flags": {"all_zero": self.flat},
        }
        if classes is not None:
            out["target_label"] = classes[self.target_class]
            out["predicted_label"] = classes[self.predicted_class]
        return out


def _normalize(cam: torch.Tensor) -> tuple:
    hi = cam.max()
    if hi <= 0:
        return torch.zeros_like(cam), True
    lo = cam.min()
    if hi == lo:
        return torch.ones_like(cam), False
    return (cam - lo) / (hi - lo), False


def gradcam(model: nn.Module, image: torch.Tensor, target_class: Optional[int] = None, image_id: str = "") -> Heatmap:
    """Class activation map of ``target_class`` (default: the predicted class) for one image.

    ``model`` must split into ``extract`` (image → feature map) and
    ``classify`` (feature map → logits).
    """
    if not (hasattr(model, "extract") and hasattr(model, "classify")):
        raise UnsupportedModelError(f"{type(model).__name__} exposes no convolutional feature map")
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[0] != 1:
        raise ShapeError(f"Grad-CAM takes a single image, got shape {tuple(image.shape)}")

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            fmap = model.extract(image)
        if fmap.dim() != 4:
            raise UnsupportedModelError(f"Expected a (1, c, h, w) feature map, got {tuple(fmap.shape)}")
        fmap = fmap.detach().requires_grad_(True)
        with torch.enable_grad():
            logits = model.classify(fmap)
            predicted = int(logits[0].argmax())
            target = predicted if target_class is None else int(target_class)
            if not 0 <= target < logits.shape[-1]:
                raise ParameterError(f"target_class must be in [0, {logits.shape[-1]}), got {target}")
            score = logits[0, target]
            if score.requires_grad:
                (grad,) = torch.autograd.grad(score, fmap, allow_unused=True)
            else:
                grad = None
    finally:
        model.train(was_training)

    if grad is None:
        grad = torch.zeros_like(fmap)
    weights = grad[0].mean(dim=(-2, -1))  # per-channel α
    cam = torch.relu((weights[:, None, None] * fmap[0].detach()).sum(dim=0))
    cam = F.interpolate(cam[None, None].double(), size=tuple(image.shape[-2:]), mode="bilinear", align_corners=False)[0, 0]
    cam, flat = _normalize(cam)
    if flat:
        logger.info("Grad-CAM for %s class %d is all zero", image_id or "image", target)
    return Heatmap(cam.cpu().numpy(), image_id, target, predicted, flat)


def _image_array(image: torch.Tensor) -> np.ndarray:
    if image.dim() == 4:
        image = image[0]
    return image.detach().cpu().permute(1, 2, 0).double().numpy()


def colorize(heatmap: Heatmap, colormap: str = "jet") -> np.ndarray:
    """``H×W×3`` RGB in [0, 255] (float)."""
    return colormaps[colormap](heatmap.data)[..., :3] * 255.0


def blend(heatmap: Heatmap, image: torch.Tensor, alpha: float = 0.4, colormap: str = "jet") -> np.ndarray:
    """Alpha-blend the colourised heatmap over an RGB [0, 255] image → ``H×W×3`` uint8."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must be in [0, 1], got {alpha}")
    rgb = _image_array(image)
    if rgb.shape[:2] != heatmap.data.shape:
        raise ShapeError(f"Heatmap {heatmap.data.shape} and image {rgb.shape[:2]} differ in size")
    mixed = (1.0 - alpha) * rgb + alpha * colorize(heatmap, colormap)
    return np.rint(mixed).clip(0, 255).astype(np.uint8)


def _png(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


def overlay(heatmap: Heatmap, image: torch.Tensor, alpha: float = 0.4, colormap: str = "jet") -> bytes:
    """PNG bytes of ``blend``."""
    return _png(blend(heatmap, image, alpha, colormap))


def cam_png(heatmap: Heatmap, colormap: str = "jet") -> bytes:
    return _png(np.rint(colorize(heatmap, colormap)).astype(np.uint8))


def explain_image(
    model: nn.Module,
    image_path: Union[str, Path],
    out_dir: Union[str, Path],
    target_class: Optional[int] = None,
    alpha: float = 0.4,
    classes=None,
) -> Heatmap:
    """Write ``<stem>_cam.png``, ``<stem>_overlay.png`` and ``<stem>.json`` for one image file."""
    image_path, out_dir = Path(image_path), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image = eval_transform(image_path)
    heatmap = gradcam(model, image, target_class, image_id=image_path.name)
    stem = image_path.stem
    (out_dir / f"{stem}_cam.png").write_bytes(cam_png(heatmap))
    (out_dir / f"{stem}_overlay.png").write_bytes(overlay(heatmap, image, alpha))
    (out_dir / f"{stem}.json").write_text(json.dumps(heatmap.to_dict(classes), indent=2, sort_keys=True) + "\n")
    logger.info("Wrote Grad-CAM for %s (class %d) to %s", image_path.name, heatmap.target_class, out_dir)
    return heatmap


def collect_images(paths: Iterable[Union[str, Path]]) -> List[Path]:
    """Expand directories into their image files (sorted, non-recursive); files pass through in order."""
    out = []
    for path in map(Path, paths):
        if path.is_dir():
            found = sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
            if not found:
                raise DataPipelineError(f"No images under {path}")
            out.extend(found)
        elif path.is_file():
            out.append(path)
        else:
            raise DataPipelineError(f"Image not found: {path}")
    return out


def explain_batch(
    model: nn.Module,
    image_paths: Sequence[Union[str, Path]],
    out_dir: Union[str, Path],
    target_classes: Sequence[Optional[int]] = (None,),
    alpha: float = 0.4,
    classes=None,
    panel_name: str = "gradcam_panel.png",
) -> List[Heatmap]:
    """Grad-CAM for several images and target classes, with one panel figure.

    Each panel row shows an input image followed by one overlay per entry of
    ``target_classes`` (``None`` is the predicted class). Sidecars: ``<stem>.json``
    for the first target, ``<stem>_class<k>.json`` for each further class ``k``.
    Heatmaps are returned row by row.
    """
    if not image_paths:
        raise ParameterError("explain_batch needs at least one image")
    if not target_classes:
        raise ParameterError("explain_batch needs at least one target class (None for the prediction)")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def label(index: int) -> str:
        return classes[index] if classes is not None else str(index)

    rows = []
    for path in map(Path, image_paths):
        image = eval_transform(path)
        heatmaps = []
        for column, target in enumerate(target_classes):
            heatmap = gradcam(model, image, target, image_id=path.name)
            name = f"{path.stem}.json" if column == 0 else f"{path.stem}_class{heatmap.target_class}.json"
            (out_dir / name).write_text(json.dumps(heatmap.to_dict(classes), indent=2, sort_keys=True) + "\n")
            heatmaps.append(heatmap)
        rows.append((path, image, heatmaps))

    columns = 1 + len(target_classes)
    fig = Figure(figsize=(2.5 * columns, 2.6 * len(rows)))
    axes = fig.subplots(len(rows), columns, squeeze=False)
    for (path, image, heatmaps), row_axes in zip(rows, axes):
        row_axes[0].imshow(np.rint(_image_array(image)).clip(0, 255).astype(np.uint8))
        row_axes[0].set_title(f"{path.name}\npredicted {label(heatmaps[0].predicted_class)}", fontsize=8)
        for ax, heatmap in zip(row_axes[1:], heatmaps):
            ax.imshow(blend(heatmap, image, alpha))
            ax.set_title(f"target {label(heatmap.target_class)}", fontsize=8)
        for ax in row_axes:
            ax.axis("off")
    fig.tight_layout()
    panel = out_dir / panel_name
    fig.savefig(panel, dpi=100)
    logger.info("Wrote Grad-CAM panel (%d images × %d classes) to %s", len(rows), len(target_classes), panel)
    return [heatmap for _, _, heatmaps in rows for heatmap in heatmaps]
