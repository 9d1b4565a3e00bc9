"""Pretrained CNN backbones behind a uniform "RGB image batch in, feature-map batch out" contract.

Images are channels-first torch tensors holding RGB values in [0, 255]
(``(3, H, W)`` or ``(B, 3, H, W)``). Feature maps come out as ``(B, c, h, w)``.

Pretrained weights are read from ``<weights_dir>/<name>.safetensors`` only.
Populating that directory is the explicit ``fetch_weights`` step; nothing in
training or evaluation touches the network.
"""
import dataclasses
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import torch
import torch.nn as nn
from safetensors.torch import load_file

from rpca.config import config
from rpca.errors import ConfigurationError, DomainError, ShapeError, WeightsNotFoundError

logger = logging.getLogger(__name__)

# ImageNet channel means in BGR order, as shipped with the caffe-style
# pretrained weight distributions (Keras applications "caffe" mode).
IMAGENET_BGR_MEANS = (103.939, 116.779, 123.68)

# Per-channel RGB statistics of the torchvision-style ImageNet checkpoints, on [0, 1] pixels.
IMAGENET_RGB_MEAN = (0.485, 0.456, 0.406)
IMAGENET_RGB_STD = (0.229, 0.224, 0.225)

PREPROCESSING_MODES = ("bgr_zero_center", "scale_signed_unit", "rgb_mean_std")

TOY_SEED = 1234


@dataclass(frozen=True)
class BackboneSpec:
    """Static description of a backbone: feature width, published size, preprocessing."""

    name: str
    feature_channels: int
    base_param_count: float  # millions, as published
    architecture: Optional[str] = None  # timm model name
    hub_id: Optional[str] = None  # Hugging Face repo holding the ImageNet weights
    input_side: int = 224
    preprocessing_mode: str = "rgb_mean_std"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "feature_channels": self.feature_channels,
            "preprocessing_mode": self.preprocessing_mode,
        }


BACKBONES = {
    # each mode matches the normalisation the fetched checkpoint was trained with
    "resnet50": BackboneSpec("resnet50", 2048, 23.7, "resnet50", "timm/resnet50.tv_in1k", preprocessing_mode="rgb_mean_std"),
    "xception": BackboneSpec(
        "xception", 2048, 21.0, "legacy_xception", "timm/legacy_xception.tf_in1k", preprocessing_mode="scale_signed_unit"
    ),
    "inceptionv3": BackboneSpec(
        "inceptionv3", 2048, 21.9, "inception_v3", "timm/inception_v3.tf_in1k", preprocessing_mode="scale_signed_unit"
    ),
    "mobilenetv2": BackboneSpec(
        "mobilenetv2", 1280, 2.3, "mobilenetv2_100", "timm/mobilenetv2_100.ra_in1k", preprocessing_mode="rgb_mean_std"
    ),
    # Frozen random projection used by the synthetic fixture and the tests; its
    # init expects zero-centred pixels (about ±128).
    "toy": BackboneSpec("toy", 64, 0.2, preprocessing_mode="bgr_zero_center"),
}

IMAGENET_BACKBONES = ("resnet50", "xception", "inceptionv3", "mobilenetv2")


def get_backbone_spec(name: str, preprocessing_mode: Optional[str] = None) -> BackboneSpec:
    """Look up a backbone by name, optionally overriding its preprocessing mode."""
    try:
        spec = BACKBONES[name]
    except KeyError:
        raise ConfigurationError(f"Unknown backbone '{name}'; choose one of {sorted(BACKBONES)}") from None
    if preprocessing_mode is not None:
        if preprocessing_mode not in PREPROCESSING_MODES:
            raise ConfigurationError(f"Unknown preprocessing mode '{preprocessing_mode}'")
        spec = dataclasses.replace(spec, preprocessing_mode=preprocessing_mode)
    return spec


def _check_image(images: torch.Tensor):
    if images.dim() not in (3, 4) or images.shape[-3] != 3:
        raise ShapeError(f"Expected a 3-channel image tensor (..., 3, H, W), got shape {tuple(images.shape)}")


def _channels(values, images: torch.Tensor) -> torch.Tensor:
    return torch.tensor(values, dtype=images.dtype, device=images.device).view(3, 1, 1)


def _means(images: torch.Tensor) -> torch.Tensor:
    return _channels(IMAGENET_BGR_MEANS, images)


def preprocess(images: torch.Tensor, mode: str = "bgr_zero_center") -> torch.Tensor:
    """Map RGB [0, 255] images to backbone input.

    ``bgr_zero_center`` reorders channels to BGR and subtracts the ImageNet
    channel means without scaling. ``scale_signed_unit`` keeps RGB and maps to
    [-1, 1]. ``rgb_mean_std`` keeps RGB, scales to [0, 1] and standardises each
    channel with the ImageNet mean and standard deviation.
    """
    _check_image(images)
    images = images.to(torch.get_default_dtype()) if not images.is_floating_point() else images
    if images.numel() and (images.min() < 0 or images.max() > 255):
        raise DomainError("Image values must lie in [0, 255] before preprocessing")

    if mode == "bgr_zero_center":
        return images.flip(-3) - _means(images)
    if mode == "scale_signed_unit":
        return images / 127.5 - 1.0
    if mode == "rgb_mean_std":
        return (images / 255.0 - _channels(IMAGENET_RGB_MEAN, images)) / _channels(IMAGENET_RGB_STD, images)
    raise ConfigurationError(f"Unknown preprocessing mode '{mode}'")


def deprocess(images: torch.Tensor, mode: str = "bgr_zero_center") -> torch.Tensor:
    """Inverse of ``preprocess``."""
    _check_image(images)
    if mode == "bgr_zero_center":
        return (images + _means(images)).flip(-3)
    if mode == "scale_signed_unit":
        return (images + 1.0) * 127.5
    if mode == "rgb_mean_std":
        return (images * _channels(IMAGENET_RGB_STD, images) + _channels(IMAGENET_RGB_MEAN, images)) * 255.0
    raise ConfigurationError(f"Unknown preprocessing mode '{mode}'")


def count_parameters(module: nn.Module) -> int:
    """Count parameters the way the published tables do: weights plus normalisation running statistics."""
    total = sum(p.numel() for p in module.parameters())
    total += sum(
        b.numel()
        for name, b in module.named_buffers()
        if name.endswith("running_mean") or name.endswith("running_var")
    )
    return total


class ToyProjection(nn.Module):
    """Fixed random strided convolution: 224×224×3 → 7×7×64, never trained."""

    def __init__(self, channels: int = 64, patch: int = 32, seed: int = TOY_SEED):
        super().__init__()
        self.num_features = channels
        self.conv = nn.Conv2d(3, channels, kernel_size=patch, stride=patch)
        g = torch.Generator().manual_seed(seed)
        fan_in = 3 * patch * patch
        with torch.no_grad():
            # inputs are zero-centred pixels (~±128)
            self.conv.weight.copy_(torch.randn(self.conv.weight.shape, generator=g) / (fan_in ** 0.5 * 64.0))
            self.conv.bias.copy_(torch.randn(channels, generator=g) * 0.1)
        for p in self.parameters():
            p.requires_grad = False

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.conv(x))


def _create_body(spec: BackboneSpec) -> nn.Module:
    if spec.name == "toy":
        return ToyProjection(spec.feature_channels)

    import timm

    return timm.create_model(spec.architecture, pretrained=False, num_classes=0, global_pool="")


def weights_path(name: str, weights_dir: Optional[Union[str, Path]] = None) -> Path:
    return Path(weights_dir or config.weights_dir) / f"{name}.safetensors"


def load_backbone_weights(body: nn.Module, spec: BackboneSpec, weights_dir: Optional[Union[str, Path]] = None):
    """Load cached ImageNet weights into ``body``; never falls back to random init."""
    path = weights_path(spec.name, weights_dir)
    if not path.exists():
        raise WeightsNotFoundError(
            f"No pretrained weights for '{spec.name}' at {path}. "
            f"Run `python -m rpca fetch-weights --backbone {spec.name}` first."
        )
    state = load_file(str(path))
    missing, unexpected = body.load_state_dict(state, strict=False)
    if missing:
        raise WeightsNotFoundError(
            f"Weights at {path} do not match '{spec.name}': {len(missing)} missing tensors (e.g. {missing[0]})"
        )
    logger.info("Loaded %s weights from %s (%d classifier tensors ignored)", spec.name, path, len(unexpected))


def fetch_weights(name: str, weights_dir: Optional[Union[str, Path]] = None) -> Path:
    """Download ImageNet weights for ``name`` from the Hugging Face Hub into the local cache."""
    spec = get_backbone_spec(name)
    if spec.hub_id is None:
        raise ConfigurationError(f"Backbone '{name}' has no pretrained weights to fetch")

    from huggingface_hub import hf_hub_download

    target = weights_path(name, weights_dir)
    target.parent.mkdir(parents=True, exist_ok=True)
    logger.info("Fetching %s weights from %s", name, spec.hub_id)
    cached = hf_hub_download(repo_id=spec.hub_id, filename="model.safetensors", cache_dir=str(target.parent / ".hub"))
    shutil.copyfile(cached, target)
    logger.info("Stored %s weights at %s", name, target)
    return target


class Backbone(nn.Module):
    """A pretrained CNN truncated at its last convolutional feature map.

    The module takes raw RGB [0, 255] batches and applies ``preprocess``
    itself, so checkpoints and Grad-CAM see the same input contract.
    """

    def __init__(self, spec: BackboneSpec, trainable: bool = True, body: Optional[nn.Module] = None):
        super().__init__()
        self.spec = spec
        self.body = body if body is not None else _create_body(spec)
        # the toy projection is frozen by construction
        self.trainable = trainable and spec.name != "toy"
        if not self.trainable:
            for p in self.body.parameters():
                p.requires_grad = False

    def train(self, mode: bool = True):
        super().train(mode)
        if not self.trainable:
            # frozen backbones keep their normalisation statistics
            self.body.eval()
        return self

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        side = self.spec.input_side
        if images.shape[-2:] != (side, side):
            raise ShapeError(f"{self.spec.name} expects {side}×{side} input, got {tuple(images.shape[-2:])}")
        return self.body.forward_features(preprocess(images, self.spec.preprocessing_mode))

    def param_count(self) -> int:
        return count_parameters(self.body)


def build_backbone(
    spec: BackboneSpec,
    trainable: bool = True,
    pretrained: bool = True,
    weights_dir: Optional[Union[str, Path]] = None,
) -> Backbone:
    """Instantiate a backbone; ``pretrained=False`` builds the bare architecture (parameter accounting only)."""
    body = _create_body(spec)
    if pretrained and spec.name != "toy":
        load_backbone_weights(body, spec, weights_dir)
    backbone = Backbone(spec, trainable=trainable, body=body)
    out = backbone.body.num_features
    if out != spec.feature_channels:
        raise ConfigurationError(f"{spec.name} emits {out} channels, spec says {spec.feature_channels}")
    return backbone


def extract_features(images: torch.Tensor, backbone: Backbone, trainable: bool = False) -> torch.Tensor:
    """Run the backbone; with ``trainable=False`` this is a pure inference call."""
    if trainable:
        return backbone(images)
    was_training = backbone.training
    backbone.eval()
    try:
        with torch.no_grad():
            return backbone(images)
    finally:
        backbone.train(was_training)
