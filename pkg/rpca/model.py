"""Model assembly for the five ablation variants."""
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import torch
import torch.nn as nn

from rpca.backbones import Backbone, BackboneSpec, build_backbone, get_backbone_spec
from rpca.errors import ConfigurationError
from rpca.head import ClassifierHead, HeadConfig, RegionSpec

logger = logging.getLogger(__name__)

VARIANT_KINDS = ("baseline", "baseline_reg", "regions_only", "attention_only", "full")

# Published table order: baseline, +augmentation/regularisation, full, regions, attention.
TABLE_ORDER = ("baseline", "baseline_reg", "full", "regions_only", "attention_only")

VARIANT_TITLES = {
    "baseline": "Baseline (GAP + softmax)",
    "baseline_reg": "Baseline + Gaussian blur / flip augmentation + regularisation",
    "full": "Regions + channel attention",
    "regions_only": "Ablation: regions upon baseline",
    "attention_only": "Ablation: channel attention upon baseline",
}

_REGION_KINDS = ("regions_only", "full")


@dataclass
class ModelVariant:
    """Which head components sit on top of which backbone."""

    kind: str = "full"
    backbone: str = "resnet50"
    preprocessing_mode: Optional[str] = None
    regions: Optional[List[List[int]]] = None  # None → four half-frame regions
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)
        if self.kind not in VARIANT_KINDS:
            raise ConfigurationError(f"Unknown variant '{self.kind}'; choose one of {VARIANT_KINDS}")
        if self.regions is not None and self.kind not in _REGION_KINDS:
            raise ConfigurationError(f"Variant '{self.kind}' does not pool regions")
        # validate eagerly
        self.backbone_spec
        self.region_spec

    @property
    def backbone_spec(self) -> BackboneSpec:
        return get_backbone_spec(self.backbone, self.preprocessing_mode)

    @property
    def region_spec(self) -> Optional[RegionSpec]:
        if self.kind not in _REGION_KINDS:
            return None
        if self.regions is None:
            return RegionSpec.default(self.head.upsample_side)
        return RegionSpec(tuple(tuple(int(v) for v in r) for r in self.regions), self.head.upsample_side)

    @property
    def attention(self) -> bool:
        return self.kind == "full"

    @property
    def gate_map(self) -> bool:
        return self.kind == "attention_only"

    @property
    def regularize(self) -> bool:
        return self.kind != "baseline"

    @property
    def augment_regime(self) -> str:
        return "basic" if self.kind == "baseline" else "extended"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelVariant":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown variant keys: {sorted(unknown)}")
        return cls(**data)


class RegionAttentionNet(nn.Module):
    """Backbone + classifier head; ``forward`` returns logits."""

    def __init__(self, backbone: Backbone, head: ClassifierHead, variant: ModelVariant, classes: List[str]):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.variant = variant
        self.classes = list(classes)

    def extract(self, images: torch.Tensor) -> torch.Tensor:
        """Last convolutional feature map ``(B, c, h, w)``."""
        return self.backbone(images)

    def classify(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.head(fmap)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.classify(self.extract(images))

    def predict_proba(self, images: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.forward(images), dim=-1)

    def parameter_registry(self) -> Dict[str, int]:
        """Per-component parameter counts plus ``total``."""
        registry = {"backbone": self.backbone.param_count()}
        registry.update(self.head.component_counts())
        registry["total"] = sum(registry.values())
        return registry

    def layer_composition(self) -> List[str]:
        v = self.variant
        layers = [f"backbone:{v.backbone}"]
        if v.gate_map:
            layers.append("attention:map")
        if v.region_spec is not None:
            layers += [f"upsample:{v.head.upsample_side}", f"regions:{v.region_spec.count}"]
        else:
            layers.append("gap")
        if v.attention:
            layers.append("attention")
        if v.regularize:
            layers += ["dropout", "layernorm"]
        if v.head.hidden_units:
            layers.append(f"hidden:{v.head.hidden_units}")
        layers += [f"dense:{len(self.classes)}", "softmax"]
        return layers


def build_model(
    variant: ModelVariant,
    classes: List[str],
    pretrained: bool = True,
    trainable_backbone: bool = True,
    weights_dir: Optional[Union[str, Path]] = None,
) -> RegionAttentionNet:
    """Assemble the layer composition of ``variant`` for the given class table."""
    if not classes:
        raise ConfigurationError("A model needs at least one class")
    spec = variant.backbone_spec
    backbone = build_backbone(spec, trainable=trainable_backbone, pretrained=pretrained, weights_dir=weights_dir)
    head = ClassifierHead(
        spec.feature_channels,
        len(classes),
        regions=variant.region_spec,
        attention=variant.attention,
        gate_map=variant.gate_map,
        regularize=variant.regularize,
        config=variant.head,
    )
    model = RegionAttentionNet(backbone, head, variant, classes)
    logger.info(
        "Built %s/%s: %s (%d parameters)",
        variant.kind,
        variant.backbone,
        " → ".join(model.layer_composition()),
        model.parameter_registry()["total"],
    )
    return model
