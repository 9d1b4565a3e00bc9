"""Region-pooled channel-attention classification head.

Pipeline over a backbone feature map ``(B, c, h, w)``::

    upsample to 32×32 → pool four half-frame regions → sigmoid self-gating
    → flatten to N·c → dropout → layer norm → dense → softmax

The module-level functions are the pure reference path (explicit parameters,
explicit dropout seed). ``ClassifierHead`` is the trainable ``nn.Module`` used
by every model variant and shares the same tensor helpers.
"""
import json
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from rpca.errors import ConfigurationError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

Rect = Tuple[int, int, int, int]  # row0, row1, col0, col1 (half-open)

LAYERNORM_EPS = 1e-5
UPSAMPLE_MODES = ("bilinear", "nearest")


@dataclass(frozen=True)
class RegionSpec:
    """Axis-aligned rectangles over a ``side``×``side`` grid."""

    regions: Tuple[Rect, ...]
    side: int = 32

    def __post_init__(self):
        if not self.regions:
            raise ParameterError("RegionSpec needs at least one region")
        for r0, r1, c0, c1 in self.regions:
            if not (0 <= r0 < r1 <= self.side and 0 <= c0 < c1 <= self.side):
                raise ParameterError(f"Region {(r0, r1, c0, c1)} is empty or outside a {self.side}×{self.side} grid")

    @property
    def count(self) -> int:
        return len(self.regions)

    @classmethod
    def default(cls, side: int = 32) -> "RegionSpec":
        """Top, bottom, left and right halves."""
        half = side // 2
        return cls(
            regions=((0, half, 0, side), (half, side, 0, side), (0, side, 0, half), (0, side, half, side)),
            side=side,
        )

    @classmethod
    def full_frame(cls, side: int = 32) -> "RegionSpec":
        return cls(regions=((0, side, 0, side),), side=side)

    def permuted(self, order: Sequence[int]) -> "RegionSpec":
        return RegionSpec(tuple(self.regions[i] for i in order), self.side)

    def to_json(self) -> str:
        return json.dumps([list(r) for r in self.regions])

    @classmethod
    def from_json(cls, text: str, side: int = 32) -> "RegionSpec":
        return cls(tuple(tuple(int(v) for v in r) for r in json.loads(text)), side)


@dataclass
class PooledFeatures:
    """``(B, N, c)`` region descriptors, before or after attention."""

    data: torch.Tensor
    stage: str = "pooled"  # pooled | attended


@dataclass
class HeadParameters:
    """Head weights in the math orientation: ``dense_weights`` is inputs × outputs."""

    layernorm_gain: torch.Tensor
    layernorm_bias: torch.Tensor
    dense_weights: torch.Tensor
    dense_bias: torch.Tensor
    hidden_weights: Optional[torch.Tensor] = None
    hidden_bias: Optional[torch.Tensor] = None
    dropout_rate: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @classmethod
    def init(
        cls,
        in_features: int,
        num_classes: int,
        hidden: Optional[int] = None,
        dropout_rate: float = 0.5,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ) -> "HeadParameters":
        g = torch.Generator().manual_seed(seed)

        def dense(n_in, n_out):
            bound = 1.0 / n_in ** 0.5
            w = (torch.rand(n_in, n_out, generator=g, dtype=dtype) * 2 - 1) * bound
            b = (torch.rand(n_out, generator=g, dtype=dtype) * 2 - 1) * bound
            return w, b

        hidden_w = hidden_b = None
        if hidden:
            hidden_w, hidden_b = dense(in_features, hidden)
            dense_w, dense_b = dense(hidden, num_classes)
        else:
            dense_w, dense_b = dense(in_features, num_classes)
        return cls(
            layernorm_gain=torch.ones(in_features, dtype=dtype),
            layernorm_bias=torch.zeros(in_features, dtype=dtype),
            dense_weights=dense_w,
            dense_bias=dense_b,
            hidden_weights=hidden_w,
            hidden_bias=hidden_b,
            dropout_rate=dropout_rate,
        )

    def tensors(self) -> dict:
        named = {
            "layernorm_gain": self.layernorm_gain,
            "layernorm_bias": self.layernorm_bias,
            "dense_weights": self.dense_weights,
            "dense_bias": self.dense_bias,
        }
        if self.hidden_weights is not None:
            named["hidden_weights"] = self.hidden_weights
            named["hidden_bias"] = self.hidden_bias
        return named


def upsample_bilinear(fmap: torch.Tensor, target_side: int = 32, mode: str = "bilinear") -> torch.Tensor:
    """Resize ``(..., c, h, w)`` to ``target_side``×``target_side`` per channel.

    Bilinear uses the corner-aligned convention: output corners sample input
    corners exactly and source coordinates are ``i * (h - 1) / (side - 1)``.
    """
    if target_side <= 0:
        raise ParameterError(f"target_side must be positive, got {target_side}")
    if mode not in UPSAMPLE_MODES:
        raise ParameterError(f"Unknown upsample mode '{mode}'")
    squeeze = fmap.dim() == 3
    x = fmap.unsqueeze(0) if squeeze else fmap
    if x.shape[-2] < 1 or x.shape[-1] < 1:
        raise ShapeError("Feature map must be at least 1×1")
    if mode == "bilinear":
        out = F.interpolate(x, size=(target_side, target_side), mode="bilinear", align_corners=True)
    else:
        out = F.interpolate(x, size=(target_side, target_side), mode="nearest")
    return out.squeeze(0) if squeeze else out


def pool_regions(fmap: torch.Tensor, spec: RegionSpec) -> torch.Tensor:
    """Mean of ``(B, c, side, side)`` over each rectangle → ``(B, N, c)``."""
    if tuple(fmap.shape[-2:]) != (spec.side, spec.side):
        raise ShapeError(f"Region spec expects a {spec.side}×{spec.side} map, got {tuple(fmap.shape[-2:])}")
    return torch.stack([fmap[..., r0:r1, c0:c1].mean(dim=(-2, -1)) for r0, r1, c0, c1 in spec.regions], dim=-2)


def sigmoid_gate(x: torch.Tensor) -> torch.Tensor:
    """Parameter-free self-gating x ↦ σ(x)·x."""
    return torch.sigmoid(x) * x


def region_pool(fmap: torch.Tensor, spec: RegionSpec) -> PooledFeatures:
    if fmap.dim() == 3:
        fmap = fmap.unsqueeze(0)
    return PooledFeatures(pool_regions(fmap, spec), stage="pooled")


def channel_attention(pooled: PooledFeatures) -> PooledFeatures:
    if pooled.stage != "pooled":
        raise ParameterError(f"channel_attention expects pooled features, got stage '{pooled.stage}'")
    return PooledFeatures(sigmoid_gate(pooled.data), stage="attended")


def _dropout(x: torch.Tensor, rate: float, seed: Optional[int]) -> torch.Tensor:
    if rate == 0.0:
        return x
    g = torch.Generator(device=x.device).manual_seed(seed) if seed is not None else None
    keep = torch.bernoulli(torch.full_like(x, 1.0 - rate), generator=g)
    return x * keep / (1.0 - rate)


def head_logits(x: torch.Tensor, params: HeadParameters, training: bool = False, rng_seed: Optional[int] = None):
    """Logits for flattened ``(B, N·c)`` descriptors."""
    out_features = params.dense_weights.shape[1]
    if params.dense_bias.shape[0] != out_features:
        raise ConfigurationError(
            f"dense_bias has {params.dense_bias.shape[0]} entries but dense_weights emit {out_features} classes"
        )
    if training:
        x = _dropout(x, params.dropout_rate, rng_seed)
    x = F.layer_norm(x, (x.shape[-1],), params.layernorm_gain, params.layernorm_bias, eps=LAYERNORM_EPS)
    if params.hidden_weights is not None:
        x = torch.relu(x @ params.hidden_weights + params.hidden_bias)
    return x @ params.dense_weights + params.dense_bias


def head_forward(
    attended: PooledFeatures,
    params: HeadParameters,
    training: bool = False,
    rng_seed: Optional[int] = None,
) -> torch.Tensor:
    """Class distribution ``(B, K)`` from attended region descriptors."""
    if attended.stage != "attended":
        raise ParameterError(f"head_forward expects attended features, got stage '{attended.stage}'")
    x = attended.data.flatten(start_dim=-2)
    if x.shape[-1] != params.layernorm_gain.shape[0]:
        raise ConfigurationError(f"Head expects {params.layernorm_gain.shape[0]} features, got {x.shape[-1]}")
    return torch.softmax(head_logits(x, params, training, rng_seed), dim=-1)


def head_param_count(c: int, n: int, num_classes: int, hidden: Optional[int] = None) -> int:
    """Closed-form parameter count of the full head (layer norm + dense, optional hidden layer)."""
    if min(c, n, num_classes) <= 0 or (hidden is not None and hidden <= 0):
        raise ParameterError("All counts must be positive")
    d = n * c
    if hidden:
        dense = d * hidden + hidden + hidden * num_classes + num_classes
    else:
        dense = d * num_classes + num_classes
    return 2 * d + dense


@dataclass
class HeadConfig:
    """Tunables of the classifier head."""

    dropout_rate: float = 0.5
    hidden_units: Optional[int] = None
    upsample_side: int = 32
    upsample_mode: str = "bilinear"

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.hidden_units is not None and self.hidden_units <= 0:
            raise ConfigurationError("hidden_units must be positive or null")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ConfigurationError(f"Unknown upsample mode '{self.upsample_mode}'")


class ClassifierHead(nn.Module):
    """Trainable head shared by every ablation variant.

    Args:
        in_channels: backbone feature channels c
        num_classes: K
        regions: region layout, or None for a single global average pool
        attention: gate pooled descriptors with σ(x)·x
        gate_map: gate the raw feature map before pooling
        regularize: dropout + layer norm before the dense layer
    """

    def __init__(
        self,
        in_channels: int,
        num_classes: int,
        regions: Optional[RegionSpec] = None,
        attention: bool = False,
        gate_map: bool = False,
        regularize: bool = True,
        config: Optional[HeadConfig] = None,
    ):
        super().__init__()
        self.config = config or HeadConfig()
        self.regions = regions
        self.attention = attention
        self.gate_map = gate_map
        self.regularize = regularize

        n = regions.count if regions is not None else 1
        in_features = n * in_channels
        self.dropout = nn.Dropout(self.config.dropout_rate) if regularize else None
        self.norm = nn.LayerNorm(in_features, eps=LAYERNORM_EPS) if regularize else None
        hidden = self.config.hidden_units
        self.hidden = nn.Linear(in_features, hidden) if hidden else None
        self.dense = nn.Linear(hidden or in_features, num_classes)

    def pool(self, fmap: torch.Tensor) -> torch.Tensor:
        """``(B, c, h, w)`` → ``(B, N, c)``."""
        if self.gate_map:
            fmap = sigmoid_gate(fmap)
        if self.regions is not None:
            up = upsample_bilinear(fmap, self.config.upsample_side, self.config.upsample_mode)
            pooled = pool_regions(up, self.regions)
        else:
            pooled = fmap.mean(dim=(-2, -1)).unsqueeze(-2)
        if self.attention:
            pooled = sigmoid_gate(pooled)
        return pooled

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        x = self.pool(fmap).flatten(start_dim=-2)
        if self.regularize:
            x = self.norm(self.dropout(x))
        if self.hidden is not None:
            x = torch.relu(self.hidden(x))
        return self.dense(x)

    def export_parameters(self) -> HeadParameters:
        """Snapshot as ``HeadParameters`` for the functional path (regularized heads only)."""
        if not self.regularize:
            raise ConfigurationError("Only heads with layer norm can be exported as HeadParameters")
        return HeadParameters(
            layernorm_gain=self.norm.weight.detach().clone(),
            layernorm_bias=self.norm.bias.detach().clone(),
            dense_weights=self.dense.weight.detach().t().clone(),
            dense_bias=self.dense.bias.detach().clone(),
            hidden_weights=self.hidden.weight.detach().t().clone() if self.hidden is not None else None,
            hidden_bias=self.hidden.bias.detach().clone() if self.hidden is not None else None,
            dropout_rate=self.config.dropout_rate,
        )

    def component_counts(self) -> dict:
        counts = {}
        if self.norm is not None:
            counts["layernorm"] = sum(p.numel() for p in self.norm.parameters())
        if self.hidden is not None:
            counts["hidden"] = sum(p.numel() for p in self.hidden.parameters())
        counts["dense"] = sum(p.numel() for p in self.dense.parameters())
        return counts
