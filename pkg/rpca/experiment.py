"""Experiment configuration: one JSON or YAML document bundling split, variant and training settings."""
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import yaml

from rpca.data import SplitPolicy
from rpca.errors import ConfigurationError
from rpca.model import ModelVariant
from rpca.train import TrainConfig
from rpca.womensports import PER_CLASS_PRESETS

logger = logging.getLogger(__name__)


@dataclass
class SplitSettings:
    """Split protocol as written in a config file; ``to_policy`` resolves it against a class table."""

    mode: str = "count_table"  # count_table | ratio
    table: Optional[str] = "womensports"
    per_class_count: Optional[int] = None
    with_val: bool = False
    train_ratio: float = 0.05
    val_ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.mode = self.mode.replace("-", "_")
        if self.mode not in ("count_table", "ratio"):
            raise ConfigurationError(f"Unknown split mode '{self.mode}'")
        if self.table in PER_CLASS_PRESETS and self.per_class_count is None:
            self.per_class_count = PER_CLASS_PRESETS[self.table]

    def to_policy(self, classes: Sequence[str]) -> SplitPolicy:
        if self.mode == "ratio":
            return SplitPolicy(mode="ratio", train_ratio=self.train_ratio, val_ratio=self.val_ratio, seed=self.seed)
        if self.per_class_count is not None:
            return SplitPolicy.uniform(list(classes), self.per_class_count, self.with_val, self.seed)
        if self.table is None:
            raise ConfigurationError("count_table mode needs a table name or per_class_count")
        return SplitPolicy.from_table(self.table, self.with_val, self.seed)


@dataclass
class ExperimentConfig:
    data_root: Optional[str] = None
    manifest: Optional[str] = None
    output_dir: str = "runs/default"
    eval_split: str = "test"
    pretrained: bool = True
    split: SplitSettings = field(default_factory=SplitSettings)
    variant: ModelVariant = field(default_factory=ModelVariant)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {
            "data_root": self.data_root,
            "manifest": self.manifest,
            "output_dir": self.output_dir,
            "eval_split": self.eval_split,
            "pretrained": self.pretrained,
            "split": dataclasses.asdict(self.split),
            "variant": self.variant.to_dict(),
            "train": self.train.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown config keys: {sorted(unknown)}")
        try:
            split = SplitSettings(**(data.pop("split", None) or {}))
            variant = ModelVariant.from_dict(data.pop("variant", None) or {})
            train = TrainConfig.from_dict(data.pop("train", None) or {})
            return cls(split=split, variant=variant, train=train, **data)
        except TypeError as e:
            # unexpected keyword in a nested section
            raise ConfigurationError(f"Invalid config: {e}") from e


def parse_override_value(text: str) -> Any:
    return yaml.safe_load(text) if text != "" else None


def apply_override(data: Dict[str, Any], dotted: str, value: Any):
    """Set ``data["a"]["b"]`` for ``dotted="a.b"``, creating sections as needed."""
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        nxt = node.get(key)
        if nxt is None:
            nxt = node[key] = {}
        elif not isinstance(nxt, dict):
            raise ConfigurationError(f"Cannot override '{dotted}': '{key}' is not a section")
        node = nxt
    node[keys[-1]] = value


def load_experiment_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Union[Mapping[str, Any], List[str]]] = None,
) -> ExperimentConfig:
    """Read a JSON/YAML experiment file (optional) and apply dotted-key overrides.

    ``overrides`` is either a mapping ``{"train.lr": 0.01}`` or a list of
    ``"train.lr=0.01"`` strings whose values are parsed as YAML scalars.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Config file {path} does not exist")
        text = path.read_text()
        try:
            data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigurationError(f"Cannot parse {path}: {e}") from e
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path} must hold a mapping at the top level")

    items = []
    if isinstance(overrides, Mapping):
        items = list(overrides.items())
    elif overrides:
        for entry in overrides:
            if "=" not in entry:
                raise ConfigurationError(f"Override '{entry}' is not key=value")
            key, raw = entry.split("=", 1)
            items.append((key.strip(), parse_override_value(raw.strip())))
    for key, value in items:
        apply_override(data, key, value)
    return ExperimentConfig.from_dict(data)
