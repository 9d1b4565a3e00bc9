"""Variant × backbone experiment grid: train, evaluate and tabulate every cell."""
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from rpca.backbones import BACKBONES
from rpca.data import DatasetManifest
from rpca.errors import ConfigurationError
from rpca.evaluation import evaluate, write_report
from rpca.metrics import MetricsReport, render_tables
from rpca.model import TABLE_ORDER, VARIANT_KINDS, ModelVariant
from rpca.train import TrainConfig, train

logger = logging.getLogger(__name__)


def cell_seed(base_seed: int, variant: str, backbone: str) -> int:
    """Seed of one grid cell; independent of which other cells exist."""
    digest = hashlib.sha256(f"{base_seed}:{variant}:{backbone}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


@dataclass
class AblationPlan:
    variants: Sequence[str]
    backbones: Sequence[str]
    output_dir: Union[str, Path]
    base_seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(seed=0))
    variant_template: ModelVariant = field(default_factory=ModelVariant)
    eval_split: str = "test"
    pretrained: bool = True

    def __post_init__(self):
        self.variants = list(self.variants)
        self.backbones = list(self.backbones)
        if not self.variants or not self.backbones:
            raise ConfigurationError("An ablation plan needs at least one variant and one backbone")
        for kind in self.variants:
            if kind not in VARIANT_KINDS:
                raise ConfigurationError(f"Unknown variant '{kind}'")
        for name in self.backbones:
            if name not in BACKBONES:
                raise ConfigurationError(f"Unknown backbone '{name}'")

    def cells(self) -> List[tuple]:
        order = {k: i for i, k in enumerate(TABLE_ORDER)}
        return [(v, b) for v in sorted(self.variants, key=order.get) for b in self.backbones]


@dataclass
class AblationResult:
    output_dir: Path
    reports: List[MetricsReport]
    failures: Dict[str, str]
    skipped: List[str]
    trained: List[str]

    @property
    def ok(self) -> bool:
        return not self.failures


def _cell_name(variant: str, backbone: str) -> str:
    return f"{variant}__{backbone}"


def _cell_variant(plan: AblationPlan, kind: str, backbone: str) -> ModelVariant:
    template = plan.variant_template
    regions = template.regions if kind in ("regions_only", "full") else None
    return ModelVariant(
        kind=kind, backbone=backbone, preprocessing_mode=template.preprocessing_mode, regions=regions, head=template.head
    )


def _cell_checksum(manifest: DatasetManifest, variant: ModelVariant, train_config: TrainConfig, plan: AblationPlan) -> str:
    payload = json.dumps(
        {
            "manifest": manifest.checksum(),
            "variant": variant.to_dict(),
            "train": train_config.to_dict(),
            "eval_split": plan.eval_split,
            "pretrained": plan.pretrained,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def _run_cell(job: dict) -> dict:
    """Train and evaluate one cell; runs in-process or in a worker process."""
    cell_dir = Path(job["cell_dir"])
    try:
        variant = ModelVariant.from_dict(job["variant"])
        train_config = TrainConfig.from_dict(job["train"])
        checkpoint = train(
            train_config,
            variant,
            job["manifest"],
            out_dir=cell_dir / "checkpoint",
            pretrained=job["pretrained"],
            weights_dir=job["weights_dir"],
        )
        report = evaluate(checkpoint, job["manifest"], split=job["eval_split"])
        write_report(report, cell_dir)
        (cell_dir / "cell.json").write_text(json.dumps({"checksum": job["checksum"], "status": "done"}) + "\n")
        return {"name": job["name"], "error": None}
    except Exception as e:
        logger.exception("Cell %s failed", job["name"])
        return {"name": job["name"], "error": f"{type(e).__name__}: {e}"}


def _completed(cell_dir: Path, checksum: str) -> bool:
    marker = cell_dir / "cell.json"
    if not marker.exists() or not (cell_dir / "report.json").exists():
        return False
    try:
        return json.loads(marker.read_text()).get("checksum") == checksum
    except json.JSONDecodeError:
        return False


def run_ablation(
    plan: AblationPlan,
    manifest: DatasetManifest,
    parallel: int = 1,
    weights_dir: Optional[Union[str, Path]] = None,
) -> AblationResult:
    """Run every pending cell, then render tables over all completed cells.

    Cells whose ``cell.json`` checksum matches the current manifest and
    settings are skipped. A failing cell is recorded and the grid continues.
    """
    out = Path(plan.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs, skipped = [], []
    for kind, backbone in plan.cells():
        name = _cell_name(kind, backbone)
        variant = _cell_variant(plan, kind, backbone)
        train_config = TrainConfig.from_dict({**plan.train.to_dict(), "seed": cell_seed(plan.base_seed, kind, backbone)})
        checksum = _cell_checksum(manifest, variant, train_config, plan)
        cell_dir = out / "cells" / name
        if _completed(cell_dir, checksum):
            logger.info("Cell %s already complete, skipping", name)
            skipped.append(name)
            continue
        jobs.append(
            {
                "name": name,
                "cell_dir": str(cell_dir),
                "variant": variant.to_dict(),
                "train": train_config.to_dict(),
                "manifest": manifest,
                "checksum": checksum,
                "eval_split": plan.eval_split,
                "pretrained": plan.pretrained,
                "weights_dir": str(weights_dir) if weights_dir else None,
            }
        )

    for job in jobs:
        logger.info("Queued cell %s (seed %d)", job["name"], job["train"]["seed"])
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            outcomes = list(pool.map(_run_cell, jobs))
    else:
        outcomes = [_run_cell(job) for job in jobs]

    failures = {o["name"]: o["error"] for o in outcomes if o["error"]}
    trained = [o["name"] for o in outcomes if not o["error"]]

    reports = []
    for kind, backbone in plan.cells():
        name = _cell_name(kind, backbone)
        report_file = out / "cells" / name / "report.json"
        if name not in failures and report_file.exists():
            reports.append(MetricsReport.from_json(report_file.read_text()))

    produced = []
    if reports:
        tables = render_tables(reports)
        (out / "table.txt").write_text(tables["text"])
        (out / "table.csv").write_text(tables["csv"])
        produced += ["table.txt", "table.csv"]
    (out / "failures.json").write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n")
    produced.append("failures.json")
    produced += sorted(str(p.relative_to(out)) for p in (out / "cells").rglob("*") if p.is_file()) if (out / "cells").exists() else []
    (out / "artifacts.json").write_text(json.dumps(produced, indent=2) + "\n")

    if failures:
        logger.error("%d of %d cells failed: %s", len(failures), len(plan.cells()), ", ".join(sorted(failures)))
    return AblationResult(out, reports, failures, skipped, trained)
