"""``rpca`` command line: ingest, split, synth, fetch-weights, train, eval, ablate, gradcam, report, serve.

Every command accepts ``--config`` (JSON or YAML experiment file), applies its
flags on top, prints the resolved configuration and then runs. Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""
import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from rpca.config import config
from rpca.errors import ConfigurationError, RPCAError

logger = logging.getLogger("rpca")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

# flag dest → dotted experiment-config key
OVERRIDE_KEYS = {
    "data_root": "data_root",
    "manifest": "manifest",
    "out": "output_dir",
    "eval_split": "eval_split",
    "variant": "variant.kind",
    "backbone": "variant.backbone",
    "preprocessing_mode": "variant.preprocessing_mode",
    "dropout": "variant.head.dropout_rate",
    "hidden_units": "variant.head.hidden_units",
    "upsample_mode": "variant.head.upsample_mode",
    "epochs": "train.epochs",
    "lr": "train.lr",
    "momentum": "train.momentum",
    "batch_size": "train.batch_size",
    "seed": "train.seed",
    "augment_regime": "train.augment_regime",
    "lr_schedule": "train.lr_schedule",
    "weight_decay": "train.weight_decay",
    "num_workers": "train.num_workers",
    "resize_mode": "train.augment.resize_mode",
    "split_mode": "split.mode",
    "table": "split.table",
    "per_class_count": "split.per_class_count",
    "train_ratio": "split.train_ratio",
    "val_ratio": "split.val_ratio",
    "split_seed": "split.seed",
}


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    out = {}
    for dest, key in OVERRIDE_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            out[key] = value
    if getattr(args, "with_val", False):
        out["split.with_val"] = True
    if getattr(args, "frozen_backbone", False):
        out["train.trainable_backbone"] = False
    if getattr(args, "no_pretrained", False):
        out["pretrained"] = False
    from rpca.experiment import parse_override_value

    for entry in getattr(args, "set", None) or []:
        if "=" not in entry:
            raise ConfigurationError(f"--set expects key=value, got '{entry}'")
        key, raw = entry.split("=", 1)
        out[key.strip()] = parse_override_value(raw.strip())
    return out


def _resolve(args: argparse.Namespace):
    from rpca.experiment import load_experiment_config

    cfg = load_experiment_config(args.config, _overrides(args))
    print(json.dumps({"command": args.command, "config": cfg.to_dict()}, indent=2, sort_keys=True))
    return cfg


def _load_manifest(cfg, required_split: bool = True):
    from rpca.data import DatasetManifest

    if not cfg.manifest:
        raise ConfigurationError("A manifest is required (--manifest or 'manifest' in the config)")
    path = Path(cfg.manifest)
    if not path.exists():
        raise ConfigurationError(f"Manifest {path} does not exist")
    root = cfg.data_root or str(path.parent)
    manifest = DatasetManifest.from_csv(path, root)
    if required_split and not manifest.is_split:
        raise ConfigurationError(f"Manifest {path} has not been split; run `rpca split` first")
    return manifest


def cmd_ingest(args, cfg) -> int:
    from rpca.data import build_manifest

    if not cfg.data_root:
        raise ConfigurationError("--data-root is required")
    manifest = build_manifest(cfg.data_root)
    out = Path(cfg.manifest or Path(cfg.data_root) / "manifest.csv")
    manifest.to_csv(out)
    skip_report = out.with_name(out.stem + "_skipped.tsv")
    manifest.write_skip_report(skip_report)
    logger.info("Wrote manifest %s (%d records, %d skipped)", out, len(manifest.records), len(manifest.skipped))
    return EXIT_OK


def cmd_split(args, cfg) -> int:
    from rpca.data import DatasetManifest, build_manifest, stratified_split

    if cfg.manifest and Path(cfg.manifest).exists():
        manifest = DatasetManifest.from_csv(cfg.manifest, cfg.data_root or Path(cfg.manifest).parent).unassigned()
    elif cfg.data_root:
        manifest = build_manifest(cfg.data_root)
    else:
        raise ConfigurationError("split needs --manifest or --data-root")
    split = stratified_split(manifest, cfg.split.to_policy(manifest.classes))
    out = Path(args.output or cfg.manifest or Path(manifest.root) / "manifest.csv")
    split.to_csv(out)
    counts = split.split_counts()
    print(json.dumps({"manifest": str(out), "counts": counts}, sort_keys=True))
    return EXIT_OK


def cmd_synth(args, cfg) -> int:
    from rpca.synthetic import make_synthetic_dataset

    make_synthetic_dataset(args.root, per_class=args.per_class, size=args.size, seed=args.synth_seed)
    return EXIT_OK


def cmd_fetch_weights(args, cfg) -> int:
    from rpca.backbones import IMAGENET_BACKBONES, fetch_weights

    names = args.backbones or [cfg.variant.backbone]
    if names == ["all"]:
        names = list(IMAGENET_BACKBONES)
    for name in names:
        fetch_weights(name, args.weights_dir)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    from rpca.train import train

    manifest = _load_manifest(cfg)
    checkpoint = train(cfg.train, cfg.variant, manifest, out_dir=cfg.output_dir, pretrained=cfg.pretrained)
    last = checkpoint.history[-1]
    logger.info("Finished %d epochs, final loss %.4f", checkpoint.epoch, last["train_loss"])
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    from rpca.evaluation import evaluate, write_report

    manifest = _load_manifest(cfg)
    report = evaluate(
        args.checkpoint, manifest, split=cfg.eval_split, average=args.average, zero_division=args.zero_division
    )
    write_report(report, cfg.output_dir)
    print(render_summary(report))
    return EXIT_OK


def render_summary(report) -> str:
    from rpca.metrics import render_tables

    return render_tables([report])["text"]


def cmd_ablate(args, cfg) -> int:
    from rpca.ablation import AblationPlan, run_ablation
    from rpca.backbones import IMAGENET_BACKBONES
    from rpca.model import VARIANT_KINDS

    manifest = _load_manifest(cfg)
    base_seed = cfg.train.seed if cfg.train.seed is not None else 0
    plan = AblationPlan(
        variants=args.variants or list(VARIANT_KINDS),
        backbones=args.backbones or list(IMAGENET_BACKBONES),
        output_dir=cfg.output_dir,
        base_seed=base_seed,
        train=dataclasses.replace(cfg.train, seed=base_seed),
        variant_template=cfg.variant,
        eval_split=cfg.eval_split,
        pretrained=cfg.pretrained,
    )
    result = run_ablation(plan, manifest, parallel=args.parallel)
    if (result.output_dir / "table.txt").exists():
        print((result.output_dir / "table.txt").read_text())
    return EXIT_OK if result.ok else EXIT_FAILURE


def cmd_gradcam(args, cfg) -> int:
    from rpca.gradcam import collect_images, explain_batch, explain_image
    from rpca.train import Checkpoint

    paths = collect_images(args.images)
    checkpoint = Checkpoint.load(args.checkpoint)
    targets = args.target_classes or [None]
    if len(paths) == 1 and len(targets) == 1 and not Path(args.images[0]).is_dir():
        heatmaps = [
            explain_image(checkpoint.model, paths[0], cfg.output_dir, targets[0], args.alpha, checkpoint.classes)
        ]
    else:
        heatmaps = explain_batch(
            checkpoint.model, paths, cfg.output_dir, targets, args.alpha, checkpoint.classes, args.panel
        )
    for heatmap in heatmaps:
        print(json.dumps(heatmap.to_dict(checkpoint.classes), sort_keys=True))
    return EXIT_OK


def parameter_note(reports) -> str:
    """Measured head size next to the published backbone size, per report."""
    from rpca.backbones import BACKBONES

    lines = ["Parameter reconciliation (millions; published backbone vs measured model):"]
    for r in reports:
        spec = BACKBONES.get(r.backbone)
        published = spec.base_param_count if spec else float("nan")
        measured = r.param_count / 1e6
        lines.append(
            f"  {r.variant:<15} {r.backbone:<12} published backbone {published:6.1f}  "
            f"measured total {measured:6.1f}  difference {measured - published:+6.2f}"
        )
    return "\n".join(lines) + "\n"


def cmd_report(args, cfg) -> int:
    from rpca.metrics import MetricsReport, render_tables

    runs = Path(args.runs)
    files = sorted(runs.rglob("report.json"))
    if not files:
        raise ConfigurationError(f"No report.json files under {runs}")
    reports = [MetricsReport.from_json(f.read_text()) for f in files]
    tables = render_tables(reports)
    out = Path(args.output or runs)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(tables["text"] + "\n" + parameter_note(reports))
    (out / "table.csv").write_text(tables["csv"])
    print(tables["text"])
    print(parameter_note(reports))
    return EXIT_OK


def cmd_serve(args, cfg) -> int:
    import uvicorn

    if args.checkpoint:
        config.checkpoint = args.checkpoint
    uvicorn.run("rpca.server:app", host=args.host or config.host, port=args.port or config.port)
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON or YAML experiment file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
    p.add_argument("--log-level", default=None, help="overrides RPCA_LOG_LEVEL")


def _add_data(p: argparse.ArgumentParser):
    p.add_argument("--data-root", dest="data_root", help="dataset root with one folder per class")
    p.add_argument("--manifest", help="manifest CSV (paths relative to the data root)")


def _add_model(p: argparse.ArgumentParser, single_backbone: bool = True):
    if single_backbone:
        p.add_argument("--backbone")
    p.add_argument(
        "--preprocessing-mode", dest="preprocessing_mode", choices=["bgr_zero_center", "scale_signed_unit", "rgb_mean_std"]
    )
    p.add_argument("--dropout", type=float)
    p.add_argument("--hidden-units", dest="hidden_units", type=int)
    p.add_argument("--upsample-mode", dest="upsample_mode", choices=["bilinear", "nearest"])
    p.add_argument("--no-pretrained", dest="no_pretrained", action="store_true",
                   help="random backbone initialisation (tests and the toy backbone only)")


def _add_train(p: argparse.ArgumentParser, seed_required: bool):
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--augment-regime", dest="augment_regime", choices=["basic", "extended"])
    p.add_argument("--lr-schedule", dest="lr_schedule", choices=["constant", "step"])
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--num-workers", dest="num_workers", type=int)
    p.add_argument("--resize-mode", dest="resize_mode", choices=["stretch", "pad"])
    p.add_argument("--frozen-backbone", dest="frozen_backbone", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rpca", description="Region-pooled channel-attention image classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="scan a class-folder dataset into a manifest")
    _add_common(p)
    _add_data(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="assign train/val/test per class")
    _add_common(p)
    _add_data(p)
    p.add_argument("--mode", dest="split_mode", choices=["count-table", "ratio"])
    p.add_argument("--table")
    p.add_argument("--per-class-count", dest="per_class_count", type=int)
    p.add_argument("--with-val", dest="with_val", action="store_true")
    p.add_argument("--train-ratio", dest="train_ratio", type=float)
    p.add_argument("--val-ratio", dest="val_ratio", type=float)
    p.add_argument("--seed", dest="split_seed", type=int)
    p.add_argument("--output", help="where to write the split manifest (default: overwrite --manifest)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", help="write the coloured-shape fixture dataset")
    _add_common(p)
    p.add_argument("--root", required=True)
    p.add_argument("--per-class", dest="per_class", type=int, default=200)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", dest="synth_seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fetch-weights", help="download ImageNet backbone weights into the weight cache")
    _add_common(p)
    p.add_argument("--backbone", dest="backbones", action="append", help="repeatable; 'all' for every backbone")
    p.add_argument("--weights-dir", dest="weights_dir")
    p.set_defaults(func=cmd_fetch_weights)

    p = sub.add_parser("train", help="train one variant")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    _add_train(p, seed_required=True)
    p.add_argument("--variant", choices=["baseline", "baseline_reg", "regions_only", "attention_only", "full"])
    p.add_argument("--out", help="run directory (checkpoints land in <out>/final and <out>/best)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", dest="eval_split", choices=["train", "val", "test"])
    p.add_argument("--average", choices=["macro", "weighted"], default="macro")
    p.add_argument("--zero-division", dest="zero_division", choices=["zero", "nan"], default="zero")
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "ablate", help="train and evaluate a variant × backbone grid", allow_abbrev=False
    )
    _add_common(p)
    _add_data(p)
    # the grid takes --backbones
    _add_model(p, single_backbone=False)
    _add_train(p, seed_required=False)
    p.add_argument("--variants", nargs="+", choices=["baseline", "baseline_reg", "regions_only", "attention_only", "full"])
    p.add_argument("--backbones", nargs="+")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--split", dest="eval_split", choices=["val", "test"])
    p.add_argument("--out", help="grid directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcam", help="Grad-CAM heatmaps and overlays for image files")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", dest="images", action="append", required=True,
                   help="image file or folder of images, repeatable; several images also produce one panel figure")
    p.add_argument("--panel", default="gradcam_panel.png", help="panel file name inside --out")
    p.add_argument("--class", dest="target_classes", type=int, action="append",
                   help="target class index, repeatable (default: the predicted class)")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("report", help="render tables from a directory of report.json files")
    _add_common(p)
    p.add_argument("--runs", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="run the inference API")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or config.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _resolve(args)
        return args.func(args, cfg)
    except RPCAError as e:
        logger.error("%s", e)
        return EXIT_FAILURE
    except Exception:
        logger.exception("%s failed", args.command)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
