"""Variant × backbone grid runs."""
import json

import pytest

import rpca.ablation as ablation
from conftest import toy_train_config
from rpca.ablation import AblationPlan, cell_seed, run_ablation
from rpca.errors import ConfigurationError, TrainingError


def test_cell_seed_is_stable_and_distinct():
    seed = cell_seed(0, "full", "resnet50")
    assert seed == cell_seed(0, "full", "resnet50")
    assert 0 <= seed < 2**31
    assert seed != cell_seed(0, "full", "xception")
    assert seed != cell_seed(1, "full", "resnet50")


def test_plan_validation_and_table_order(tmp_path):
    with pytest.raises(ConfigurationError):
        AblationPlan(variants=["bilinear"], backbones=["toy"], output_dir=tmp_path)
    with pytest.raises(ConfigurationError):
        AblationPlan(variants=["full"], backbones=["vgg16"], output_dir=tmp_path)
    plan = AblationPlan(variants=["full", "attention_only", "baseline"], backbones=["toy"], output_dir=tmp_path)
    assert [v for v, _ in plan.cells()] == ["baseline", "full", "attention_only"]


def _plan(out):
    return AblationPlan(
        variants=["full", "baseline"],
        backbones=["toy"],
        output_dir=out,
        base_seed=3,
        train=toy_train_config(epochs=1),
        pretrained=False,
    )


def test_grid_writes_tables_and_resumes(shapes_manifest, tmp_path):
    first = run_ablation(_plan(tmp_path), shapes_manifest)
    assert first.ok
    assert first.trained == ["baseline__toy", "full__toy"]
    assert first.skipped == []

    rows = (tmp_path / "table.csv").read_text().splitlines()[1:]
    assert [r.split(",")[0] for r in rows] == ["baseline", "full"]
    assert json.loads((tmp_path / "failures.json").read_text()) == {}
    artifacts = json.loads((tmp_path / "artifacts.json").read_text())
    assert "cells/full__toy/report.json" in artifacts
    table = (tmp_path / "table.txt").read_bytes()

    second = run_ablation(_plan(tmp_path), shapes_manifest)
    assert second.trained == []
    assert second.skipped == ["baseline__toy", "full__toy"]
    assert (tmp_path / "table.txt").read_bytes() == table


def test_failing_cell_does_not_stop_the_grid(shapes_manifest, tmp_path, monkeypatch):
    real_train = ablation.train

    def flaky_train(train_config, variant, *args, **kwargs):
        if variant.kind == "full":
            raise TrainingError("loss became NaN", epoch=1, batch=0)
        return real_train(train_config, variant, *args, **kwargs)

    monkeypatch.setattr(ablation, "train", flaky_train)
    result = run_ablation(_plan(tmp_path), shapes_manifest)
    assert not result.ok
    assert set(result.failures) == {"full__toy"}
    assert "TrainingError" in result.failures["full__toy"]
    assert [r.variant for r in result.reports] == ["baseline"]
