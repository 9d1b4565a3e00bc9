"""Loss, optimiser step, model assembly, checkpoints and the training loop."""
import math

import pytest
import torch

from conftest import toy_train_config
from rpca.errors import CheckpointError, ConfigurationError, ParameterError, TrainingError
from rpca.head import head_param_count
from rpca.model import ModelVariant, build_model
from rpca.train import Checkpoint, TrainConfig, cross_entropy_loss, sgd_step, train


def test_cross_entropy_examples():
    onehot = torch.tensor([[0.0, 1.0, 0.0]])
    assert cross_entropy_loss(onehot.clone(), onehot).item() == 0.0
    uniform = torch.full((4, 50), 1 / 50, dtype=torch.float64)
    labels = torch.nn.functional.one_hot(torch.tensor([0, 7, 13, 49]), 50).double()
    assert abs(cross_entropy_loss(uniform, labels).item() - math.log(50)) <= 1e-9
    probs = torch.tensor([[0.7, 0.2, 0.1]], dtype=torch.float64)
    assert cross_entropy_loss(probs, onehot.double()).item() == pytest.approx(-math.log(0.2), abs=1e-4)


def test_cross_entropy_floor_and_validation():
    probs = torch.tensor([[1.0, 0.0]])
    labels = torch.tensor([[0.0, 1.0]])
    assert cross_entropy_loss(probs, labels).item() == pytest.approx(-math.log(1e-12), rel=1e-5)
    with pytest.raises(ParameterError):
        cross_entropy_loss(probs, torch.tensor([[0.5, 0.5]]))
    with pytest.raises(ParameterError):
        cross_entropy_loss(probs, torch.tensor([[1.0, 1.0]]))


def test_sgd_step_examples():
    theta, _ = sgd_step({"w": torch.tensor(1.0)}, {"w": torch.tensor(2.0)}, lr=0.1, momentum=0.0)
    assert theta["w"].item() == pytest.approx(0.8)

    theta, velocity = sgd_step(
        {"w": torch.tensor(1.0)}, {"w": torch.tensor(0.0)}, lr=0.1, momentum=0.9, velocity={"w": torch.tensor(2.0)}
    )
    assert theta["w"].item() == pytest.approx(1.0 - 0.1 * 1.8)
    assert velocity["w"].item() == pytest.approx(1.8)

    theta = {"w": torch.tensor(0.0, dtype=torch.float64)}
    grad = {"w": torch.tensor(1.0, dtype=torch.float64)}
    velocity = None
    for _ in range(2):
        theta, velocity = sgd_step(theta, grad, lr=0.1, momentum=0.9, velocity=velocity)
    assert theta["w"].item() == pytest.approx(-0.29, abs=1e-12)


def test_sgd_step_zero_gradient_is_fixed_point():
    theta = {"w": torch.tensor([0.5, -1.0])}
    new, velocity = sgd_step(theta, {"w": torch.zeros(2)}, lr=0.1, momentum=0.9, velocity={"w": torch.zeros(2)})
    assert torch.equal(new["w"], theta["w"])
    assert torch.equal(velocity["w"], torch.zeros(2))


def test_sgd_step_non_finite_gradient_names_parameter():
    with pytest.raises(TrainingError) as err:
        sgd_step({"head.dense.weight": torch.zeros(2)}, {"head.dense.weight": torch.tensor([1.0, math.nan])}, 0.1)
    assert err.value.parameter == "head.dense.weight"
    assert "head.dense.weight" in str(err.value)


def test_weight_decay_pulls_towards_zero():
    theta, _ = sgd_step({"w": torch.tensor(2.0)}, {"w": torch.tensor(0.0)}, lr=0.1, weight_decay=0.5)
    assert theta["w"].item() == pytest.approx(2.0 - 0.1 * 1.0)


def test_torch_sgd_matches_functional_step():
    gen = torch.Generator().manual_seed(0)
    weights = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    param = torch.nn.Parameter(weights.clone())
    optimizer = torch.optim.SGD([param], lr=0.05, momentum=0.9, weight_decay=0.01, foreach=False)
    theta, velocity = {"w": weights.clone()}, None
    for step in range(4):
        grad = torch.randn(4, 3, generator=gen, dtype=torch.float64)
        param.grad = grad.clone()
        if step == 2:
            for group in optimizer.param_groups:
                group["lr"] = 0.005
        optimizer.step()
        theta, velocity = sgd_step(theta, {"w": grad}, 0.005 if step == 2 else 0.05, 0.9, velocity, 0.01)
        assert torch.allclose(param.detach(), theta["w"], rtol=0, atol=1e-12)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=-0.1)
    with pytest.raises(ConfigurationError):
        TrainConfig(optimizer="adam")
    step = TrainConfig(lr=1.0, lr_schedule="step")
    assert [step.lr_at(e) for e in (0, 59, 60, 84, 85)] == pytest.approx([1.0, 1.0, 0.1, 0.1, 0.01])


def test_variant_layer_compositions():
    classes = ["a", "b", "c"]
    full = build_model(ModelVariant(kind="full", backbone="toy"), classes, pretrained=False)
    assert full.layer_composition() == [
        "backbone:toy", "upsample:32", "regions:4", "attention", "dropout", "layernorm", "dense:3", "softmax"
    ]
    baseline = build_model(ModelVariant(kind="baseline", backbone="toy"), classes, pretrained=False)
    assert baseline.layer_composition() == ["backbone:toy", "gap", "dense:3", "softmax"]
    regions = build_model(ModelVariant(kind="regions_only", backbone="toy"), classes, pretrained=False)
    assert "attention" not in regions.layer_composition()
    assert "regions:4" in regions.layer_composition()
    attention = build_model(ModelVariant(kind="attention_only", backbone="toy"), classes, pretrained=False)
    assert attention.layer_composition()[:3] == ["backbone:toy", "attention:map", "gap"]


def test_regions_rejected_for_global_pool_variants():
    for kind in ("baseline", "baseline_reg", "attention_only"):
        with pytest.raises(ConfigurationError):
            ModelVariant(kind=kind, backbone="toy", regions=[[0, 16, 0, 32]])
    with pytest.raises(ConfigurationError):
        ModelVariant(kind="bilinear")


def test_augmentation_regime_per_variant():
    assert ModelVariant(kind="baseline").augment_regime == "basic"
    for kind in ("baseline_reg", "regions_only", "attention_only", "full"):
        assert ModelVariant(kind=kind).augment_regime == "extended"


def test_parameter_registry_for_resnet50():
    classes = [f"c{i}" for i in range(50)]
    baseline = build_model(ModelVariant(kind="baseline", backbone="resnet50"), classes, pretrained=False)
    registry = baseline.parameter_registry()
    assert registry["dense"] == 2048 * 50 + 50
    assert abs(registry["total"] / 1e6 - (23.7 + 0.1)) < 0.05 * 23.8

    full = build_model(ModelVariant(kind="full", backbone="resnet50"), classes, pretrained=False)
    head = full.parameter_registry()
    assert head["layernorm"] + head["dense"] == head_param_count(2048, 4, 50) == 426_034

    regularized = build_model(ModelVariant(kind="baseline_reg", backbone="resnet50"), classes, pretrained=False)
    attention = build_model(ModelVariant(kind="attention_only", backbone="resnet50"), classes, pretrained=False)
    assert regularized.parameter_registry() == attention.parameter_registry()


def test_lr_zero_leaves_parameters_unchanged(shapes_manifest):
    variant = ModelVariant(kind="full", backbone="toy")
    torch.manual_seed(21)
    initial = build_model(variant, shapes_manifest.classes, pretrained=False).state_dict()
    checkpoint = train(toy_train_config(epochs=1, lr=0.0, seed=21, batch_size=64), variant, shapes_manifest, device="cpu")
    final = checkpoint.model.state_dict()
    for name, tensor in initial.items():
        assert torch.equal(tensor, final[name]), name


def test_training_history_and_checkpoints(toy_run):
    checkpoint, out = toy_run
    assert [row["epoch"] for row in checkpoint.history] == [0, 1, 2]
    assert checkpoint.history[0]["val_top1"] is None
    assert all(0.0 <= row["val_top1"] <= 1.0 for row in checkpoint.history[1:])
    for name in ("final", "best"):
        for artefact in ("config.json", "weights.safetensors", "history.csv", "rng_state"):
            assert (out / name / artefact).exists()
    header = (out / "final" / "history.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_top1"


def test_checkpoint_round_trip_is_bit_exact(toy_run, tmp_path):
    checkpoint, out = toy_run
    loaded = Checkpoint.load(out / "final")
    assert loaded.classes == checkpoint.classes
    assert loaded.variant == checkpoint.variant
    assert loaded.history == checkpoint.history
    batch = torch.rand(4, 3, 224, 224, generator=torch.Generator().manual_seed(0)) * 255
    checkpoint.model.eval()
    with torch.no_grad():
        assert torch.equal(checkpoint.model(batch), loaded.model(batch))

    loaded.save(tmp_path / "again")
    assert (tmp_path / "again" / "history.csv").read_bytes() == (out / "final" / "history.csv").read_bytes()


def test_checkpoint_overwrite_leaves_no_backup(toy_run, tmp_path):
    checkpoint, _ = toy_run
    target = tmp_path / "ckpt"
    checkpoint.save(target)
    (target / "stale.txt").write_text("from the first save")
    checkpoint.save(target)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt"]
    assert not (target / "stale.txt").exists()
    assert Checkpoint.load(target).history == checkpoint.history


def test_load_falls_back_to_backup_of_interrupted_save(toy_run, tmp_path):
    checkpoint, _ = toy_run
    target = tmp_path / "ckpt"
    checkpoint.save(target)
    # state after the old directory moved aside but before the new one landed
    target.rename(tmp_path / ".ckpt.bak")
    assert Checkpoint.load(target).classes == checkpoint.classes


def test_truncated_weights_raise_checkpoint_error(toy_run, tmp_path):
    checkpoint, _ = toy_run
    target = checkpoint.save(tmp_path / "ckpt")
    weights = target / "weights.safetensors"
    weights.write_bytes(weights.read_bytes()[:64])
    with pytest.raises(CheckpointError):
        Checkpoint.load(target)


def test_missing_or_garbled_checkpoint_files(toy_run, tmp_path):
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "absent")
    checkpoint, _ = toy_run
    target = checkpoint.save(tmp_path / "ckpt")
    (target / "config.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        Checkpoint.load(target)


def test_training_is_deterministic(shapes_manifest, tmp_path):
    variant = ModelVariant(kind="full", backbone="toy")
    train(toy_train_config(), variant, shapes_manifest, out_dir=tmp_path / "a", device="cpu")
    train(toy_train_config(), variant, shapes_manifest, out_dir=tmp_path / "b", device="cpu")
    assert (tmp_path / "a" / "final" / "history.csv").read_bytes() == (tmp_path / "b" / "final" / "history.csv").read_bytes()


def test_training_needs_seed_and_data(shapes_manifest):
    variant = ModelVariant(kind="full", backbone="toy")
    with pytest.raises(ConfigurationError):
        train(toy_train_config(seed=None), variant, shapes_manifest, device="cpu")
    with pytest.raises(TrainingError):
        train(toy_train_config(), variant, shapes_manifest.unassigned(), device="cpu")


def test_dense_only_loss_is_non_increasing(shapes_manifest):
    """Convex case: fixed features, linear head, no augmentation, small steps."""
    config = toy_train_config(epochs=5, lr=0.01, momentum=0.0, batch_size=64, augment_regime="basic")
    config.augment.rotation_deg = 0.0
    config.augment.zoom_range = (1.0, 1.0)
    config.augment.random_crop = False
    checkpoint = train(config, ModelVariant(kind="baseline", backbone="toy"), shapes_manifest, device="cpu")
    losses = [row["train_loss"] for row in checkpoint.history]
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))


@pytest.mark.slow
def test_toy_training_halves_the_loss(shapes_manifest):
    config = toy_train_config(epochs=20, lr=0.05)
    checkpoint = train(config, ModelVariant(kind="full", backbone="toy"), shapes_manifest, device="cpu")
    assert checkpoint.history[-1]["train_loss"] < 0.5 * checkpoint.history[0]["train_loss"]
