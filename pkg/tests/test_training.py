import math

import numpy as np
import pytest
import torch

from atriaseg.architectures import ArchitectureSpec, build_model
from atriaseg.checkpoints import ADAM, load_model_checkpoint, read_sidecar, save_model_checkpoint
from atriaseg.datasets import SliceStore, SplitManifest
from atriaseg.ensemble import EnsembleModel, build_ensemble, load_ensemble_checkpoint
from atriaseg.evaluation import evaluate, mean_foreground_dice
from atriaseg.losses import ENSEMBLE_WEIGHTS, joint_loss
from atriaseg.phantom import PhantomConfig, generate_phantom
from atriaseg.training import (
    ENSEMBLE_CONFIG,
    SUBMODEL_CONFIG,
    TrainConfig,
    TrainingError,
    TrainRecord,
    onecycle_lr,
    train_ensemble,
    train_submodel,
    warmup_end_step,
)

TINY = ArchitectureSpec("unet", base_width=4)


def test_reference_presets():
    assert SUBMODEL_CONFIG.epochs == 300 and ENSEMBLE_CONFIG.epochs == 30
    assert ENSEMBLE_CONFIG.loss_weights == ENSEMBLE_WEIGHTS
    assert (SUBMODEL_CONFIG.lr_init, SUBMODEL_CONFIG.lr_max, SUBMODEL_CONFIG.lr_final) == (1e-4, 1e-2, 1e-6)
    assert ADAM["betas"] == [0.9, 0.999] and ADAM["eps"] == 1e-8


@pytest.mark.parametrize("total", [3, 10, 137, 10_000])
def test_onecycle_anchors(total):
    cfg = TrainConfig()
    assert onecycle_lr(0, total, cfg) == pytest.approx(1e-4, rel=1e-12)
    assert onecycle_lr(warmup_end_step(total, cfg), total, cfg) == pytest.approx(1e-2, rel=1e-12)
    assert abs(onecycle_lr(total - 1, total, cfg) - 1e-6) <= 1e-9


def test_onecycle_shape():
    cfg = TrainConfig()
    total = 10_000
    lrs = np.array([onecycle_lr(s, total, cfg) for s in range(total)])
    peak = warmup_end_step(total, cfg)
    assert peak == round(0.3 * (total - 1))
    assert np.all(np.diff(lrs[: peak + 1]) >= 0) and np.all(np.diff(lrs[peak:]) <= 0)
    assert np.count_nonzero(lrs == lrs.max()) == 1 and lrs.argmax() == peak
    # continuity: per-step change bounded by the cosine's maximum slope
    max_jump = math.pi / 2 * (cfg.lr_max - cfg.lr_init) / peak
    assert np.abs(np.diff(lrs)).max() <= max_jump * 1.0001


def test_onecycle_bounds():
    cfg = TrainConfig()
    for step in (-1, 100):
        with pytest.raises(IndexError):
            onecycle_lr(step, 100, cfg)
    assert onecycle_lr(0, 1, cfg) == cfg.lr_init


def test_config_validation():
    with pytest.raises(TrainingError):
        TrainConfig(lr_init=1e-1)
    with pytest.raises(TrainingError):
        TrainConfig(lr_final=1e-3)
    with pytest.raises(TrainingError):
        TrainConfig(warmup_fraction=1.0)
    with pytest.raises(TrainingError):
        TrainConfig(epochs=0)


@pytest.fixture(scope="module")
def overfit_data():
    pair = generate_phantom(PhantomConfig(depth=8, height=64, width=64, seed=0), case_id="c0")
    store = SliceStore.from_pairs([pair])
    train = [("c0", k) for k in (2, 3, 4, 5)]
    val = [("c0", 1), ("c0", 6)]
    manifest = SplitManifest(0, (1, 1, 1), {s: {"train": train, "val": val} for s in "ABC"}, [("c0", 0)])
    return store, manifest


@pytest.fixture(scope="module")
def overfit_run(overfit_data, tmp_path_factory):
    store, manifest = overfit_data
    out = tmp_path_factory.mktemp("overfit")
    cfg = TrainConfig(epochs=50, batch_size=4, augment=False, seed=0)
    best, record = train_submodel(ArchitectureSpec("unet"), manifest, "A", cfg, store, out)
    return out, best, record


def test_overfit_four_slices(overfit_data, overfit_run):
    store, manifest = overfit_data
    out, _, record = overfit_run
    model, meta = load_model_checkpoint(out / "final")
    report = evaluate(model, manifest, store, split="A", partition="train", compute_hd=False)
    assert mean_foreground_dice(report) >= 0.90
    assert len(record.epochs) == 50 and meta["epoch"] == 49


def test_record_and_sidecar(overfit_run):
    out, best, record = overfit_run
    meta = read_sidecar(best)
    assert meta["kind"] == "unet" and meta["split_id"] == "A" and meta["seed"] == 0
    assert meta["optimizer"] == ADAM
    assert meta["epoch"] == record.best_epoch
    assert meta["val_metrics"]["val_mean_dice"] == record.best_val_dice
    lines = TrainRecord.read_jsonl(out / "train_record.jsonl")
    assert [e.epoch for e in lines.epochs] == list(range(50))
    assert all(math.isfinite(e.train_loss) and math.isfinite(e.val_loss) for e in lines.epochs)
    assert record.best_val_dice == max(mean for mean in (
        sum(v for v in e.val_dice.values() if v is not None)
        / len([v for v in e.val_dice.values() if v is not None]) / 100 for e in record.epochs))


def test_best_checkpoint_self_consistent(overfit_data, overfit_run):
    store, manifest = overfit_data
    _, best, record = overfit_run
    model, _ = load_model_checkpoint(best)
    report = evaluate(model, manifest, store, split="A", partition="val", compute_hd=False)
    assert abs(mean_foreground_dice(report) - record.best_val_dice) <= 1e-6


def test_checkpoint_roundtrip(overfit_data, tmp_path):
    store, manifest = overfit_data
    model = build_model(TINY, seed=3)
    save_model_checkpoint(model, tmp_path / "m", seed=3, epoch=0, split_id="A")
    loaded, _ = load_model_checkpoint(tmp_path / "m.json")
    a = evaluate(model, manifest, store, partition="val")
    b = evaluate(loaded, manifest, store, partition="val")
    assert a.classes == b.classes


def test_same_seed_same_first_epoch(overfit_data, tmp_path):
    store, manifest = overfit_data
    cfg = TrainConfig(epochs=1, batch_size=2, seed=11)
    _, r1 = train_submodel(TINY, manifest, "A", cfg, store, tmp_path / "a")
    _, r2 = train_submodel(TINY, manifest, "A", cfg, store, tmp_path / "b")
    assert r1.epochs[0].train_loss == r2.epochs[0].train_loss


def test_fixed_batch_loss_bitwise():
    torch.use_deterministic_algorithms(True)
    model = build_model(TINY, seed=0).eval()
    x = torch.rand(2, 1, 32, 32, generator=torch.Generator().manual_seed(0))
    y = torch.randint(0, 4, (2, 32, 32), generator=torch.Generator().manual_seed(1))
    a = joint_loss(model(x), y, ENSEMBLE_WEIGHTS)
    b = joint_loss(model(x), y, ENSEMBLE_WEIGHTS)
    assert torch.equal(a, b)


def test_non_finite_loss_aborts(overfit_data, tmp_path, monkeypatch):
    store, manifest = overfit_data
    import atriaseg.training as tr

    monkeypatch.setattr(tr, "joint_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(TrainingError, match="batch 0"):
        train_submodel(TINY, manifest, "A", TrainConfig(epochs=1, batch_size=2), store, tmp_path)


@pytest.fixture(scope="module")
def ensemble_parts(overfit_data, tmp_path_factory):
    root = tmp_path_factory.mktemp("members")
    paths = []
    for i in range(2):
        paths.append(save_model_checkpoint(build_model(TINY, seed=i), root / f"m{i}", seed=i, epoch=0, split_id="A"))
    return paths


def test_ensemble_training_freezes_members(overfit_data, ensemble_parts, tmp_path):
    store, manifest = overfit_data
    ens = build_ensemble(ensemble_parts)
    before = {k: v.clone() for k, v in ens.submodels.state_dict().items()}
    fusion0 = ens.fusion.detach().clone()
    cfg = TrainConfig(epochs=30, batch_size=4, loss_weights=ENSEMBLE_WEIGHTS)
    best, record = train_ensemble(ens, manifest, cfg, store, tmp_path)
    assert len(record.epochs) == 30
    after = ens.submodels.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert all(p.grad is None or not p.grad.any() for p in ens.submodels.parameters())
    assert not torch.equal(ens.fusion.detach(), fusion0)
    loaded, meta = load_ensemble_checkpoint(best)
    assert meta["M"] == 2 and meta["epoch"] == record.best_epoch


def test_ensemble_rejects_unfrozen(overfit_data, tmp_path):
    store, manifest = overfit_data
    ens = EnsembleModel([build_model(TINY)])
    next(ens.submodels.parameters()).requires_grad_(True)
    with pytest.raises(TrainingError):
        train_ensemble(ens, manifest, TrainConfig(epochs=1), store, tmp_path)
