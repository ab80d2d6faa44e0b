import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from hsvlt.core import ops
from hsvlt.core.config import desk_preset, with_overrides
from hsvlt.core.errors import ConfigError, ContainerError, DivergenceError, LabelError, ShapeError
from hsvlt.core.nn import Parameter
from hsvlt.core.optim import AdamW, PlateauLRScheduler, PolyLRScheduler
from hsvlt.core.tensor import Tensor
from hsvlt.services import training_service as ts
from hsvlt.services.dataset_service import generate_dataset
from hsvlt.services.storage import load_checkpoint, save_checkpoint


def test_bce_of_zero_logits_is_ln2():
    loss = ts.bce_loss(Tensor(np.zeros((4, 3))), np.array([[1, 0, 1]] * 4))
    assert loss.item() == pytest.approx(math.log(2.0), rel=1e-12)
    with pytest.raises(LabelError):
        ts.bce_loss(Tensor(np.zeros((1, 2))), np.array([[0.5, 1.0]]))


def test_poly_schedule():
    schedule = PolyLRScheduler(1e-3, 100, power=0.9)
    assert schedule.lr_at(0) == 1e-3
    assert schedule.lr_at(50) == pytest.approx(1e-3 * 0.5 ** 0.9, rel=1e-12)
    assert schedule.lr_at(100) == 0.0
    assert schedule.lr_at(150) == 0.0


def test_plateau_schedule_cuts_after_patience():
    schedule = PlateauLRScheduler(1.0, patience=2, factor=0.1)
    for loss in (1.0, 1.0, 1.0):
        schedule.end_epoch(loss)
    assert schedule.lr_at(0) == 1.0
    schedule.end_epoch(1.0)
    assert schedule.lr_at(0) == pytest.approx(0.1)
    schedule.end_epoch(0.5)
    assert schedule.bad_epochs == 0


def test_adamw_first_step_and_decay_exemption():
    weight = Parameter(np.ones((2, 2)))
    bias = Parameter(np.ones(2))
    weight.grad = np.array([[0.5, -2.0], [1.0, -0.25]])
    bias.grad = np.array([3.0, -1.0])
    AdamW([("w", weight), ("b", bias)], lr=0.1, weight_decay=0.01).step()
    # first step: m/bc1 = g and sqrt(v)/sqrt(bc2) = |g|
    expected_w = (1.0 - 0.1 * 0.01) - 0.1 * np.sign(weight.grad) * np.abs(weight.grad) / (np.abs(weight.grad) + 1e-8)
    assert_allclose(weight.data, expected_w, rtol=1e-12)
    assert_allclose(bias.data, 1.0 - 0.1 * np.sign(bias.grad), rtol=1e-7)


def test_training_runs_and_reports(tiny_cfg, tiny_dataset):
    images_before = tiny_dataset.images.copy()
    state, report = ts.training_service.train(tiny_cfg, tiny_dataset)
    assert state.epoch == 2
    assert len(state.loss_history) == 2 * ts.steps_per_epoch(8, 4)
    assert state.lr_history[0] == tiny_cfg.train.lr
    assert report.epochs_run == 2
    assert report.num_images == 8
    assert 0.0 < report.mAP <= 1.0
    assert report.config["channels"] == "4,6,8,10"
    assert_array_equal(tiny_dataset.images, images_before)


def test_training_is_deterministic(tiny_cfg, tiny_dataset):
    first, _ = ts.training_service.train(tiny_cfg, tiny_dataset)
    second, _ = ts.training_service.train(tiny_cfg, tiny_dataset)
    assert first.loss_history == second.loss_history


def test_resume_matches_uninterrupted_run(tmp_path, tiny_cfg, tiny_dataset):
    straight, straight_report = ts.training_service.train(tiny_cfg, tiny_dataset)

    half, _ = ts.training_service.train(tiny_cfg, tiny_dataset, epochs=1)
    assert half.epoch == 1
    save_checkpoint(tmp_path / "ckpt.hsva", half, tiny_dataset.num_images)
    loaded = load_checkpoint(tmp_path / "ckpt.hsva")
    resumed, resumed_report = ts.training_service.train(tiny_cfg, tiny_dataset, state=loaded)

    assert resumed.loss_history == straight.loss_history
    assert resumed.step == straight.step
    final, expected = resumed.model.state_dict(), straight.model.state_dict()
    for name in expected:
        assert_array_equal(final[name], expected[name])
    assert resumed_report.mAP == straight_report.mAP


def test_resume_with_other_model_is_rejected(tmp_path, tiny_cfg, tiny_dataset):
    state, _ = ts.training_service.train(tiny_cfg, tiny_dataset, epochs=1)
    save_checkpoint(tmp_path / "ckpt.hsva", state, tiny_dataset.num_images)
    other = with_overrides(tiny_cfg, gconv_kernel=5)
    with pytest.raises(ConfigError):
        ts.training_service.train(other, tiny_dataset, state=load_checkpoint(tmp_path / "ckpt.hsva"))


def test_checkpoint_rejects_plain_archive(tmp_path):
    from hsvlt.core.container import save_archive

    save_archive(tmp_path / "other.hsva", {"x": np.ones(2)})
    with pytest.raises(ContainerError):
        load_checkpoint(tmp_path / "other.hsva")


def test_target_map_stops_early(tiny_cfg, tiny_dataset):
    cfg = with_overrides(tiny_cfg, target_map=0.01, epochs=5)
    state, report = ts.training_service.train(cfg, tiny_dataset)
    assert state.epoch == 1
    assert report.epochs_run == 1


def test_non_finite_loss_raises(monkeypatch, tiny_cfg, tiny_dataset):
    monkeypatch.setattr(ts, "bce_loss", lambda logits, truths: ops.sum(logits) * float("nan"))
    with pytest.raises(DivergenceError):
        ts.training_service.train(tiny_cfg, tiny_dataset)


def test_dataset_must_match_config(tiny_cfg):
    wrong_labels = generate_dataset(seed=0, num_images=4, num_labels=4, image_size=32)
    with pytest.raises(ShapeError):
        ts.training_service.train(tiny_cfg, wrong_labels)
    wrong_size = generate_dataset(seed=0, num_images=4, num_labels=3, image_size=48)
    with pytest.raises(ShapeError):
        ts.training_service.train(tiny_cfg, wrong_size)


def test_plateau_schedule_round_trips_through_checkpoint(tmp_path, tiny_cfg, tiny_dataset):
    cfg = with_overrides(tiny_cfg, lr_schedule="plateau", plateau_patience=1)
    state, _ = ts.training_service.train(cfg, tiny_dataset, epochs=1)
    save_checkpoint(tmp_path / "ckpt.hsva", state, tiny_dataset.num_images)
    loaded = load_checkpoint(tmp_path / "ckpt.hsva")
    assert isinstance(loaded.scheduler, PlateauLRScheduler)
    assert loaded.scheduler.best == state.scheduler.best
    assert loaded.rng.get_state() == state.rng.get_state()


@pytest.mark.slow
def test_desk_model_overfits_small_dataset():
    cfg = desk_preset()
    dataset = generate_dataset(seed=0, num_images=64, num_labels=5, image_size=32)
    state, report = ts.training_service.train(cfg, dataset)
    assert report.mAP >= 0.99
    assert state.epoch <= 300


@pytest.mark.slow
def test_aggregation_head_reaches_target_no_later_than_stage_four_head():
    wins = 0
    for seed in range(5):
        dataset = generate_dataset(seed=seed, num_images=64, num_labels=5, image_size=32)
        epochs = {}
        for variant in ("concat_head_mlp", "s4_head_mlp"):
            cfg = with_overrides(desk_preset(), seed=seed, csa_variant=variant)
            state, _ = ts.training_service.train(cfg, dataset)
            epochs[variant] = state.epoch
        wins += epochs["concat_head_mlp"] <= epochs["s4_head_mlp"]
    assert wins >= 3
