import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from hsvlt.core.config import with_overrides
from hsvlt.core.errors import ConfigError, ShapeError
from hsvlt.metrics import mean_ap, read_prediction_set, write_prediction_csv
from hsvlt.services.dataset_service import generate_dataset, save_dataset
from hsvlt.services.evaluation_service import evaluation_service, shard_bounds
from hsvlt.services.storage import save_checkpoint
from hsvlt.services.training_service import init_state, training_service


@pytest.fixture
def checkpoint(tmp_path, tiny_cfg, tiny_dataset):
    state, report = training_service.train(tiny_cfg, tiny_dataset)
    path = save_checkpoint(tmp_path / "ckpt.hsva", state, tiny_dataset.num_images)
    return path, report


def test_shard_bounds():
    assert shard_bounds(10, 3) == [(0, 3), (3, 7), (7, 10)]
    assert shard_bounds(2, 5) == [(0, 1), (1, 2)]
    assert shard_bounds(4, 1) == [(0, 4)]
    with pytest.raises(ConfigError):
        shard_bounds(4, 0)


def test_evaluate_reproduces_training_report(checkpoint, data_dir):
    path, train_report = checkpoint
    report, scores, truths = evaluation_service.evaluate(path, data_dir)
    assert scores.shape == (8, 3)
    assert report.mAP == train_report.mAP
    assert report.all == train_report.all
    assert report.top3 == train_report.top3
    assert report.epochs_run == 2


def test_sharded_scores_match_single_pass(eager_celery, checkpoint, data_dir):
    path, _ = checkpoint
    _, single, _ = evaluation_service.evaluate(path, data_dir)
    report, sharded, _ = evaluation_service.evaluate(path, data_dir, workers=3)
    assert_allclose(sharded, single, rtol=0, atol=1e-12)
    assert report.num_images == 8


def test_report_recomputes_from_csv(tmp_path, checkpoint, data_dir):
    path, _ = checkpoint
    report, scores, truths = evaluation_service.evaluate(path, data_dir)
    write_prediction_csv(tmp_path / "scores.csv", scores)
    write_prediction_csv(tmp_path / "truths.csv", truths)
    scores_back, truths_back = read_prediction_set(tmp_path / "scores.csv", tmp_path / "truths.csv")
    assert_array_equal(scores_back, scores)
    assert abs(mean_ap(scores_back, truths_back).mean_ap - report.mAP) <= 1e-12


def test_build_report_uses_top3_and_threshold(tiny_cfg):
    truths = np.array([[1, 0, 0], [0, 1, 1], [1, 1, 0]])
    scores = np.array([[0.9, 0.2, 0.1], [0.3, 0.8, 0.6], [0.7, 0.4, 0.2]])
    report = evaluation_service.build_report(tiny_cfg, scores, truths)
    assert report.all.mode == "threshold_05"
    assert report.top3.mode == "top_3"
    assert report.top3.OR == 1.0
    assert report.mAP == 1.0
    assert report.params > 0


def test_evaluate_rejects_mismatched_dataset(tmp_path, checkpoint):
    path, _ = checkpoint
    other = save_dataset(generate_dataset(seed=1, num_images=4, num_labels=5), tmp_path / "other")
    with pytest.raises(ShapeError):
        evaluation_service.evaluate(path, other)


def test_untrained_model_scores_near_label_prevalence(tmp_path, tiny_cfg):
    maps, prevalences = [], []
    for seed in range(5):
        cfg = with_overrides(tiny_cfg, seed=seed)
        dataset = generate_dataset(seed=seed, num_images=60, num_labels=3, image_size=32)
        data = save_dataset(dataset, tmp_path / f"data{seed}")
        path = save_checkpoint(tmp_path / f"untrained{seed}.hsva", init_state(cfg, dataset.num_images),
                               dataset.num_images)
        report, _, truths = evaluation_service.evaluate(path, data)
        assert report.epochs_run == 0
        maps.append(report.mAP)
        prevalences.append(truths.mean())
    assert abs(np.mean(maps) - np.mean(prevalences)) <= 0.1
