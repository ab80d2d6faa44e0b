"""
Evaluation Service - scores, metric suite and sharded evaluation

Scores are sigmoid(logits) from the model in eval mode, where batch norm uses
its running statistics, so every image is scored independently and a
sharded run returns the same numbers as a single pass. In float32 the
reductions inside a shard follow the shard's batch layout, so sharded
float32 scores may differ in the last bits.
"""
import logging
import time
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from hsvlt.core.config import ExperimentConfig, to_flat
from hsvlt.core.errors import ConfigError, HsvltError
from hsvlt.core.tensor import precision
from hsvlt.metrics import PrfMode, mean_ap, prf_suite
from hsvlt.models.counting import count_params_flops
from hsvlt.schemas import RunReport
from hsvlt.services.dataset_service import SyntheticDataset, load_dataset
from hsvlt.services.storage import load_checkpoint
from hsvlt.services.training_service import TrainState, check_dataset, predict

logger = logging.getLogger(__name__)

TOP_K = 3


def shard_bounds(num_images: int, workers: int) -> List[Tuple[int, int]]:
    """Contiguous [start, stop) ranges, as even as possible, none empty."""
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    workers = min(workers, num_images)
    edges = np.linspace(0, num_images, workers + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


class EvaluationService:
    """Service for scoring checkpoints"""

    @staticmethod
    def build_report(
        cfg: ExperimentConfig,
        scores: np.ndarray,
        truths: np.ndarray,
        epochs_run: int = 0,
        final_loss: Optional[float] = None,
        wall_time: float = 0.0,
    ) -> RunReport:
        """Metric suite in both regimes: every label above 0.5, and the top 3 labels per image."""
        ap = mean_ap(scores, truths)
        cost = count_params_flops(cfg.model)
        return RunReport(
            config=to_flat(cfg),
            mAP=ap.mean_ap,
            all=prf_suite(scores, truths, PrfMode.THRESHOLD),
            top3=prf_suite(scores, truths, PrfMode.TOP_K, k=min(TOP_K, truths.shape[1])),
            excluded_classes=ap.excluded_classes,
            params=cost.params,
            flops_per_image=cost.flops_per_image,
            wall_time=wall_time,
            epochs_run=epochs_run,
            final_loss=final_loss,
            num_images=int(scores.shape[0]),
        )

    @staticmethod
    def score_state(state: TrainState, dataset: SyntheticDataset) -> np.ndarray:
        cfg = state.config
        check_dataset(cfg, dataset)
        with precision(cfg.train.precision.value):
            return predict(state.model, dataset.images, cfg.train.batch_size)

    @staticmethod
    def score_shard(checkpoint: Union[str, Path], data_dir: Union[str, Path], start: int, stop: int) -> np.ndarray:
        state = load_checkpoint(checkpoint)
        dataset = load_dataset(data_dir).subset(start, stop)
        return EvaluationService.score_state(state, dataset)

    @staticmethod
    def evaluate(
        checkpoint: Union[str, Path],
        data_dir: Union[str, Path],
        workers: int = 0,
    ) -> Tuple[RunReport, np.ndarray, np.ndarray]:
        """
        Score a saved checkpoint on a dataset directory.

        Args:
            checkpoint: HSVA checkpoint written by train
            data_dir: dataset directory (images.hsvt, truths.hsvt)
            workers: 0 scores in-process; N > 0 splits the images into N
                Celery tasks (run in-process when HSVLT_CELERY_EAGER=1)

        Returns:
            (RunReport, scores, truths)
        """
        started = time.perf_counter()
        state = load_checkpoint(checkpoint)
        dataset = load_dataset(data_dir)
        check_dataset(state.config, dataset)
        if workers > 0:
            scores = EvaluationService._score_with_workers(checkpoint, data_dir, dataset.num_images, workers)
        else:
            scores = EvaluationService.score_state(state, dataset)
        report = EvaluationService.build_report(
            state.config, scores, dataset.truths,
            epochs_run=state.epoch,
            final_loss=state.final_loss,
            wall_time=time.perf_counter() - started,
        )
        logger.info(f"📊 evaluated {checkpoint} on {dataset.num_images} images: mAP={report.mAP:.4f}")
        return report, scores, dataset.truths

    @staticmethod
    def _score_with_workers(checkpoint, data_dir, num_images: int, workers: int) -> np.ndarray:
        from hsvlt.services.tasks import evaluate_shard

        bounds = shard_bounds(num_images, workers)
        logger.info(f"⚙️ scoring {num_images} images in {len(bounds)} shards")
        pending = [evaluate_shard.delay(str(checkpoint), str(data_dir), start, stop) for start, stop in bounds]
        try:
            results = [task.get() for task in pending]
        except HsvltError:
            raise
        except Exception as e:
            raise HsvltError(f"{type(e).__name__}: sharded evaluation failed: {e}") from e
        results = sorted(results, key=lambda r: r["start"])
        return np.concatenate([np.asarray(r["scores"], dtype=np.float64) for r in results], axis=0)


# Global instance
evaluation_service = EvaluationService()
