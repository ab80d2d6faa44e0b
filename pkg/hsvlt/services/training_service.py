"""
Training Service - AdamW training loop over a synthetic dataset

Batch order comes from a seeded stream stored in the train state, so a run
resumed from a checkpoint continues exactly where the original would have.
Checkpoints are taken at epoch boundaries.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from hsvlt.core import ops
from hsvlt.core.config import ExperimentConfig, LrSchedule
from hsvlt.core.errors import ConfigError, DivergenceError, LabelError, ShapeError
from hsvlt.core.optim import AdamW, PlateauLRScheduler, PolyLRScheduler
from hsvlt.core.rng import Rng
from hsvlt.core.tensor import Tensor, get_default_dtype, no_grad, precision
from hsvlt.metrics import mean_ap
from hsvlt.models.hsvlt import HsvltModel, build_model, model_forward
from hsvlt.schemas import RunReport
from hsvlt.services.dataset_service import SyntheticDataset

logger = logging.getLogger(__name__)

BATCH_STREAM = "batch_order"


def bce_loss(logits: Tensor, truths) -> Tensor:
    """Mean binary cross-entropy with logits over all B*T entries."""
    truths = np.asarray(truths.data if isinstance(truths, Tensor) else truths)
    if not np.isin(truths, (0, 1)).all():
        raise LabelError("bce_loss needs binary truths (0 or 1)")
    return ops.binary_cross_entropy_with_logits(logits, truths)


def make_scheduler(cfg: ExperimentConfig, steps_per_epoch: int) -> Union[PolyLRScheduler, PlateauLRScheduler]:
    train = cfg.train
    if train.lr_schedule == LrSchedule.PLATEAU:
        return PlateauLRScheduler(train.lr, train.plateau_patience, train.plateau_factor)
    return PolyLRScheduler(train.lr, train.epochs * steps_per_epoch, train.lr_power)


@dataclass
class TrainState:
    config: ExperimentConfig
    model: HsvltModel
    optimizer: AdamW
    scheduler: Union[PolyLRScheduler, PlateauLRScheduler]
    rng: Rng
    step: int = 0
    epoch: int = 0
    loss_history: List[float] = field(default_factory=list)
    lr_history: List[float] = field(default_factory=list)
    map_history: List[float] = field(default_factory=list)

    @property
    def final_loss(self) -> Optional[float]:
        return self.loss_history[-1] if self.loss_history else None


def steps_per_epoch(num_images: int, batch_size: int) -> int:
    return math.ceil(num_images / batch_size)


def init_state(cfg: ExperimentConfig, num_images: int) -> TrainState:
    """Fresh state; call under the configured precision."""
    model = build_model(cfg.model)
    train = cfg.train
    optimizer = AdamW(list(model.named_parameters()), lr=train.lr, betas=(train.beta1, train.beta2),
                      eps=train.adam_eps, weight_decay=train.weight_decay)
    return TrainState(
        config=cfg,
        model=model,
        optimizer=optimizer,
        scheduler=make_scheduler(cfg, steps_per_epoch(num_images, train.batch_size)),
        rng=Rng(cfg.model.seed).child(BATCH_STREAM),
    )


def check_dataset(cfg: ExperimentConfig, dataset: SyntheticDataset) -> None:
    model = cfg.model
    expected = (model.input_channels,) + tuple(model.image_size)
    if dataset.images.shape[1:] != expected:
        raise ShapeError(f"dataset images {dataset.images.shape[1:]} do not match configured {expected}")
    if dataset.num_labels != model.num_labels:
        raise ShapeError(f"dataset has {dataset.num_labels} labels, config expects {model.num_labels}")


def train_step(state: TrainState, images: np.ndarray, truths: np.ndarray) -> float:
    lr = state.scheduler.lr_at(state.step)
    state.model.train()
    logits = model_forward(Tensor(images, dtype=get_default_dtype()), state.model)
    loss = bce_loss(logits, truths)
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"loss became {value} at step {state.step} (epoch {state.epoch})")
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step(lr)
    state.step += 1
    state.loss_history.append(value)
    state.lr_history.append(lr)
    logger.debug(f"step {state.step} loss={value:.6f} lr={lr:.3e}")
    return value


def predict(model: HsvltModel, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Sigmoid scores (N, T) in eval mode."""
    model.eval()
    chunks = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            batch = Tensor(images[start:start + batch_size], dtype=get_default_dtype())
            chunks.append(ops.sigmoid(model_forward(batch, model)).data.astype(np.float64))
    return np.concatenate(chunks, axis=0)


def run_epoch(state: TrainState, dataset: SyntheticDataset) -> float:
    batch_size = state.config.train.batch_size
    order = state.rng.permutation(dataset.num_images)
    losses = []
    for start in range(0, order.size, batch_size):
        index = order[start:start + batch_size]
        losses.append(train_step(state, dataset.images[index], dataset.truths[index]))
    state.epoch += 1
    epoch_loss = float(np.mean(losses))
    state.scheduler.end_epoch(epoch_loss)
    return epoch_loss


class TrainingService:
    """Service for training runs"""

    @staticmethod
    def train(
        cfg: ExperimentConfig,
        dataset: SyntheticDataset,
        state: Optional[TrainState] = None,
        epochs: Optional[int] = None,
        on_epoch: Optional[Callable[[TrainState], None]] = None,
    ) -> Tuple[TrainState, RunReport]:
        """
        Train until cfg.train.epochs (or `epochs` more epochs, whichever is
        first), stopping early once train mAP reaches cfg.train.target_map.

        Args:
            cfg: experiment config; the schedule is planned over cfg.train.epochs
            dataset: training images and truths (never modified)
            state: state to resume from (e.g. a loaded checkpoint)
            epochs: epochs to run in this call
            on_epoch: called after each epoch, e.g. to checkpoint

        Returns:
            (final state, RunReport on the training set)
        """
        from hsvlt.services.evaluation_service import evaluation_service

        check_dataset(cfg, dataset)
        started = time.perf_counter()
        with precision(cfg.train.precision.value):
            if state is None:
                state = init_state(cfg, dataset.num_images)
            elif state.config.model != cfg.model:
                raise ConfigError("resumed state was trained with a different model config")
            last_epoch = cfg.train.epochs if epochs is None else min(cfg.train.epochs, state.epoch + epochs)
            logger.info(f"🚀 training epochs {state.epoch + 1}..{last_epoch} on {dataset.num_images} images "
                        f"({state.model.num_parameters()} parameters)")

            while state.epoch < last_epoch:
                epoch_loss = run_epoch(state, dataset)
                scores = predict(state.model, dataset.images, cfg.train.batch_size)
                train_map = mean_ap(scores, dataset.truths).mean_ap
                state.map_history.append(train_map)
                logger.info(f"epoch {state.epoch}/{cfg.train.epochs} loss={epoch_loss:.6f} mAP={train_map:.4f} "
                            f"lr={state.lr_history[-1]:.3e}")
                if on_epoch is not None:
                    on_epoch(state)
                if cfg.train.target_map is not None and train_map >= cfg.train.target_map:
                    logger.info(f"✅ reached target mAP {cfg.train.target_map} after {state.epoch} epochs")
                    break

            scores = predict(state.model, dataset.images, cfg.train.batch_size)
        report = evaluation_service.build_report(
            cfg, scores, dataset.truths,
            epochs_run=state.epoch,
            final_loss=state.final_loss,
            wall_time=time.perf_counter() - started,
        )
        return state, report


# Global instance
training_service = TrainingService()
