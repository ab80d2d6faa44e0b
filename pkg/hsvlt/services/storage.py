"""
Checkpoint storage on top of the HSVA archive.

Entries: model/<param or buffer>, adam_m/<param>, adam_v/<param>,
loss_history, lr_history, map_history. Payloads are float64 (version 2) so
a 64-bit run round-trips bit for bit. Meta carries the flat config echo,
step/epoch counters, the optimizer step, scheduler state and the batch-order
rng state.
"""
import logging
from pathlib import Path
from typing import Union

import numpy as np

from hsvlt.core.config import desk_preset, from_flat, to_flat
from hsvlt.core.container import load_archive, save_archive
from hsvlt.core.errors import ContainerError
from hsvlt.core.tensor import precision
from hsvlt.services.training_service import TrainState, init_state

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "hsvlt-checkpoint"
CHECKPOINT_VERSION = 2


def save_checkpoint(path: Union[str, Path], state: TrainState, num_images: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    exp_avg, exp_avg_sq, adam_t = state.optimizer.state_dict()
    tensors = {f"model/{name}": value for name, value in state.model.state_dict().items()}
    tensors.update({f"adam_m/{name}": value for name, value in exp_avg.items()})
    tensors.update({f"adam_v/{name}": value for name, value in exp_avg_sq.items()})
    tensors["loss_history"] = np.asarray(state.loss_history, dtype=np.float64)
    tensors["lr_history"] = np.asarray(state.lr_history, dtype=np.float64)
    tensors["map_history"] = np.asarray(state.map_history, dtype=np.float64)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": to_flat(state.config),
        "step": state.step,
        "epoch": state.epoch,
        "adam_t": adam_t,
        "num_images": num_images,
        "scheduler": state.scheduler.state_dict(),
        "rng_state": state.rng.get_state(),
    }
    save_archive(path, tensors, meta=meta, version=CHECKPOINT_VERSION)
    logger.info(f"✅ checkpoint saved to {path} (epoch {state.epoch}, step {state.step})")
    return path


def _group(tensors, prefix: str):
    return {name[len(prefix):]: value for name, value in tensors.items() if name.startswith(prefix)}


def load_checkpoint(path: Union[str, Path]) -> TrainState:
    """Rebuild the train state; the model is created under the checkpoint's precision."""
    tensors, meta = load_archive(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ContainerError(f"{path} is not a checkpoint (format={meta.get('format')!r})")
    try:
        cfg = from_flat(meta["config"], base=desk_preset())
        with precision(cfg.train.precision.value):
            state = init_state(cfg, int(meta["num_images"]))
            state.model.load_state_dict(_group(tensors, "model/"))
            state.optimizer.load_state_dict(_group(tensors, "adam_m/"), _group(tensors, "adam_v/"), meta["adam_t"])
        state.scheduler.load_state_dict(meta.get("scheduler", {}))
        state.rng.set_state(meta["rng_state"])
        state.step = int(meta["step"])
        state.epoch = int(meta["epoch"])
        state.loss_history = tensors["loss_history"].tolist()
        state.lr_history = tensors["lr_history"].tolist()
        state.map_history = tensors["map_history"].tolist()
    except KeyError as exc:
        raise ContainerError(f"{path}: checkpoint is missing {exc}") from exc
    logger.info(f"📥 checkpoint loaded from {path} (epoch {state.epoch}, step {state.step})")
    return state
