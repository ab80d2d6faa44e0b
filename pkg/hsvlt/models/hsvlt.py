"""
Full model: encoder followed by cross-scale aggregation.
"""
import logging
from typing import Optional

import numpy as np

from hsvlt.core.config import ModelConfig
from hsvlt.core.nn import child_rng
from hsvlt.core.rng import Rng
from hsvlt.core.tensor import Tensor
from hsvlt.models.aggregation import CrossScaleAggregation
from hsvlt.models.encoder import Encoder

logger = logging.getLogger(__name__)

PARAMS_STREAM = "params"


class HsvltModel(Encoder):
    def __init__(self, cfg: ModelConfig, rng: Optional[Rng] = None):
        super().__init__(cfg, rng)
        self.csa = CrossScaleAggregation(cfg, child_rng(rng, "csa"))
        self.bind_names()

    def forward(self, images: Tensor) -> Tensor:
        return model_forward(images, self)


def build_model(cfg: ModelConfig, init: bool = True) -> HsvltModel:
    """Seeded model; init=False leaves every random parameter at zero."""
    rng = Rng(cfg.seed).child(PARAMS_STREAM) if init else None
    model = HsvltModel(cfg, rng)
    logger.debug(f"built model with {model.num_parameters()} parameters (seed={cfg.seed})")
    return model


def model_forward(images, model: HsvltModel) -> Tensor:
    """Logits (B, T); the linguistic input is always the full label vocabulary."""
    images = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    encoded = model.encode(images, range(model.model_cfg.num_labels))
    return model.csa(encoded.S, encoded.L)
