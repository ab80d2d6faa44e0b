"""
Cross-scale aggregation and classification heads.

concat_head_mlp: concat selected stage features on channels, Hamburger, 1x1 class conv.
mlp_concat_mlp: 1x1 map of each selected feature to a common width, concat, 1x1 class conv.
s4_head_mlp:    stage-4 S only, 1x1 head conv, 1x1 class conv.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from hsvlt.core import ops
from hsvlt.core.config import CsaConfig, CsaFeatures, CsaVariant, ModelConfig
from hsvlt.core.errors import NonNegativeError, ShapeError
from hsvlt.core.nn import Module, Pointwise, child_rng
from hsvlt.core.rng import Rng
from hsvlt.core.tensor import Tensor

logger = logging.getLogger(__name__)

NMF_EPS = 1e-6
BASES_LOW, BASES_HIGH = 0.05, 1.0
BASES_STREAM = "hamburger.bases"


def nmf_step(x: Tensor, d: Tensor, c: Tensor, eps: float = NMF_EPS) -> Tuple[Tensor, Tensor]:
    """
    One round of multiplicative updates for X ~ D C (batched over leading axes):
    C <- C * (D^T X) / (D^T D C + eps), then D <- D * (X C^T) / (D C C^T + eps).
    """
    for name, t in (("X", x), ("D", d), ("C", c)):
        if np.any(t.data < 0):
            raise NonNegativeError(f"nmf_step needs non-negative {name}, min={t.data.min():.3e}")
    if d.shape[-2] != x.shape[-2] or c.shape[-1] != x.shape[-1] or d.shape[-1] != c.shape[-2]:
        raise ShapeError(f"nmf shapes do not compose: X {x.shape}, D {d.shape}, C {c.shape}")
    d_t = ops.transpose_last2(d)
    c = c * ops.matmul(d_t, x) / (ops.matmul(ops.matmul(d_t, d), c) + eps)
    c_t = ops.transpose_last2(c)
    d = d * ops.matmul(x, c_t) / (ops.matmul(d, ops.matmul(c, c_t)) + eps)
    return d, c


def init_bases(channels: int, rank: int, seed: int) -> np.ndarray:
    """Strictly positive bases, unit-norm columns, identical on every call for a seed."""
    bases = Rng(seed).child(BASES_STREAM).uniform(BASES_LOW, BASES_HIGH, (channels, rank))
    return bases / np.linalg.norm(bases, axis=0, keepdims=True)


class Hamburger(Module):
    """lower bread -> softplus -> NMF (K unrolled steps) -> upper bread, plus residual."""

    def __init__(self, channels: int, rank: int, updates: int, seed: int = 0, rng: Optional[Rng] = None):
        super().__init__()
        self.rank, self.updates, self.seed = rank, updates, seed
        self.lower_bread = Pointwise(channels, channels, child_rng(rng, "lower_bread"))
        self.upper_bread = Pointwise(channels, channels, child_rng(rng, "upper_bread"))

    def forward(self, x: Tensor) -> Tensor:
        z = ops.softplus(self.lower_bread(x))
        batch, channels, _ = z.shape
        bases = init_bases(channels, self.rank, self.seed).astype(z.dtype)
        d = Tensor(np.broadcast_to(bases, (batch, channels, self.rank)), dtype=z.dtype)
        c = ops.softmax(ops.matmul(ops.transpose_last2(d), z), axis=1)
        for _ in range(self.updates):
            d, c = nmf_step(z, d, c)
        return x + self.upper_bread(ops.matmul(d, c))


def hamburger(x: Tensor, module: Hamburger) -> Tensor:
    return module(x)


def select_features(s: Sequence[Tensor], l: Sequence[Tensor], stages_used: Sequence[int],
                    features: CsaFeatures) -> List[Tensor]:
    """Per selected stage (ascending): S_i, L_i, or S_i then L_i."""
    features = CsaFeatures(features)
    chosen: List[Tensor] = []
    for stage in stages_used:
        if features in (CsaFeatures.S, CsaFeatures.S_AND_L):
            chosen.append(s[stage - 1])
        if features in (CsaFeatures.L, CsaFeatures.S_AND_L):
            chosen.append(l[stage - 1])
    if not chosen:
        raise ShapeError("cross-scale aggregation selected no features")
    tokens = {t.shape[-1] for t in chosen}
    if len(tokens) != 1:
        raise ShapeError(f"selected features disagree on label count: {sorted(tokens)}")
    return chosen


def selected_channels(model_cfg: ModelConfig) -> List[int]:
    csa = model_cfg.csa
    per_stage = 2 if csa.features == CsaFeatures.S_AND_L else 1
    return [model_cfg.stages[i - 1].channels for i in csa.stages_used for _ in range(per_stage)]


class CrossScaleAggregation(Module):
    """Builds only the head its (effective) variant uses."""

    def __init__(self, model_cfg: ModelConfig, rng: Optional[Rng] = None):
        super().__init__()
        self.csa_cfg: CsaConfig = model_cfg.csa
        self.variant = self.csa_cfg.effective_variant
        if self.variant == CsaVariant.CONCAT_HEAD_MLP:
            width = sum(selected_channels(model_cfg))
            self.hamburger = Hamburger(width, self.csa_cfg.ham_latent_rank, self.csa_cfg.ham_updates,
                                       seed=model_cfg.seed, rng=child_rng(rng, "hamburger"))
            self.classifier = Pointwise(width, 1, child_rng(rng, "classifier"))
        elif self.variant == CsaVariant.MLP_CONCAT_MLP:
            widths = selected_channels(model_cfg)
            self.common_width = max(widths)
            for k, channels in enumerate(widths):
                setattr(self, f"scale{k}", Pointwise(channels, self.common_width, child_rng(rng, f"scale{k}")))
            self.num_scales = len(widths)
            self.classifier = Pointwise(self.common_width * len(widths), 1, child_rng(rng, "classifier"))
        else:
            last = model_cfg.stages[-1].channels
            self.head = Pointwise(last, last, child_rng(rng, "head"))
            self.classifier = Pointwise(last, 1, child_rng(rng, "classifier"))

    def forward(self, s: Sequence[Tensor], l: Sequence[Tensor]) -> Tensor:
        if self.variant == CsaVariant.CONCAT_HEAD_MLP:
            chosen = select_features(s, l, self.csa_cfg.stages_used, self.csa_cfg.features)
            out = self.classifier(self.hamburger(ops.concat(chosen, axis=1)))
        elif self.variant == CsaVariant.MLP_CONCAT_MLP:
            chosen = select_features(s, l, self.csa_cfg.stages_used, self.csa_cfg.features)
            mapped = [getattr(self, f"scale{k}")(feature) for k, feature in enumerate(chosen)]
            out = self.classifier(ops.concat(mapped, axis=1))
        else:
            out = self.classifier(self.head(s[-1]))
        return ops.reshape(out, (out.shape[0], out.shape[2]))


def csa_classify(s: Sequence[Tensor], l: Sequence[Tensor], module: CrossScaleAggregation) -> Tensor:
    """Logits (B, T)."""
    return module(s, l)
