"""
Four-stage joint vision-language encoder.

Stage 1 embeds the image (stride-2 conv + BN) and the label vocabulary; stages
2-4 halve the visual map (Down) and widen the linguistic tokens (Unify). Each
stage then chains its interaction blocks, feeding (V, L) of one block into the
next and keeping the last block's multi-modal feature S.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from hsvlt.core import ops
from hsvlt.core.config import EmbeddingKind, ModelConfig, StageConfig
from hsvlt.core.container import load_tensor
from hsvlt.core.errors import ConfigError, ShapeError
from hsvlt.core.nn import (
    BatchNorm,
    Conv2d,
    InitKind,
    LayerNorm,
    Module,
    Pointwise,
    child_rng,
    is_shape_only,
    make_parameter,
)
from hsvlt.core.rng import Rng
from hsvlt.core.tensor import Tensor, get_default_dtype
from hsvlt.models.ivla import Ivla

logger = logging.getLogger(__name__)

EMBED_INIT_STD = 0.02


@dataclass
class EncoderOutput:
    S: List[Tensor]
    L: List[Tensor]
    V4: Tensor
    L4: Tensor
    attention: Dict[str, np.ndarray] = field(default_factory=dict)


def _require_even(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects (B, C, H, W), got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"{what} needs even spatial size, got {x.shape[2]}x{x.shape[3]}")


class PatchEmbed(Module):
    """Stride-2 3x3 conv (padding 1, no bias) then batch norm."""

    def __init__(self, in_channels: int, out_channels: int, rng: Optional[Rng] = None):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, stride=2, padding=1, rng=child_rng(rng, "conv"), bias=False)
        self.norm = BatchNorm(out_channels)

    def forward(self, image: Tensor) -> Tensor:
        _require_even(image, "patch_embed")
        return self.norm(self.conv(image))


class ScaleTransform(PatchEmbed):
    def forward(self, v: Tensor) -> Tensor:
        _require_even(v, "scale_transform")
        return self.norm(self.conv(v))


class ChannelUnify(Pointwise):
    pass


class WordEmbed(Module):
    """
    Label embeddings (C_l, T) for ids 0..T-1 followed by a 1x1 projection to
    the stage-1 width. learned_table looks columns up; one_hot_projected
    multiplies the same table by one-hot columns; external_file reads a fixed
    (C_l, T) tensor container.
    """

    def __init__(self, kind: EmbeddingKind, embed_channels: int, vocab_size: int, out_channels: int,
                 rng: Optional[Rng] = None, embedding_file: Optional[str] = None):
        super().__init__()
        self.kind = EmbeddingKind(kind)
        self.vocab_size = vocab_size
        if self.kind == EmbeddingKind.EXTERNAL_FILE:
            self.external = self._load_external(embedding_file, embed_channels, vocab_size)
        else:
            self.table = make_parameter((embed_channels, vocab_size), InitKind.TRUNCATED_NORMAL,
                                        child_rng(rng, "table"), scale=EMBED_INIT_STD)
        self.proj = Pointwise(embed_channels, out_channels, child_rng(rng, "proj"))

    @staticmethod
    def _load_external(path: Optional[str], embed_channels: int, vocab_size: int) -> np.ndarray:
        if is_shape_only():
            return np.zeros((embed_channels, vocab_size), dtype=get_default_dtype())
        if not path:
            raise ConfigError("external_file embedding needs embedding_file")
        table = load_tensor(path)
        if table.shape != (embed_channels, vocab_size):
            raise ShapeError(f"external embedding {path} has shape {table.shape}, expected {(embed_channels, vocab_size)}")
        logger.info(f"📥 loaded external label embeddings {table.shape} from {path}")
        return table.astype(get_default_dtype())

    def embed(self, label_ids: Sequence[int]) -> Tensor:
        """L_0 before the width projection, shape (C_l, T)."""
        ids = np.asarray(label_ids, dtype=np.int64)
        if ids.ndim != 1 or len(np.unique(ids)) != ids.size:
            raise ConfigError(f"label ids must be a list of unique integers, got {label_ids}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ConfigError(f"label ids must lie in 0..{self.vocab_size - 1}")
        if self.kind == EmbeddingKind.LEARNED_TABLE:
            return ops.index_select(self.table, ids, axis=1)
        if self.kind == EmbeddingKind.ONE_HOT_PROJECTED:
            one_hot = np.zeros((self.vocab_size, ids.size), dtype=self.table.dtype)
            one_hot[ids, np.arange(ids.size)] = 1.0
            return ops.matmul(self.table, Tensor(one_hot, dtype=self.table.dtype))
        return Tensor(self.external[:, ids], dtype=self.external.dtype)

    def forward(self, label_ids: Sequence[int], batch: int) -> Tensor:
        l0 = self.embed(label_ids)
        projected = self.proj(ops.reshape(l0, (1,) + l0.shape))
        return ops.broadcast_to(projected, (batch,) + projected.shape[1:])


class InteractionBlock(Module):
    """
    (V2, L2) = IVLA(Norm(V0), Norm(L0)); V = Norm(V0 + V2); L = Norm(L0 + L2);
    S = Norm(L2). Every Norm is a layer norm over channels.
    """

    def __init__(self, stage: StageConfig, rng: Optional[Rng] = None):
        super().__init__()
        channels = stage.channels
        self.norm_v0 = LayerNorm(channels)
        self.norm_l0 = LayerNorm(channels)
        self.ivla = Ivla(stage.ivla, child_rng(rng, "ivla"))
        self.norm_v = LayerNorm(channels)
        self.norm_l = LayerNorm(channels)
        self.norm_s = LayerNorm(channels)

    def forward(self, v0: Tensor, l0: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        v2, l2 = self.ivla(self.norm_v0(v0), self.norm_l0(l0))
        return self.norm_v(v0 + v2), self.norm_l(l0 + l2), self.norm_s(l2)


class Stage(Module):
    def __init__(self, stage: StageConfig, model: ModelConfig, rng: Optional[Rng] = None,
                 previous_channels: Optional[int] = None):
        super().__init__()
        self.index = stage.index
        self.num_blocks = stage.num_blocks
        if stage.index == 1:
            self.patch_embed = PatchEmbed(model.input_channels, stage.channels, child_rng(rng, "patch_embed"))
            self.word_embed = WordEmbed(model.embedding_kind, model.linguistic_channels, model.num_labels,
                                        stage.channels, child_rng(rng, "word_embed"),
                                        embedding_file=model.embedding_file)
        else:
            self.down = ScaleTransform(previous_channels, stage.channels, child_rng(rng, "down"))
            self.unify = ChannelUnify(previous_channels, stage.channels, child_rng(rng, "unify"))
        for j in range(stage.num_blocks):
            setattr(self, f"block{j}", InteractionBlock(stage, child_rng(rng, f"block{j}")))

    @property
    def blocks(self) -> List[InteractionBlock]:
        return [getattr(self, f"block{j}") for j in range(self.num_blocks)]

    def stage_inputs(self, v_prev: Tensor, l_prev: Tensor) -> Tuple[Tensor, Tensor]:
        return self.down(v_prev), self.unify(l_prev)

    def run_blocks(self, v: Tensor, l: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        s = None
        for block in self.blocks:
            v, l, s = block(v, l)
        return v, l, s


class Encoder(Module):
    """Owns stage1..stage4; parameter names start with the stage name."""

    def __init__(self, cfg: ModelConfig, rng: Optional[Rng] = None):
        super().__init__()
        self.model_cfg = cfg
        previous = None
        for stage in cfg.stages:
            setattr(self, f"stage{stage.index}",
                    Stage(stage, cfg, child_rng(rng, f"stage{stage.index}"), previous))
            previous = stage.channels

    @property
    def stages(self) -> List[Stage]:
        return [getattr(self, f"stage{s.index}") for s in self.model_cfg.stages]

    def set_capture_attention(self, enabled: bool) -> None:
        for stage in self.stages:
            for block in stage.blocks:
                block.ivla.capture_attention = enabled
                block.ivla.last_attention = None

    def encode(self, image: Tensor, label_ids: Optional[Sequence[int]] = None) -> EncoderOutput:
        return encoder_forward(image, label_ids, self)


def patch_embed(image: Tensor, module: PatchEmbed) -> Tensor:
    return module(image)


def word_embed(label_ids: Sequence[int], module: WordEmbed, batch: int = 1) -> Tensor:
    return module(label_ids, batch)


def scale_transform(v: Tensor, module: ScaleTransform) -> Tensor:
    return module(v)


def channel_unify(l: Tensor, module: ChannelUnify) -> Tensor:
    return module(l)


def interaction_block(v0: Tensor, l0: Tensor, module: InteractionBlock) -> Tuple[Tensor, Tensor, Tensor]:
    return module(v0, l0)


def encoder_forward(image: Tensor, label_ids: Optional[Sequence[int]], encoder: Encoder) -> EncoderOutput:
    cfg = encoder.model_cfg
    expected = (cfg.input_channels,) + tuple(cfg.image_size)
    if image.ndim != 4 or image.shape[1:] != expected:
        raise ShapeError(f"image batch {image.shape} does not match configured (B, {', '.join(map(str, expected))})")
    if label_ids is None:
        label_ids = range(cfg.num_labels)

    s_list: List[Tensor] = []
    l_list: List[Tensor] = []
    v = l = None
    for stage in encoder.stages:
        if stage.index == 1:
            v = stage.patch_embed(image)
            l = stage.word_embed(label_ids, image.shape[0])
        else:
            v, l = stage.stage_inputs(v, l)
        v, l, s = stage.run_blocks(v, l)
        s_list.append(s)
        l_list.append(l)

    attention = {}
    for stage in encoder.stages:
        for j, block in enumerate(stage.blocks):
            if block.ivla.last_attention is not None:
                attention[f"att_stage{stage.index}_block{j}"] = block.ivla.last_attention
    return EncoderOutput(S=s_list, L=l_list, V4=v, L4=l, attention=attention)
