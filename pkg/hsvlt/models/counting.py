"""
Parameter and multiply-accumulate counts.

Parameters are enumerated from a model built inside nn.shape_only(), so the
full-size configuration costs no memory. FLOPs are multiply-accumulates of
every convolution and matrix product for one image, split into terms that
scale with the visual area (spatial) and terms that do not (token).
"""
from typing import Tuple

from hsvlt.core.config import CsaVariant, EmbeddingKind, ModelConfig
from hsvlt.core.nn import shape_only
from hsvlt.models.aggregation import selected_channels
from hsvlt.models.hsvlt import HsvltModel
from hsvlt.schemas import CostReport


def count_parameters(cfg: ModelConfig) -> int:
    with shape_only():
        return HsvltModel(cfg).num_parameters()


def head_parameters(cfg: ModelConfig) -> int:
    with shape_only():
        return HsvltModel(cfg).csa.num_parameters()


def _block_macs(channels: int, area: int, tokens: int, ivla) -> Tuple[int, int]:
    c2 = channels * channels
    spatial = 2 * area * c2                   # omega_v1, omega_v2
    spatial += 3 * area * channels * tokens   # Att, linguistic pooling, visual spreading
    token = 2 * tokens * c2                   # omega_l1, omega_l2
    if ivla.use_l_act:
        token += tokens * c2
    if ivla.use_gconv:
        spatial += area * channels * ivla.gconv_kernel ** 2
    if ivla.use_v_gate:
        spatial += 2 * area * c2
    if ivla.use_l_gate:
        token += 2 * tokens * c2
    return spatial, token


def _head_macs(cfg: ModelConfig) -> int:
    tokens = cfg.num_labels
    variant = cfg.csa.effective_variant
    if variant == CsaVariant.CONCAT_HEAD_MLP:
        width, rank = sum(selected_channels(cfg)), cfg.csa.ham_latent_rank
        macs = 2 * width * width * tokens          # lower and upper bread
        macs += rank * width * tokens              # initial coefficients D^T X
        per_step = (rank * width * tokens          # D^T X
                    + rank * width * rank          # D^T D
                    + rank * rank * tokens         # (D^T D) C
                    + width * tokens * rank        # X C^T
                    + rank * tokens * rank         # C C^T
                    + width * rank * rank)         # D (C C^T)
        macs += cfg.csa.ham_updates * per_step
        macs += width * rank * tokens              # reconstruction D C
        return macs + width * tokens               # class conv
    if variant == CsaVariant.MLP_CONCAT_MLP:
        widths = selected_channels(cfg)
        common = max(widths)
        return sum(w * common * tokens for w in widths) + len(widths) * common * tokens
    last = cfg.stages[-1].channels
    return last * last * tokens + last * tokens


def count_flops(cfg: ModelConfig) -> Tuple[int, int]:
    """(spatial, token) multiply-accumulates per image."""
    height, width = cfg.image_size
    tokens = cfg.num_labels
    spatial = token = 0
    previous = cfg.input_channels
    for stage in cfg.stages:
        area = (height >> stage.index) * (width >> stage.index)
        spatial += area * stage.channels * previous * 9   # patch embed / down: stride-2 3x3
        if stage.index == 1:
            if cfg.embedding_kind == EmbeddingKind.ONE_HOT_PROJECTED:
                token += cfg.linguistic_channels * cfg.num_labels * tokens
            token += cfg.linguistic_channels * stage.channels * tokens
        else:
            token += previous * stage.channels * tokens   # unify
        for _ in range(stage.num_blocks):
            s, t = _block_macs(stage.channels, area, tokens, stage.ivla)
            spatial += s
            token += t
        previous = stage.channels
    token += _head_macs(cfg)
    return spatial, token


def count_params_flops(cfg: ModelConfig) -> CostReport:
    spatial, token = count_flops(cfg)
    return CostReport(
        params=count_parameters(cfg),
        flops_per_image=spatial + token,
        spatial_flops=spatial,
        token_flops=token,
        image_size=list(cfg.image_size),
        num_labels=cfg.num_labels,
    )
