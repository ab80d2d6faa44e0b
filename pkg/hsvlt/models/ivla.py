"""
Interactive visual-linguistic attention.

A shared cross-modal activation Att (B, H*W, T) scores every spatial position
against every label token. Softmax over positions lets each label pool visual
features (linguistic fusion); softmax over labels lets each position pool
label embeddings (visual fusion). Gated residuals merge both cross features
back into their streams.
"""
import math
from typing import Optional, Tuple

import numpy as np

from hsvlt.core import ops
from hsvlt.core.config import IvlaConfig
from hsvlt.core.errors import ShapeError
from hsvlt.core.nn import Conv2d, Module, Pointwise, child_rng
from hsvlt.core.rng import Rng
from hsvlt.core.tensor import Tensor

SPATIAL_AXIS = 1
LABEL_AXIS = 2


class VisualProjection(Module):
    """omega_v: bias-free 1x1 conv followed by instance norm without affine."""

    def __init__(self, channels: int, rng: Optional[Rng] = None):
        super().__init__()
        self.proj = Pointwise(channels, channels, child_rng(rng, "proj"), bias=False)

    def forward(self, v: Tensor) -> Tensor:
        return ops.normalize(self.proj(v), "instance")


class Gate(Module):
    """tanh(conv_b(relu(conv_a(x)))), bounded in (-1, 1)."""

    def __init__(self, channels: int, rng: Optional[Rng] = None):
        super().__init__()
        self.conv_a = Pointwise(channels, channels, child_rng(rng, "conv_a"))
        self.conv_b = Pointwise(channels, channels, child_rng(rng, "conv_b"))

    def forward(self, x: Tensor) -> Tensor:
        return ops.tanh(self.conv_b(ops.relu(self.conv_a(x))))


def _check_pair(v: Tensor, l: Tensor) -> None:
    if v.ndim != 4 or l.ndim != 3:
        raise ShapeError(f"expected visual (B, C, H, W) and linguistic (B, C, T), got {v.shape} and {l.shape}")
    if v.shape[0] != l.shape[0] or v.shape[1] != l.shape[1]:
        raise ShapeError(f"visual {v.shape} and linguistic {l.shape} must share batch and channel sizes")


def cross_modal_attention(v: Tensor, l: Tensor, omega_v1: VisualProjection, omega_l1: Pointwise) -> Tensor:
    """Att = flatten(omega_v1(V))^T omega_l1(L) / sqrt(C), shape (B, H*W, T)."""
    _check_pair(v, l)
    channels = v.shape[1]
    visual = ops.flatten_spatial(omega_v1(v))
    return ops.matmul(ops.transpose_last2(visual), omega_l1(l)) / math.sqrt(channels)


def interactive_linguistic_fusion(v: Tensor, l: Tensor, att: Tensor, omega_v2: VisualProjection,
                                  omega_l3: Optional[Pointwise] = None) -> Tensor:
    """L_cross = omega_l3(L) * (flatten(omega_v2(V)) @ softmax_spatial(Att)); plain pooling without omega_l3."""
    _check_pair(v, l)
    pooled = ops.matmul(ops.flatten_spatial(omega_v2(v)), ops.softmax(att, axis=SPATIAL_AXIS))
    if omega_l3 is None:
        return pooled
    return omega_l3(l) * pooled


def interactive_visual_fusion(v: Tensor, l: Tensor, att: Tensor, omega_l2: Pointwise,
                              gconv: Optional[Conv2d] = None) -> Tensor:
    """V_cross = GELU(dwconv(V)) + unflatten((softmax_label(Att) @ omega_l2(L)^T)^T)."""
    _check_pair(v, l)
    height, width = v.shape[2:]
    spread = ops.matmul(ops.softmax(att, axis=LABEL_AXIS), ops.transpose_last2(omega_l2(l)))
    v_cross = ops.unflatten_spatial(ops.transpose_last2(spread), height, width)
    if gconv is not None:
        v_cross = ops.gelu(gconv(v)) + v_cross
    return v_cross


def gate_regulation(x1: Tensor, x_cross: Tensor, gate: Optional[Gate] = None) -> Tensor:
    if x1.shape != x_cross.shape:
        raise ShapeError(f"gate regulation needs equal shapes, got {x1.shape} and {x_cross.shape}")
    if gate is None:
        return x1 + x_cross
    return x1 + x_cross * gate(x_cross)


class Ivla(Module):
    """Holds only the parameters its enabled toggles use."""

    def __init__(self, cfg: IvlaConfig, rng: Optional[Rng] = None):
        super().__init__()
        self.cfg = cfg
        channels = cfg.channels
        self.omega_v1 = VisualProjection(channels, child_rng(rng, "omega_v1"))
        self.omega_l1 = Pointwise(channels, channels, child_rng(rng, "omega_l1"))
        self.omega_v2 = VisualProjection(channels, child_rng(rng, "omega_v2"))
        self.omega_l2 = Pointwise(channels, channels, child_rng(rng, "omega_l2"))
        if cfg.use_l_act:
            self.omega_l3 = Pointwise(channels, channels, child_rng(rng, "omega_l3"))
        if cfg.use_gconv:
            kernel = cfg.gconv_kernel
            self.gconv = Conv2d(channels, channels, kernel, padding=(kernel - 1) // 2, groups=channels,
                                rng=child_rng(rng, "gconv"))
        if cfg.use_v_gate:
            self.v_gate = Gate(channels, child_rng(rng, "v_gate"))
        if cfg.use_l_gate:
            self.l_gate = Gate(channels, child_rng(rng, "l_gate"))
        self.capture_attention = False
        self.last_attention: Optional[np.ndarray] = None

    def forward(self, v1: Tensor, l1: Tensor) -> Tuple[Tensor, Tensor]:
        v2, l2, att = ivla_forward(v1, l1, self)
        if self.capture_attention:
            self.last_attention = att.data.copy()
        return v2, l2


def ivla_forward(v1: Tensor, l1: Tensor, ivla: Ivla) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns (V2, L2, Att)."""
    if v1.shape[1] != ivla.cfg.channels:
        raise ShapeError(f"IVLA configured for {ivla.cfg.channels} channels, got visual {v1.shape}")
    att = cross_modal_attention(v1, l1, ivla.omega_v1, ivla.omega_l1)
    v_cross = interactive_visual_fusion(v1, l1, att, ivla.omega_l2, getattr(ivla, "gconv", None))
    l_cross = interactive_linguistic_fusion(v1, l1, att, ivla.omega_v2, getattr(ivla, "omega_l3", None))
    v2 = gate_regulation(v1, v_cross, getattr(ivla, "v_gate", None))
    l2 = gate_regulation(l1, l_cross, getattr(ivla, "l_gate", None))
    return v2, l2, att
