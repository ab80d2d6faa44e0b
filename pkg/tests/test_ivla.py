import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import special

from hsvlt.core import ops
from hsvlt.core.config import IvlaConfig, StageConfig
from hsvlt.core.errors import ShapeError
from hsvlt.core.nn import Pointwise
from hsvlt.core.rng import Rng
from hsvlt.core.tensor import Tensor
from hsvlt.models.encoder import InteractionBlock, interaction_block
from hsvlt.models.ivla import (
    Gate,
    Ivla,
    VisualProjection,
    cross_modal_attention,
    gate_regulation,
    interactive_linguistic_fusion,
    interactive_visual_fusion,
    ivla_forward,
)
from hsvlt.services.verification_service import IVLA_TOGGLES, randomize_parameters

EPS = 1e-5


def _ivla_cfg(channels=4, kernel=3, toggles=(True, True, True, True)):
    gconv, l_act, v_gate, l_gate = toggles
    return IvlaConfig(channels=channels, gconv_kernel=kernel, use_gconv=gconv, use_l_act=l_act,
                      use_v_gate=v_gate, use_l_gate=l_gate)


# dense single-routine references

def _inorm(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + EPS)


def _softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _pw(p, prefix, x):
    out = np.einsum("oc,bcn->bon", p[f"{prefix}.weight"], x)
    if f"{prefix}.bias" in p:
        out = out + p[f"{prefix}.bias"][None, :, None]
    return out


def _gate(p, prefix, x):
    hidden = np.maximum(_pw(p, f"{prefix}.conv_a", x), 0.0)
    return np.tanh(_pw(p, f"{prefix}.conv_b", hidden))


def _depthwise(x, w, b):
    k = w.shape[-1]
    pad = (k - 1) // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros_like(x)
    height, width = x.shape[2:]
    for di in range(k):
        for dj in range(k):
            out += padded[:, :, di:di + height, dj:dj + width] * w[None, :, 0, di, dj, None, None]
    return out + b[None, :, None, None]


def _ivla_reference(v, l, p, cfg):
    batch, channels, height, width = v.shape
    vf = v.reshape(batch, channels, height * width)
    att = np.einsum("bcn,bct->bnt", _inorm(_pw(p, "omega_v1.proj", vf)), _pw(p, "omega_l1", l)) / math.sqrt(channels)
    pooled = np.einsum("bcn,bnt->bct", _inorm(_pw(p, "omega_v2.proj", vf)), _softmax(att, axis=1))
    l_cross = _pw(p, "omega_l3", l) * pooled if cfg.use_l_act else pooled
    spread = np.einsum("bnt,bct->bcn", _softmax(att, axis=2), _pw(p, "omega_l2", l))
    v_cross = spread.reshape(batch, channels, height, width)
    if cfg.use_gconv:
        conv = _depthwise(v, p["gconv.weight"], p["gconv.bias"])
        v_cross = conv * special.ndtr(conv) + v_cross
    if cfg.use_v_gate:
        vc = v_cross.reshape(batch, channels, -1)
        v2 = v + (vc * _gate(p, "v_gate", vc)).reshape(v.shape)
    else:
        v2 = v + v_cross
    l2 = l + l_cross * _gate(p, "l_gate", l_cross) if cfg.use_l_gate else l + l_cross
    return v2, l2, att


def _params(module):
    return {name: param.data for name, param in module.named_parameters()}


def test_attention_shape_and_null_projection():
    rng = Rng(0)
    v, l = Tensor(rng.normal(1.0, (1, 2, 2, 2))), Tensor(rng.normal(1.0, (1, 2, 3)))
    att = cross_modal_attention(v, l, VisualProjection(2), Pointwise(2, 2))
    assert att.shape == (1, 4, 3)
    assert_array_equal(att.data, np.zeros((1, 4, 3)))


def test_attention_with_identity_projections():
    rng = Rng(1)
    v, l = rng.normal(1.0, (1, 2, 2, 2)), rng.normal(1.0, (1, 2, 2))
    omega_v1, omega_l1 = VisualProjection(2), Pointwise(2, 2)
    omega_v1.proj.weight.data = np.eye(2)
    omega_l1.weight.data = np.eye(2)
    att = cross_modal_attention(Tensor(v), Tensor(l), omega_v1, omega_l1)
    expected = np.einsum("bcn,bct->bnt", _inorm(v.reshape(1, 2, 4)), l) / math.sqrt(2)
    assert_allclose(att.data, expected, atol=1e-12)


def test_linguistic_fusion_special_cases():
    rng = Rng(2)
    v, l = Tensor(rng.normal(1.0, (1, 3, 2, 2))), Tensor(rng.normal(1.0, (1, 3, 2)))
    omega_v2 = VisualProjection(3, rng.child("v2"))
    zeros = Tensor(np.zeros((1, 4, 2)))
    pooled = interactive_linguistic_fusion(v, l, zeros, omega_v2)
    spatial_mean = ops.flatten_spatial(omega_v2(v)).data.mean(axis=2, keepdims=True)
    assert_allclose(pooled.data, np.broadcast_to(spatial_mean, (1, 3, 2)), atol=1e-12)

    att = Tensor(rng.normal(1.0, (1, 4, 2)))
    omega_l3 = Pointwise(3, 3)
    omega_l3.bias.data = np.ones(3)
    assert_allclose(interactive_linguistic_fusion(v, l, att, omega_v2, omega_l3).data,
                    interactive_linguistic_fusion(v, l, att, omega_v2).data, rtol=1e-15)


def test_visual_fusion_special_cases():
    rng = Rng(3)
    v = Tensor(rng.normal(1.0, (1, 3, 2, 2)))
    l3 = Tensor(rng.normal(1.0, (1, 3, 3)))
    att3 = Tensor(rng.normal(1.0, (1, 4, 3)))
    assert_array_equal(interactive_visual_fusion(v, l3, att3, Pointwise(3, 3)).data, np.zeros((1, 3, 2, 2)))

    l1 = Tensor(rng.normal(1.0, (1, 3, 1)))
    omega_l2 = Pointwise(3, 3, rng.child("l2"))
    out = interactive_visual_fusion(v, l1, Tensor(rng.normal(1.0, (1, 4, 1))), omega_l2)
    projected = omega_l2(l1).data[0, :, 0]
    assert_allclose(out.data[0], np.broadcast_to(projected[:, None, None], (3, 2, 2)), rtol=1e-15)


def test_gate_examples():
    gate = Gate(1)
    assert_array_equal(gate(Tensor(Rng(4).normal(1.0, (1, 1, 5)))).data, np.zeros((1, 1, 5)))
    gate.conv_a.weight.data = np.array([[1.0]])
    gate.conv_b.weight.data = np.array([[2.0]])
    assert gate(Tensor([[[0.5]]])).item() == pytest.approx(0.761594, abs=1e-6)

    wide = Gate(4, Rng(5))
    randomize_parameters(wide, Rng(6))
    out = wide(Tensor(Rng(7).normal(1.0, (2, 4, 6)))).data
    assert np.all(np.abs(out) < 1.0)


def test_gate_regulation_identities():
    rng = Rng(8)
    x1, x_cross = Tensor(rng.normal(1.0, (1, 3, 4))), Tensor(rng.normal(1.0, (1, 3, 4)))
    assert_array_equal(gate_regulation(x1, x_cross, Gate(3)).data, x1.data)
    gate = Gate(3, rng.child("gate"))
    randomize_parameters(gate, rng)
    assert_array_equal(gate_regulation(x1, Tensor(np.zeros((1, 3, 4))), gate).data, x1.data)
    named = {f"g.{k}": val for k, val in _params(gate).items()}
    expected = x1.data + x_cross.data * _gate(named, "g", x_cross.data)
    assert_allclose(gate_regulation(x1, x_cross, gate).data, expected, atol=1e-12)
    with pytest.raises(ShapeError):
        gate_regulation(x1, Tensor(np.zeros((1, 3, 5))), gate)


@pytest.mark.parametrize("toggles", list(IVLA_TOGGLES.values()), ids=list(IVLA_TOGGLES))
def test_zero_parameter_ivla_is_identity(toggles):
    ivla = Ivla(_ivla_cfg(toggles=toggles))
    rng = Rng(9)
    v, l = Tensor(rng.normal(1.0, (2, 4, 4, 4))), Tensor(rng.normal(1.0, (2, 4, 3)))
    v2, l2, _ = ivla_forward(v, l, ivla)
    assert_array_equal(v2.data, v.data)
    assert_array_equal(l2.data, l.data)


def test_ivla_preserves_shapes():
    ivla = Ivla(_ivla_cfg(channels=96, kernel=7), Rng(10))
    v2, l2, att = ivla_forward(Tensor(np.ones((1, 96, 16, 16))), Tensor(np.ones((1, 96, 20))), ivla)
    assert v2.shape == (1, 96, 16, 16)
    assert l2.shape == (1, 96, 20)
    assert att.shape == (1, 256, 20)


@pytest.mark.parametrize("toggles", list(IVLA_TOGGLES.values()), ids=list(IVLA_TOGGLES))
def test_ivla_matches_dense_reference(toggles):
    cfg = _ivla_cfg(toggles=toggles)
    for seed in range(50):
        rng = Rng(seed).child("ivla-reference")
        ivla = Ivla(cfg, rng.child("init"))
        randomize_parameters(ivla, rng)
        v, l = rng.normal(1.0, (2, 4, 4, 4)), rng.normal(1.0, (2, 4, 3))
        v2, l2, att = ivla_forward(Tensor(v), Tensor(l), ivla)
        ref_v2, ref_l2, ref_att = _ivla_reference(v, l, _params(ivla), cfg)
        assert_allclose(att.data, ref_att, atol=1e-10)
        assert_allclose(v2.data, ref_v2, atol=1e-10)
        assert_allclose(l2.data, ref_l2, atol=1e-10)


def test_ivla_rejects_mismatched_streams():
    ivla = Ivla(_ivla_cfg())
    with pytest.raises(ShapeError):
        ivla_forward(Tensor(np.ones((1, 4, 2, 2))), Tensor(np.ones((1, 5, 3))), ivla)


def test_ivla_captures_attention_on_request():
    ivla = Ivla(_ivla_cfg(), Rng(11))
    v, l = Tensor(np.ones((1, 4, 2, 2))), Tensor(np.ones((1, 4, 3)))
    ivla(v, l)
    assert ivla.last_attention is None
    ivla.capture_attention = True
    ivla(v, l)
    assert ivla.last_attention.shape == (1, 4, 3)


def _layer_norm(x):
    return ops.normalize(Tensor(x), "layer").data


def test_interaction_block_with_identity_ivla():
    stage = StageConfig(index=1, num_blocks=1, channels=4,
                        ivla=IvlaConfig(channels=4, gconv_kernel=3, use_gconv=False))
    block = InteractionBlock(stage)
    rng = Rng(12)
    v0, l0 = rng.normal(1.0, (1, 4, 3, 3)), rng.normal(1.0, (1, 4, 5))
    v, l, s = interaction_block(Tensor(v0), Tensor(l0), block)
    assert_allclose(v.data, _layer_norm(v0 + _layer_norm(v0)), atol=1e-12)
    assert_allclose(l.data, _layer_norm(l0 + _layer_norm(l0)), atol=1e-12)
    assert_allclose(s.data, _layer_norm(_layer_norm(l0)), atol=1e-12)
    assert s.shape == (1, 4, 5)


def test_interaction_block_matches_dense_reference():
    cfg = _ivla_cfg()
    stage = StageConfig(index=1, num_blocks=1, channels=4, ivla=cfg)
    for seed in range(50):
        rng = Rng(seed).child("block-reference")
        block = InteractionBlock(stage, rng.child("init"))
        randomize_parameters(block, rng)
        p = _params(block)
        v0, l0 = rng.normal(1.0, (2, 4, 4, 4)), rng.normal(1.0, (2, 4, 3))

        def norm(x, name):
            mu = x.mean(axis=1, keepdims=True)
            var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
            shape = (1, -1) + (1,) * (x.ndim - 2)
            return (x - mu) / np.sqrt(var + EPS) * p[f"{name}.gamma"].reshape(shape) + p[f"{name}.beta"].reshape(shape)

        ivla_params = {k[len("ivla."):]: val for k, val in p.items() if k.startswith("ivla.")}
        v2, l2, _ = _ivla_reference(norm(v0, "norm_v0"), norm(l0, "norm_l0"), ivla_params, cfg)
        v, l, s = interaction_block(Tensor(v0), Tensor(l0), block)
        assert_allclose(v.data, norm(v0 + v2, "norm_v"), atol=1e-10)
        assert_allclose(l.data, norm(l0 + l2, "norm_l"), atol=1e-10)
        assert_allclose(s.data, norm(l2, "norm_s"), atol=1e-10)
