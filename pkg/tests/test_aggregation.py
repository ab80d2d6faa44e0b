import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from hsvlt.core.config import CsaVariant, desk_preset, full_preset, with_overrides
from hsvlt.core.errors import NonNegativeError, ShapeError
from hsvlt.core.rng import Rng
from hsvlt.core.tensor import Tensor
from hsvlt.models.aggregation import (
    CrossScaleAggregation,
    Hamburger,
    csa_classify,
    hamburger,
    init_bases,
    nmf_step,
    select_features,
    selected_channels,
)
from hsvlt.models.hsvlt import build_model, model_forward


def _error(x, d, c):
    return np.linalg.norm(x - d @ c)


def _stage_features(model_cfg, seed=0, batch=1):
    rng = Rng(seed)
    s = [Tensor(rng.normal(1.0, (batch, st.channels, model_cfg.num_labels))) for st in model_cfg.stages]
    l = [Tensor(rng.normal(1.0, (batch, st.channels, model_cfg.num_labels))) for st in model_cfg.stages]
    return s, l


def _reference_hamburger(x, params, rank, updates, seed):
    """Dense numpy hamburger with the same bases and update order."""
    z = np.logaddexp(0.0, np.einsum("oc,bcn->bon", params["lower_bread.weight"], x)
                     + params["lower_bread.bias"][None, :, None])
    d = np.broadcast_to(init_bases(x.shape[1], rank, seed), (x.shape[0], x.shape[1], rank)).copy()
    logits = np.swapaxes(d, -1, -2) @ z
    c = np.exp(logits - logits.max(axis=1, keepdims=True))
    c /= c.sum(axis=1, keepdims=True)
    for _ in range(updates):
        dt = np.swapaxes(d, -1, -2)
        c = c * (dt @ z) / (dt @ d @ c + 1e-6)
        ct = np.swapaxes(c, -1, -2)
        d = d * (z @ ct) / (d @ (c @ ct) + 1e-6)
    up = np.einsum("oc,bcn->bon", params["upper_bread.weight"], d @ c) + params["upper_bread.bias"][None, :, None]
    return x + up


def test_nmf_keeps_factors_non_negative_and_error_non_increasing():
    rng = Rng(0)
    for _ in range(100):
        x = rng.uniform(0.5, 1.5, (10, 8))
        d = rng.uniform(0.5, 1.5, (10, 3))
        c = rng.uniform(0.5, 1.5, (3, 8))
        previous = _error(x, d, c)
        dt, ct = Tensor(d), Tensor(c)
        for _ in range(10):
            dt, ct = nmf_step(Tensor(x), dt, ct)
            assert dt.data.min() >= 0.0 and ct.data.min() >= 0.0
            current = _error(x, dt.data, ct.data)
            assert current <= previous * (1.0 + 1e-12) + 1e-12
            previous = current


def test_nmf_recovers_rank_one_matrix():
    rng = Rng(1)
    x = np.outer(rng.uniform(0.5, 2.0, 6), rng.uniform(0.5, 2.0, 5))
    d, c = Tensor(rng.uniform(0.5, 1.5, (6, 1))), Tensor(rng.uniform(0.5, 1.5, (1, 5)))
    for _ in range(50):
        d, c = nmf_step(Tensor(x), d, c)
    assert _error(x, d.data, c.data) / np.linalg.norm(x) < 1e-3


def test_nmf_rejects_negative_input():
    with pytest.raises(NonNegativeError):
        nmf_step(Tensor(-np.ones((3, 2))), Tensor(np.ones((3, 1))), Tensor(np.ones((1, 2))))


def test_nmf_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        nmf_step(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 1))), Tensor(np.ones((1, 2))))


def test_init_bases_are_positive_unit_columns_and_seeded():
    bases = init_bases(12, 4, seed=7)
    assert bases.min() > 0.0
    assert_allclose(np.linalg.norm(bases, axis=0), np.ones(4), rtol=1e-12)
    assert_array_equal(bases, init_bases(12, 4, seed=7))
    assert not np.array_equal(bases, init_bases(12, 4, seed=8))


def test_hamburger_with_zero_upper_bread_is_identity():
    x = Tensor(Rng(2).normal(1.0, (2, 6, 5)))
    assert_array_equal(hamburger(x, Hamburger(6, 2, 3)).data, x.data)


def test_hamburger_matches_dense_reference():
    module = Hamburger(6, 3, 4, seed=2, rng=Rng(3))
    x = Rng(4).normal(1.0, (2, 6, 5))
    params = dict(module.named_parameters())
    params = {name: p.data for name, p in params.items()}
    assert_allclose(hamburger(Tensor(x), module).data, _reference_hamburger(x, params, 3, 4, seed=2), atol=1e-9)


def test_full_size_head_shapes():
    cfg = full_preset().model
    assert sum(selected_channels(cfg)) == 1440
    module = CrossScaleAggregation(cfg, Rng(5))
    assert module.classifier.weight.shape == (1, 1440)
    s = [Tensor(np.ones((1, st.channels, 80)) * 0.1) for st in cfg.stages]
    assert csa_classify(s, s, module).shape == (1, 80)


@pytest.mark.parametrize("variant", [v.value for v in CsaVariant])
def test_every_variant_returns_logits(variant):
    cfg = with_overrides(desk_preset(), csa_variant=variant).model
    s, l = _stage_features(cfg, seed=6, batch=2)
    logits = csa_classify(s, l, CrossScaleAggregation(cfg, Rng(7)))
    assert logits.shape == (2, cfg.num_labels)
    assert np.isfinite(logits.data).all()


def test_concat_head_matches_dense_reference():
    cfg = desk_preset().model
    for seed in range(50):
        _check_concat_head(cfg, seed)


def _check_concat_head(cfg, seed):
    module = CrossScaleAggregation(cfg, Rng(seed).child("init"))
    s, l = _stage_features(cfg, seed=seed)
    params = {name[len("hamburger."):]: p.data for name, p in module.named_parameters()
              if name.startswith("hamburger.")}
    x = np.concatenate([t.data for t in s], axis=1)
    mixed = _reference_hamburger(x, params, cfg.csa.ham_latent_rank, cfg.csa.ham_updates, seed=cfg.seed)
    expected = np.einsum("oc,bcn->bon", module.classifier.weight.data, mixed)[:, 0, :] + module.classifier.bias.data[0]
    assert_allclose(csa_classify(s, l, module).data, expected, atol=1e-9)


def test_single_stage_selection_aggregates_stage_four_only():
    cfg = with_overrides(desk_preset(), csa_stages="4").model
    module = CrossScaleAggregation(cfg, Rng(10))
    s, l = _stage_features(cfg, seed=11)
    direct = module.classifier(module.hamburger(s[3]))
    assert_array_equal(csa_classify(s, l, module).data, direct.data[:, 0, :])


def test_select_features_orders_s_before_l_per_stage():
    s = [Tensor(np.full((1, 2, 3), float(i))) for i in range(4)]
    l = [Tensor(np.full((1, 2, 3), 10.0 + i)) for i in range(4)]
    chosen = select_features(s, l, [2, 4], "S_and_L")
    assert [t.data[0, 0, 0] for t in chosen] == [1.0, 11.0, 3.0, 13.0]
    assert [t.data[0, 0, 0] for t in select_features(s, l, [1], "L")] == [10.0]


def test_disabled_aggregation_falls_back_to_stage_four_head():
    cfg = with_overrides(desk_preset(), csa_enabled=False).model
    module = CrossScaleAggregation(cfg, Rng(12))
    assert module.variant == CsaVariant.S4_HEAD_MLP
    assert not hasattr(module, "hamburger")
    s, l = _stage_features(cfg, seed=13)
    assert csa_classify(s, l, module).shape == (1, cfg.num_labels)

    disabled = build_model(with_overrides(desk_preset(), csa_enabled=False).model)
    baseline = build_model(with_overrides(desk_preset(), csa_variant="s4_head_mlp").model)
    images = Rng(15).normal(1.0, (2, 3, 32, 32))
    assert_array_equal(model_forward(images, disabled).data, model_forward(images, baseline).data)


def test_model_forward_scores_images_independently_in_eval_mode():
    cfg = desk_preset().model
    model = build_model(cfg).eval()
    images = Rng(14).normal(1.0, (3, 3, 32, 32))
    logits = model_forward(images, model)
    assert logits.shape == (3, cfg.num_labels)
    assert_array_equal(model(Tensor(images)).data, logits.data)
    single = np.concatenate([model_forward(images[i:i + 1], model).data for i in range(3)])
    assert_allclose(single, logits.data, atol=1e-12)
