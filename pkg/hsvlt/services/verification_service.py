"""
Verification Service - gradient-check campaigns

Each campaign builds small instances in float64, redraws their parameters
with a wide spread (the training init is too small to give well-conditioned
finite differences), reduces the outputs with fixed random weights to a
scalar, and compares analytic and central-difference gradients.
"""
import logging
from typing import Callable, Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from hsvlt.core import ops
from hsvlt.core.config import (
    CsaConfig,
    CsaFeatures,
    CsaVariant,
    IvlaConfig,
    ModelConfig,
    StageConfig,
    build_stages,
)
from hsvlt.core.errors import ConfigError, GradientCheckError
from hsvlt.core.gradcheck import grad_check, grad_check_parameters
from hsvlt.core.nn import Module
from hsvlt.core.rng import Rng
from hsvlt.core.tensor import Tensor, precision
from hsvlt.models.aggregation import CrossScaleAggregation
from hsvlt.models.encoder import Encoder, InteractionBlock
from hsvlt.models.hsvlt import HsvltModel, model_forward
from hsvlt.models.ivla import Ivla, ivla_forward
from hsvlt.schemas import GradCheckReport
from hsvlt.services.training_service import bce_loss

logger = logging.getLogger(__name__)

CAMPAIGNS = ("primitives", "ivla", "encoder", "csa", "loss", "model")
TOLERANCES = {"primitives": 1e-4, "ivla": 1e-4, "encoder": 1e-3, "csa": 1e-3, "loss": 1e-6, "model": 1e-3}
STEP = 1e-5
ATOL = 1e-9
PARAM_STD = 0.5

IVLA_TOGGLES = {
    "none": (False, False, False, False),
    "G-Conv": (True, False, False, False),
    "G-Conv+L-Act": (True, True, False, False),
    "G-Conv+L-Act+V-Gate": (True, True, True, False),
    "G-Conv+L-Act+L-Gate": (True, True, False, True),
    "all": (True, True, True, True),
}


def tiny_model_config(seed: int = 0, variant: CsaVariant = CsaVariant.CONCAT_HEAD_MLP,
                      features: CsaFeatures = CsaFeatures.S) -> ModelConfig:
    return ModelConfig(
        image_size=(32, 32),
        num_labels=3,
        linguistic_channels=4,
        stages=build_stages((1, 1, 1, 1), (4, 6, 8, 10), gconv_kernel=3),
        csa=CsaConfig(variant=variant, features=features, ham_latent_rank=2, ham_updates=3),
        seed=seed,
    )


def randomize_parameters(module: Module, rng: Rng, std: float = PARAM_STD) -> None:
    """Norm scales near 1, everything else N(0, std)."""
    for name, param in module.named_parameters():
        if name.endswith("gamma"):
            param.data = 1.0 + rng.normal(0.1, param.shape)
        else:
            param.data = rng.normal(std, param.shape)


def weighted_sum(outputs: Sequence[Tensor], rng: Rng) -> Callable[[Sequence[Tensor]], Tensor]:
    """Fixed random weights for each output shape; returns the reducer."""
    weights = [rng.normal(1.0, out.shape) for out in outputs]

    def reduce(values: Sequence[Tensor]) -> Tensor:
        total = None
        for value, w in zip(values, weights):
            term = ops.sum(value * Tensor(w))
            total = term if total is None else total + term
        return total

    return reduce


def _input(rng: Rng, shape, kind: str = "normal") -> Tensor:
    values = rng.normal(1.0, shape)
    if kind == "positive":
        values = 0.5 + np.abs(values)
    elif kind == "away_from_zero":
        values = np.sign(values) * (0.2 + np.abs(values))
    return Tensor(values)


def _check_unary(name: str, fn: Callable[[Tensor], Tensor], x: Tensor, rng: Rng, tol: float) -> GradCheckReport:
    reduce = weighted_sum([fn(x)], rng)
    return grad_check(lambda t: reduce([fn(t)]), x, step=STEP, tol=tol, rng=rng, name=name, atol=ATOL)


def primitive_campaign(rng: Rng, tol: float) -> List[GradCheckReport]:
    a = _input(rng, (3, 4))
    batch = _input(rng, (2, 3, 4))
    right = _input(rng, (4, 5))
    kernel = _input(rng, (4, 2, 3, 3))
    image = _input(rng, (2, 4, 6, 6))
    gamma, beta = _input(rng, (4,)), _input(rng, (4,))
    fixed = _input(rng, (2, 2))
    cases: List[Tuple[str, Callable[[Tensor], Tensor], Tensor]] = [
        ("add_broadcast", lambda t: a + t, _input(rng, (1, 4))),
        ("mul_broadcast", lambda t: a * t, _input(rng, (3, 1))),
        ("sub", lambda t: a - t * t, _input(rng, (3, 4))),
        ("div", lambda t: a / t, _input(rng, (3, 4), "positive")),
        ("power", lambda t: ops.power(t, 1.7), _input(rng, (3, 4), "positive")),
        ("exp", ops.exp, _input(rng, (3, 4))),
        ("log", ops.log, _input(rng, (3, 4), "positive")),
        ("matmul_left", lambda t: ops.matmul(t, right), _input(rng, (2, 3, 4))),
        ("matmul_right", lambda t: ops.matmul(batch, t), _input(rng, (4, 5))),
        ("conv2d_input", lambda t: ops.conv2d(t, kernel, stride=2, padding=1, groups=2), _input(rng, (2, 4, 6, 6))),
        ("conv2d_weight", lambda t: ops.conv2d(image, t, stride=1, padding=1, groups=2), _input(rng, (4, 2, 3, 3))),
        ("softmax_spatial", lambda t: ops.softmax(t, axis=1), _input(rng, (2, 5, 3))),
        ("softmax_label", lambda t: ops.softmax(t, axis=2), _input(rng, (2, 5, 3))),
        ("layer_norm", lambda t: ops.normalize(t, "layer", gamma=gamma, beta=beta), _input(rng, (2, 4, 3, 3))),
        ("instance_norm", lambda t: ops.normalize(t, "instance"), _input(rng, (2, 4, 3, 3))),
        ("batch_norm", lambda t: ops.normalize(t, "batch", gamma=gamma, beta=beta), _input(rng, (2, 4, 3, 3))),
        ("relu", ops.relu, _input(rng, (3, 4), "away_from_zero")),
        ("tanh", ops.tanh, _input(rng, (3, 4))),
        ("gelu", ops.gelu, _input(rng, (3, 4))),
        ("sigmoid", ops.sigmoid, _input(rng, (3, 4))),
        ("softplus", ops.softplus, _input(rng, (3, 4))),
        ("index_select", lambda t: ops.index_select(t, [3, 0, 3], axis=0), _input(rng, (4, 5))),
        ("concat", lambda t: ops.concat([t, fixed], axis=1), _input(rng, (2, 3))),
        ("broadcast_to", lambda t: ops.broadcast_to(t, (2, 3, 4)), _input(rng, (1, 3, 1))),
        ("reshape_transpose", lambda t: ops.transpose(ops.reshape(t, (4, 3)), (1, 0)), _input(rng, (3, 4))),
        ("mean", lambda t: ops.mean(t * t, axis=1), _input(rng, (3, 4))),
        ("spatial_roundtrip", lambda t: ops.unflatten_spatial(ops.flatten_spatial(t) * 2.0, 3, 2),
         _input(rng, (2, 2, 3, 2))),
    ]
    return [_check_unary(name, fn, x, rng, tol) for name, fn, x in cases]


def _module_check(name: str, module: Module, inputs: Dict[str, Tensor], forward, rng: Rng, tol: float,
                  max_coords: int) -> GradCheckReport:
    randomize_parameters(module, rng)
    reduce = weighted_sum(forward(), rng)
    targets = list(inputs.items()) + list(module.named_parameters())
    return grad_check_parameters(lambda: reduce(forward()), targets, step=STEP, tol=tol, max_coords=max_coords,
                                 rng=rng, name=name, atol=ATOL)


def ivla_campaign(rng: Rng, tol: float) -> List[GradCheckReport]:
    reports = []
    channels = 4
    for label, (gconv, l_act, v_gate, l_gate) in IVLA_TOGGLES.items():
        cfg = IvlaConfig(channels=channels, gconv_kernel=3, use_gconv=gconv, use_l_act=l_act,
                         use_v_gate=v_gate, use_l_gate=l_gate)
        ivla = Ivla(cfg, rng.child(label))
        v, l = _input(rng, (2, channels, 4, 4)), _input(rng, (2, channels, 3))

        def forward(ivla=ivla, v=v, l=l):
            v2, l2, _ = ivla_forward(v, l, ivla)
            return [v2, l2]

        reports.append(_module_check(f"ivla[{label}]", ivla, {"V1": v, "L1": l}, forward, rng, tol, 3))

    stage = StageConfig(index=1, num_blocks=1, channels=channels,
                        ivla=IvlaConfig(channels=channels, gconv_kernel=3))
    block = InteractionBlock(stage, rng.child("block"))
    v, l = _input(rng, (2, channels, 4, 4)), _input(rng, (2, channels, 3))
    reports.append(_module_check("interaction_block", block, {"V0": v, "L0": l},
                                 lambda: list(block(v, l)), rng, tol, 3))
    return reports


def encoder_campaign(rng: Rng, tol: float) -> List[GradCheckReport]:
    cfg = tiny_model_config()
    encoder = Encoder(cfg, rng.child("encoder"))
    image = _input(rng, (2, 3, 32, 32))

    def forward():
        out = encoder.encode(image)
        return out.S + [out.L4]

    return [_module_check("encoder_forward", encoder, {"image": image}, forward, rng, tol, 2)]


def csa_campaign(rng: Rng, tol: float) -> List[GradCheckReport]:
    reports = []
    for variant in CsaVariant:
        cfg = tiny_model_config(variant=variant, features=CsaFeatures.S_AND_L)
        head = CrossScaleAggregation(cfg, rng.child(variant.value))
        tokens = cfg.num_labels
        s = [_input(rng, (2, c, tokens)) for c in cfg.channels]
        l = [_input(rng, (2, c, tokens)) for c in cfg.channels]
        inputs = {f"S{i + 1}": t for i, t in enumerate(s)}
        inputs.update({f"L{i + 1}": t for i, t in enumerate(l)})
        reports.append(_module_check(f"csa[{variant.value}]", head, inputs,
                                     lambda head=head, s=s, l=l: [head(s, l)], rng, tol, 3))
    return reports


def loss_campaign(rng: Rng, tol: float) -> List[GradCheckReport]:
    logits = Tensor(rng.normal(2.0, (4, 5)))
    truths = (rng.random((4, 5)) < 0.4).astype(np.int64)
    return [grad_check(lambda t: bce_loss(t, truths), logits, step=STEP, tol=tol, rng=rng, name="bce_loss")]


def model_campaign(rng: Rng, tol: float) -> List[GradCheckReport]:
    cfg = tiny_model_config()
    model = HsvltModel(cfg, rng.child("model"))
    randomize_parameters(model, rng)
    images = _input(rng, (2, 3, 32, 32))
    truths = (rng.random((2, cfg.num_labels)) < 0.5).astype(np.int64)
    return [grad_check_parameters(lambda: bce_loss(model_forward(images, model), truths),
                                  list(model.named_parameters()), step=STEP, tol=tol, max_coords=2, rng=rng,
                                  name="model_forward+bce_loss", atol=ATOL)]


_RUNNERS = {
    "primitives": primitive_campaign,
    "ivla": ivla_campaign,
    "encoder": encoder_campaign,
    "csa": csa_campaign,
    "loss": loss_campaign,
    "model": model_campaign,
}


class VerificationService:
    """Service for gradient-check campaigns"""

    @staticmethod
    def run(module: str = "all", seeds: Union[int, Iterable[int]] = 1) -> List[GradCheckReport]:
        """
        Run one campaign (or all) on each seed.

        Args:
            module: all | primitives | ivla | encoder | csa | loss | model
            seeds: a count (seeds 0..n-1) or explicit seeds

        Returns:
            One report per checked function and seed
        """
        names = CAMPAIGNS if module == "all" else (module,)
        unknown = [n for n in names if n not in _RUNNERS]
        if unknown:
            raise ConfigError(f"unknown gradcheck module {module!r}; expected all or one of {list(CAMPAIGNS)}")
        seeds = range(seeds) if isinstance(seeds, int) else list(seeds)

        reports: List[GradCheckReport] = []
        with precision("float64"):
            for seed in seeds:
                for name in names:
                    rng = Rng(seed).child(f"gradcheck.{name}")
                    for report in _RUNNERS[name](rng, TOLERANCES[name]):
                        report.name = f"{report.name}[seed={seed}]"
                        reports.append(report)
                        status = "✅" if report.passed else "❌"
                        logger.info(f"{status} {report.name} max_rel_err={report.max_rel_err:.2e}")
        return reports

    @staticmethod
    def require_all(reports: Sequence[GradCheckReport]) -> None:
        failed = [r for r in reports if not r.passed]
        if failed:
            worst = max(failed, key=lambda r: r.max_rel_err)
            raise GradientCheckError(
                f"{len(failed)}/{len(reports)} checks failed; worst {worst.name} "
                f"max_rel_err={worst.max_rel_err:.3e} at {worst.worst}"
            )


# Global instance
verification_service = VerificationService()
