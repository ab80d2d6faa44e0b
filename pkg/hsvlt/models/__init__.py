"""
Model blocks: IVLA, the four-stage encoder, cross-scale aggregation and the full classifier
"""

from .ivla import Ivla, ivla_forward
from .encoder import Encoder, EncoderOutput, encoder_forward, interaction_block
from .aggregation import CrossScaleAggregation, csa_classify, hamburger, nmf_step
from .hsvlt import HsvltModel, build_model, model_forward
from .counting import count_params_flops

__all__ = [
    "Ivla",
    "ivla_forward",
    "Encoder",
    "EncoderOutput",
    "encoder_forward",
    "interaction_block",
    "CrossScaleAggregation",
    "csa_classify",
    "hamburger",
    "nmf_step",
    "HsvltModel",
    "build_model",
    "model_forward",
    "count_params_flops"
]
