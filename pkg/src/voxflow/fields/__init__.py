"""Velocity fields: guidance, analytic oracles and the toy attention network."""

from .analytic import AffineField, ConstantField, LinearField, TimePolyField, make_analytic_field
from .base import (
    ConditionInput,
    GuidanceConfig,
    VelocityField,
    cfg_combine,
    eval_velocity,
    guided_evaluations,
    guided_velocity,
    using_hook,
)
from .toy import AttentionHook, ToyConfig, ToyTransformer, make_toy_transformer

__all__ = [
    "AffineField",
    "AttentionHook",
    "ConditionInput",
    "ConstantField",
    "GuidanceConfig",
    "LinearField",
    "TimePolyField",
    "ToyConfig",
    "ToyTransformer",
    "VelocityField",
    "cfg_combine",
    "eval_velocity",
    "guided_evaluations",
    "guided_velocity",
    "make_analytic_field",
    "make_toy_transformer",
    "using_hook",
]
