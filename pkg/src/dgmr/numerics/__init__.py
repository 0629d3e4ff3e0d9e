from . import gradcheck, layers, tape
from .gradcheck import GradCheckReport, grad_check
from .layers import (
    LayerParams,
    NormParams,
    collect_params,
    cross_attention,
    dense,
    init_layer,
    init_norm,
    layer_from_arrays,
    layer_norm,
    named_params,
    xavier_uniform,
)
from .tape import Var, backward, constant, param, wrap, zero_grads

__all__ = [
    "tape",
    "layers",
    "gradcheck",
    "Var",
    "backward",
    "constant",
    "param",
    "wrap",
    "zero_grads",
    "LayerParams",
    "NormParams",
    "collect_params",
    "cross_attention",
    "dense",
    "init_layer",
    "init_norm",
    "layer_from_arrays",
    "layer_norm",
    "named_params",
    "xavier_uniform",
    "grad_check",
    "GradCheckReport",
]
