"""Small learned-layer toolkit on top of the tape.

Layers are plain dataclasses of Vars; parameter discovery walks those
dataclasses recursively so optimizers, checkpoints and gradient checks all
share one naming scheme.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tape
from .tape import Var

LAYER_KINDS = ("linear", "linear+sigmoid", "linear+relu")


@dataclass
class LayerParams:
    """One dense layer: y = act(x W^T + b)."""

    weight: Var
    bias: Var
    kind: str = "linear"

    @property
    def n_in(self) -> int:
        return self.weight.value.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.value.shape[0]


def xavier_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-a, a, size=(n_out, n_in))


def init_layer(
    rng: np.random.Generator,
    n_in: int,
    n_out: int,
    kind: str = "linear",
    zero: bool = False,
) -> LayerParams:
    if kind not in LAYER_KINDS:
        raise ValueError("unknown layer kind %r" % kind)
    if n_in <= 0 or n_out <= 0:
        raise ValueError("layer dimensions must be positive")
    if zero:
        w = np.zeros((n_out, n_in))
    else:
        w = xavier_uniform(rng, n_out, n_in)
    return LayerParams(
        weight=tape.param(w),
        bias=tape.param(np.zeros(n_out)),
        kind=kind,
    )


def layer_from_arrays(weight, bias, kind: str = "linear") -> LayerParams:
    if kind not in LAYER_KINDS:
        raise ValueError("unknown layer kind %r" % kind)
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weight.ndim != 2 or bias.shape != (weight.shape[0],):
        raise ValueError("weight must be (n_out, n_in) with matching bias")
    return LayerParams(weight=tape.param(weight), bias=tape.param(bias), kind=kind)


def dense(layer: LayerParams, x) -> Var:
    """Apply a dense layer to a (..., n_in) Var."""
    x = tape.wrap(x)
    if x.value.shape[-1] != layer.n_in:
        raise ValueError(
            "dense: input width %d does not match layer n_in %d"
            % (x.value.shape[-1], layer.n_in)
        )
    y = tape.add(tape.matmul(x, tape.transpose(layer.weight)), layer.bias)
    if layer.kind == "linear+sigmoid":
        return tape.sigmoid(y)
    if layer.kind == "linear+relu":
        return tape.relu(y)
    return y


@dataclass
class NormParams:
    gain: Var
    offset: Var


def init_norm(dim: int) -> NormParams:
    return NormParams(gain=tape.param(np.ones(dim)), offset=tape.param(np.zeros(dim)))


def layer_norm(x, norm: NormParams, eps: float = 1.0e-5) -> Var:
    return tape.layer_norm(x, norm.gain, norm.offset, eps=eps)


def cross_attention(queries, keys, values, scale) -> Var:
    """Single-set scaled dot-product attention on 2-d Vars.

    queries (n, dk), keys (m, dk), values (m, dv) -> (n, dv). The caller
    supplies scale (conventionally 1/sqrt(dk)).
    """
    q, k, v = tape.wrap(queries), tape.wrap(keys), tape.wrap(values)
    if q.value.ndim != 2 or k.value.ndim != 2 or v.value.ndim != 2:
        raise ValueError("cross_attention expects 2-d arrays")
    if k.value.shape[0] == 0:
        raise ValueError("cross_attention requires at least one key")
    if k.value.shape[0] != v.value.shape[0]:
        raise ValueError("keys and values must agree on the set size")
    if q.value.shape[1] != k.value.shape[1]:
        raise ValueError("queries and keys must agree on width")
    q3 = tape.reshape(q, (1,) + q.value.shape)
    k3 = tape.reshape(k, (1,) + k.value.shape)
    v3 = tape.reshape(v, (1,) + v.value.shape)
    out = tape.attention(q3, k3, v3, scale)
    return tape.reshape(out, (q.value.shape[0], v.value.shape[1]))


def named_params(obj, prefix: str = "") -> Iterator[tuple[str, Var]]:
    """Yield (name, Var) pairs from nested dataclasses/lists/dicts of Vars."""
    if isinstance(obj, Var):
        if obj.requires_grad:
            yield prefix or "param", obj
        return
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            child = getattr(obj, f.name)
            name = f.name if not prefix else prefix + "." + f.name
            yield from named_params(child, name)
        return
    if isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            yield from named_params(child, "%s[%d]" % (prefix, i))
        return
    if isinstance(obj, dict):
        for key, child in obj.items():
            name = str(key) if not prefix else prefix + "." + str(key)
            yield from named_params(child, name)
        return
    # Non-parameter leaves (arrays, strings, numbers) are skipped.


def collect_params(obj) -> list[tuple[str, Var]]:
    return list(named_params(obj))


def flatten_values(params: list[tuple[str, Var]]) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([p.value.ravel() for _, p in params])


def set_flat_values(params: list[tuple[str, Var]], flat: np.ndarray) -> None:
    offset = 0
    for _, p in params:
        n = p.value.size
        p.value = flat[offset : offset + n].reshape(p.value.shape).astype(np.float64)
        offset += n
    if offset != flat.size:
        raise ValueError("flat vector size mismatch")
