"""Gated fusion of RGB and depth feature grids.

Per pyramid level the depth stream is embedded by a per-cell linear map,
a mask head (two per-cell layers + sigmoid) modulates the RGB stream, a
pooled gate head produces per-frame channel gates for both streams, and a
per-cell projection collapses the gated concatenation back to the working
width. Level outputs are upsampled to the finest grid and summed.

The projection starts as channel-wise averaging of the two streams, the
identity-like configuration the refinement stages expect at step zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import layers, tape
from .numerics.layers import LayerParams
from .numerics.tape import Var


@dataclass
class FusionLevelParams:
    depth_embed: LayerParams  # psi: raw depth features -> working width
    mask_hidden: LayerParams
    mask_out: LayerParams  # sigmoid, per-cell mask over channels
    gate_hidden: LayerParams
    gate_out: LayerParams  # sigmoid, per-frame channel gates (rgb | depth)
    project: LayerParams  # phi: gated concat -> fused features


@dataclass
class FusionParams:
    levels: list[FusionLevelParams]
    channels: int


@dataclass
class FusionResult:
    fused: Var  # (T, H, W, C)
    depth_embed: Var  # (T, H, W, C) level-0 embedded depth stream
    mask: Optional[Var]  # (T, H, W, C) level-0 mask, None when disabled
    gates: Optional[Var]  # (T, 2C) level-0 channel gates, None when disabled


def init_fusion(
    rng: np.random.Generator, channels: int, levels: int = 2
) -> FusionParams:
    if channels < 1 or levels < 1:
        raise ValueError("channels and levels must be positive")
    out = []
    for _ in range(levels):
        eye = np.eye(channels)
        project = layers.layer_from_arrays(
            np.concatenate([0.5 * eye, 0.5 * eye], axis=1),
            np.zeros(channels),
            kind="linear",
        )
        out.append(
            FusionLevelParams(
                depth_embed=layers.init_layer(rng, channels, channels, "linear"),
                mask_hidden=layers.init_layer(
                    rng, channels, channels, "linear+relu"
                ),
                mask_out=layers.init_layer(
                    rng, channels, channels, "linear+sigmoid"
                ),
                gate_hidden=layers.init_layer(
                    rng, 2 * channels, channels, "linear+relu"
                ),
                gate_out=layers.init_layer(
                    rng, channels, 2 * channels, "linear+sigmoid"
                ),
                project=project,
            )
        )
    return FusionParams(levels=out, channels=channels)


def _per_cell(layer: LayerParams, grid: Var) -> Var:
    """Apply a dense layer across the channel axis of a (T, H, W, C) Var."""
    t, h, w, c = grid.value.shape
    flat = tape.reshape(grid, (t * h * w, c))
    out = layers.dense(layer, flat)
    return tape.reshape(out, (t, h, w, out.value.shape[-1]))


def _match_resolution(x: Var, target_h: int, target_w: int) -> Var:
    """Resample axes 1 and 2 of a (T, H, W, C) Var to the target grid."""
    _, h, w, _ = x.value.shape
    if h == target_h and w == target_w:
        return x
    if target_h >= h:
        if target_h % h or target_w % w or target_h // h != target_w // w:
            raise ValueError("grid sizes must be related by an integer factor")
        return tape.upsample2(x, target_h // h)
    if h % target_h or w % target_w or h // target_h != w // target_w:
        raise ValueError("grid sizes must be related by an integer factor")
    return tape.avgpool2(x, h // target_h)


def mock_depth_pathway(
    level: FusionLevelParams, raw_depth, target_h: int, target_w: int
) -> Var:
    """Per-cell linear refinement of the raw depth grid, then nearest-neighbor
    upsampling to the working resolution. The raw grid must divide the target."""
    d = tape.wrap(raw_depth)
    if d.value.ndim != 4:
        raise ValueError("raw depth grid must be (T, Hd, Wd, C)")
    return _match_resolution(_per_cell(level.depth_embed, d), target_h, target_w)


def modulation_mask(level: FusionLevelParams, d_t) -> Var:
    """Two per-cell layers + sigmoid over the embedded depth stream."""
    return _per_cell(level.mask_out, _per_cell(level.mask_hidden, tape.wrap(d_t)))


def channel_gates(level: FusionLevelParams, f_rgb, f_depth) -> tuple[Var, Var]:
    """Mean-pool both streams, run the gate MLP, split into (q_r, q_d)."""
    f_r = tape.wrap(f_rgb)
    f_d = tape.wrap(f_depth)
    if f_r.value.shape[-1] != f_d.value.shape[-1]:
        raise ValueError("streams must share the channel width")
    c = f_r.value.shape[-1]
    pooled = tape.concat(
        [tape.mean_(f_r, axis=(1, 2)), tape.mean_(f_d, axis=(1, 2))], axis=1
    )
    gates = layers.dense(level.gate_out, layers.dense(level.gate_hidden, pooled))
    return gates[:, :c], gates[:, c:]


def fuse_grids(level: FusionLevelParams, r_t, d_t, mask, q_rgb, q_depth) -> Var:
    """Gated concatenation + projection: phi([q_r ⊙ M ⊙ r | q_d ⊙ d])."""
    r = tape.wrap(r_t)
    d = tape.wrap(d_t)
    if r.value.shape != d.value.shape:
        raise ValueError("streams must share (T, H, W, C)")
    t, _, _, c = r.value.shape
    f_r = tape.mul(tape.wrap(mask), r)
    qr = tape.reshape(tape.wrap(q_rgb), (t, 1, 1, c))
    qd = tape.reshape(tape.wrap(q_depth), (t, 1, 1, c))
    gated = tape.concat([tape.mul(qr, f_r), tape.mul(qd, d)], axis=3)
    return _per_cell(level.project, gated)


def fuse(
    params: FusionParams,
    rgb,
    depth,
    use_depth: bool = True,
    use_mask: bool = True,
    use_gates: bool = True,
) -> FusionResult:
    """Run the fusion pyramid.

    Args:
        params: fusion parameters.
        rgb: (T, H, W, C) RGB feature grid (array or Var).
        depth: (T, Hd, Wd, C) raw depth feature grid at its native
            resolution; ignored entirely when use_depth is False.
        use_depth / use_mask / use_gates: ablation switches. Disabled parts
            are replaced by constants (zero depth stream, unit mask, unit
            gates) so they contribute no gradients and no information.

    Returns:
        FusionResult with the summed multi-level fused grid.
    """
    rgb = tape.wrap(rgb)
    t, h, w, c = rgb.value.shape
    if c != params.channels:
        raise ValueError("rgb channel width does not match fusion params")
    if use_depth:
        depth = tape.wrap(depth)
        if depth.value.ndim != 4 or depth.value.shape[3] != c:
            raise ValueError("depth grid must be (T, Hd, Wd, C)")

    fused_total: Optional[Var] = None
    mask0: Optional[Var] = None
    gates0: Optional[Var] = None
    depth0: Optional[Var] = None
    rgb_level = rgb
    for idx, level in enumerate(params.levels):
        if idx > 0:
            rgb_level = tape.avgpool2(rgb_level, 2)
        lh, lw = rgb_level.value.shape[1], rgb_level.value.shape[2]
        if use_depth:
            d_embed = mock_depth_pathway(level, depth, lh, lw)
        else:
            d_embed = tape.constant(np.zeros((t, lh, lw, c)))
        if use_mask:
            mask = modulation_mask(level, d_embed)
        else:
            mask = tape.constant(np.ones((t, lh, lw, c)))
        if use_gates:
            q_rgb, q_depth = channel_gates(
                level, tape.mul(mask, rgb_level), d_embed
            )
        else:
            q_rgb = tape.constant(np.ones((t, c)))
            q_depth = tape.constant(np.ones((t, c)))
        if not use_depth:
            q_depth = tape.constant(np.zeros((t, c)))
        fused_level = _match_resolution(
            fuse_grids(level, rgb_level, d_embed, mask, q_rgb, q_depth), h, w
        )
        fused_total = (
            fused_level
            if fused_total is None
            else tape.add(fused_total, fused_level)
        )
        if idx == 0:
            mask0 = mask if use_mask else None
            gates0 = (
                tape.concat([q_rgb, q_depth], axis=1) if use_gates else None
            )
            depth0 = d_embed
    assert fused_total is not None and depth0 is not None
    return FusionResult(
        fused=fused_total, depth_embed=depth0, mask=mask0, gates=gates0
    )
