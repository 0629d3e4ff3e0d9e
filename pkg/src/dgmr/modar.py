"""Motion-token refinement: cross-attention context, gated residual heads,
and a strictly causal temporal filter.

Per frame, a motion token embedding (lifted joints + normalized keypoints)
queries the fused feature cells through two pre-norm cross-attention
blocks; the second block's key/value set additionally contains the updated
motion token, which is the realized form of the two-way exchange between
the motion and fusion streams (an alternating-roles variant is available
behind ``alt_block2``). The resulting context F'_t drives a gate
g_t = sigmoid(W F'_t) and a residual head Δx; parameters then follow

    x_t = (1 - rho) * x_{t-1} + rho * (x0_t + g_t ⊙ Δx_t),

seeded with x_start = x0 of the first frame. The parameter coordinate x is
[per-joint axis-angle pose increments; shape coefficients], so a zero
residual head leaves the initialization untouched. Pose increments are
norm-clamped per joint before gating, and the filter touches only past
frames, so outputs for a prefix of frames never depend on later input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dmaps import MotionTokens
from .numerics import tape
from .numerics.layers import (
    LayerParams,
    NormParams,
    dense,
    init_layer,
    init_norm,
    layer_norm,
)
from .numerics.tape import Var

RHO_DEFAULT = 0.7
POSE_CLAMP = 0.5  # rad per joint per pass


@dataclass
class AttnBlock:
    norm_in: NormParams
    wq: LayerParams
    wk: LayerParams  # fused tokens -> keys
    wv: LayerParams
    wo: LayerParams  # zero-init residual projection
    norm_ff: NormParams
    ff1: LayerParams
    ff2: LayerParams  # zero-init
    wk_m: Optional[LayerParams] = None  # motion-token key (block 2)
    wv_m: Optional[LayerParams] = None


@dataclass
class ModarParams:
    embed: LayerParams  # 5J -> D
    blocks: list[AttnBlock]
    final_norm: NormParams
    delta_head: LayerParams  # D -> 3J+S, zero-init
    gate: LayerParams  # D -> 3J+S, sigmoid
    rho_logit: Var
    fixed_rho: Optional[float] = None
    pose_clamp: float = POSE_CLAMP
    alt_block2: bool = False

    def rho(self) -> Var:
        if self.fixed_rho is not None:
            if not 0.0 < self.fixed_rho <= 1.0:
                raise ValueError("rho must lie in (0, 1]")
            return tape.constant(np.float64(self.fixed_rho))
        return tape.sigmoid(self.rho_logit)


def init_modar(
    rng: np.random.Generator,
    joint_count: int,
    shape_dim: int,
    channels: int,
    dim: int = 48,
    attn_dim: int = 32,
    ffn_dim: int = 64,
    rho: float = RHO_DEFAULT,
    pose_clamp: float = POSE_CLAMP,
    alt_block2: bool = False,
) -> ModarParams:
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    nx = 3 * joint_count + shape_dim

    def block(with_motion_kv: bool) -> AttnBlock:
        return AttnBlock(
            norm_in=init_norm(dim),
            wq=init_layer(rng, dim, attn_dim, "linear"),
            wk=init_layer(rng, channels, attn_dim, "linear"),
            wv=init_layer(rng, channels, attn_dim, "linear"),
            wo=init_layer(rng, attn_dim, dim, "linear", zero=True),
            norm_ff=init_norm(dim),
            ff1=init_layer(rng, dim, ffn_dim, "linear+relu"),
            ff2=init_layer(rng, ffn_dim, dim, "linear", zero=True),
            wk_m=init_layer(rng, dim, attn_dim, "linear") if with_motion_kv else None,
            wv_m=init_layer(rng, dim, attn_dim, "linear") if with_motion_kv else None,
        )

    logit = np.log(rho / (1.0 - rho)) if rho < 1.0 else 6.0
    return ModarParams(
        embed=init_layer(rng, 5 * joint_count, dim, "linear"),
        blocks=[block(False), block(True)],
        final_norm=init_norm(dim),
        delta_head=init_layer(rng, dim, nx, "linear", zero=True),
        gate=init_layer(rng, dim, nx, "linear+sigmoid", zero=True),
        rho_logit=tape.param(np.float64(logit)),
        fixed_rho=1.0 if rho == 1.0 else None,
        pose_clamp=pose_clamp,
        alt_block2=alt_block2,
    )


def build_context(params: ModarParams, motion: MotionTokens, fused: Var) -> Var:
    """Cross-attention context F' per frame, shape (T, D).

    ``fused`` is the (T, H, W, C) fused feature grid; its cells are the
    key/value tokens for each frame's motion query.
    """
    t, h, w, c = fused.value.shape
    if motion.frames != t:
        raise ValueError("motion and fused streams disagree on frame count")
    j = motion.joints.shape[1]
    tokens_in = np.concatenate(
        [motion.joints.reshape(t, 3 * j), motion.keypoints.reshape(t, 2 * j)], axis=1
    )
    x = dense(params.embed, tape.constant(tokens_in))  # (T, D)
    ftok = tape.reshape(fused, (t, h * w, c))
    flat = tape.reshape(fused, (t * h * w, c))

    for bi, blk in enumerate(params.blocks):
        dim = blk.wq.n_out
        scale = 1.0 / np.sqrt(dim)
        xn = layer_norm(x, blk.norm_in)
        if bi == 1 and params.alt_block2:
            # Alternating roles: fused cells query the updated motion token,
            # and the pooled answer feeds the motion residual.
            q = tape.reshape(dense(blk.wk, flat), (t, h * w, dim))
            k = tape.reshape(dense(blk.wk_m, xn), (t, 1, dim))
            v = tape.reshape(dense(blk.wv_m, xn), (t, 1, dim))
            att = tape.mean_(tape.attention(q, k, v, scale), axis=1)
        else:
            q = tape.reshape(dense(blk.wq, xn), (t, 1, dim))
            k = tape.reshape(dense(blk.wk, flat), (t, h * w, dim))
            v = tape.reshape(dense(blk.wv, flat), (t, h * w, dim))
            if blk.wk_m is not None:
                k = tape.concat([k, tape.reshape(dense(blk.wk_m, xn), (t, 1, dim))], axis=1)
                v = tape.concat([v, tape.reshape(dense(blk.wv_m, xn), (t, 1, dim))], axis=1)
            att = tape.reshape(tape.attention(q, k, v, scale), (t, dim))
        x = tape.add(x, dense(blk.wo, att))
        x = tape.add(x, dense(blk.ff2, dense(blk.ff1, layer_norm(x, blk.norm_ff))))
    return layer_norm(x, params.final_norm)


def causal_filter(x0, gated_residual, rho) -> Var:
    """x_t = (1-rho) x_{t-1} + rho (x0_t + r_t), seeded with x0 frame one."""
    x0v = x0 if isinstance(x0, Var) else tape.constant(np.asarray(x0, dtype=np.float64))
    rv = (
        gated_residual
        if isinstance(gated_residual, Var)
        else tape.constant(np.asarray(gated_residual, dtype=np.float64))
    )
    if x0v.value.shape != rv.value.shape or x0v.value.ndim != 2:
        raise ValueError("x0 and residuals must both be (T, n)")
    rho_v = rho if isinstance(rho, Var) else tape.constant(np.float64(rho))
    if not 0.0 < float(np.asarray(rho_v.value).reshape(-1)[0]) <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    t = x0v.value.shape[0]
    one_minus = tape.add(tape.mul(rho_v, -1.0), 1.0)
    prev = x0v[0:1]
    rows = []
    target = tape.add(x0v, rv)
    for i in range(t):
        cur = tape.add(
            tape.mul(prev, one_minus), tape.mul(target[i : i + 1], rho_v)
        )
        rows.append(cur)
        prev = cur
    return tape.concat(rows, axis=0)


def residuals(params: ModarParams, context: Var, joint_count: int) -> tuple[Var, Var]:
    """Gated, pose-clamped residuals and the raw gates, both (T, 3J+S)."""
    t = context.value.shape[0]
    gates = dense(params.gate, context)
    delta = dense(params.delta_head, context)
    nxp = 3 * joint_count
    pose = tape.reshape(delta[:, :nxp], (t, joint_count, 3))
    norm = tape.sqrt(
        tape.add(tape.sum_(tape.mul(pose, pose), axis=2, keepdims=True), 1.0e-12)
    )
    factor = tape.clip(tape.div(params.pose_clamp, norm), hi=1.0)
    pose = tape.reshape(tape.mul(pose, factor), (t, nxp))
    clamped = tape.concat([pose, delta[:, nxp:]], axis=1)
    return tape.mul(gates, clamped), gates


def refine(
    params: ModarParams,
    motion: MotionTokens,
    fused: Var,
    pose_init: list[Var],
    shape_init: Var,
    shape_bound: float,
    rho_override: Optional[float] = None,
) -> tuple[list[Var], Var, Var]:
    """Full refinement pass: context, gated residuals, causal filter, apply.

    Returns (refined per-joint quaternions, refined shape, the filtered
    parameter track x of shape (T, 3J+S)).
    """
    j = len(pose_init)
    t = motion.frames
    context = build_context(params, motion, fused)
    gated, _ = residuals(params, context, j)
    x0 = tape.concat(
        [tape.constant(np.zeros((t, 3 * j))), tape.expand0(shape_init, t)], axis=1
    )
    rho = (
        tape.constant(np.float64(rho_override))
        if rho_override is not None
        else params.rho()
    )
    if not 0.0 < float(np.asarray(rho.value).reshape(-1)[0]) <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    x = causal_filter(x0, gated, rho)
    pose_ref, shape_ref = apply_refinement(
        pose_init, shape_init, x, shape_bound=shape_bound
    )
    return pose_ref, shape_ref, x


def apply_refinement(
    pose_init: list[Var],
    shape_init: Var,
    x: Var,
    shape_bound: float,
) -> tuple[list[Var], Var]:
    """Compose pose increments onto the initialization; average the shape.

    Pose slices of x are per-joint axis-angle increments, left-composed
    onto the initial rotations; the shape slice is averaged over frames
    (one body per sequence) and clamped to bounds. Zero increments return
    the initialization bit-exactly.
    """
    j = len(pose_init)
    t = x.value.shape[0]
    s_dim = shape_init.value.shape[0]
    if x.value.shape[1] != 3 * j + s_dim:
        raise ValueError("parameter track width mismatch")
    pose_part = tape.reshape(x[:, : 3 * j], (t, j, 3))
    pose_ref = []
    for joint in range(j):
        inc = tape.aa_to_quat(tape.getitem(pose_part, (slice(None), joint)))
        pose_ref.append(tape.quat_mul(inc, pose_init[joint]))
    shape_track = x[:, 3 * j :]
    shape_ref = tape.clip(tape.mean_(shape_track, axis=0), -shape_bound, shape_bound)
    return pose_ref, shape_ref
