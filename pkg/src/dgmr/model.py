"""End-to-end model: fusion → metric init → refinement → FK/skinning.

The forward pass is a pure function of (parameters, observations, ablation
flags). Ablation cells form a cumulative ladder:

    rgb_only       RGB features only, swing-twist init, no refinement
    mask_fusion    + depth stream with the modulation mask
    quality_depth  + channel gates
    dmaps_only     + calibration, shape head, temporal self-attention
    modar_only     quality_depth + cross-attention refinement (no D-MAPS)
    complete       everything

Root translation is estimated from calibrated bone lengths and observed
2D bone lengths through the pinhole model (z = f * Σ metric / Σ pixels),
causally smoothed, and is differentiable through the calibrated lengths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import modar as modar_mod
from .body import BodyTemplate, apply_shape_tape, fk_tape, skin_vertices_tape
from .dmaps import (
    CalibrationState,
    DmapsParams,
    dmaps_init,
    init_dmaps,
    init_pose,
    motion_tokens_from_observations,
)
from .fusion import FusionParams, FusionResult, fuse, init_fusion
from .modar import ModarParams, init_modar
from .numerics import tape
from .numerics.layers import named_params
from .numerics.tape import Var
from .synth import CameraModel, SequenceSample

ABLATION_CELLS = (
    "rgb_only",
    "mask_fusion",
    "quality_depth",
    "dmaps_only",
    "modar_only",
    "complete",
)


@dataclass(frozen=True)
class AblationFlags:
    use_depth: bool = True
    use_mask: bool = True
    use_gates: bool = True
    use_dmaps: bool = True
    use_modar: bool = True

    def validate(self) -> None:
        if not self.use_depth and (self.use_mask or self.use_gates):
            raise ValueError("mask and gates require the depth stream")
        if not self.use_depth and self.use_dmaps:
            raise ValueError("calibration requires depth confidence")

    @staticmethod
    def for_cell(name: str) -> "AblationFlags":
        table = {
            "rgb_only": AblationFlags(False, False, False, False, False),
            "mask_fusion": AblationFlags(True, True, False, False, False),
            "quality_depth": AblationFlags(True, True, True, False, False),
            "dmaps_only": AblationFlags(True, True, True, True, False),
            "modar_only": AblationFlags(True, True, True, False, True),
            "complete": AblationFlags(True, True, True, True, True),
        }
        if name not in table:
            raise ValueError(
                "unknown ablation cell %r (choose from %s)"
                % (name, ", ".join(ABLATION_CELLS))
            )
        return table[name]


@dataclass
class ModelConfig:
    channels: int = 32
    fusion_levels: int = 2
    twist_hidden: int = 48
    dmaps_attn_dim: int = 32
    modar_dim: int = 48
    modar_attn_dim: int = 32
    modar_ffn_dim: int = 64
    eta: float = 4.0
    rho: float = 0.7
    shape_bound: float = 5.0
    pose_clamp: float = 0.5
    alt_block2: bool = False
    root_ema: float = 0.8


@dataclass
class ModelParams:
    fusion: FusionParams
    dmaps: DmapsParams
    modar: ModarParams
    template: BodyTemplate
    config: ModelConfig


@dataclass
class Prediction:
    joints: Var  # (T, J, 3)
    vertices: Optional[Var]  # (T, V, 3)
    local_quats: list[Var]  # per joint (T, 4)
    shape: Var  # (S,)
    root: Var  # (T, 3)
    init_quats: list[Var]
    init_shape: Var
    fusion: FusionResult
    calibration: Optional[CalibrationState]
    x_track: Optional[Var]
    degenerate_observed: np.ndarray
    twist: Var


def init_model(
    seed: int, template: BodyTemplate, config: Optional[ModelConfig] = None
) -> ModelParams:
    cfg = config or ModelConfig()
    rng = np.random.default_rng((int(seed), 0xD0D0))
    fusion = init_fusion(rng, cfg.channels, cfg.fusion_levels)
    dm = init_dmaps(
        rng,
        template,
        cfg.channels,
        hidden=cfg.twist_hidden,
        attn_dim=cfg.dmaps_attn_dim,
        eta=cfg.eta,
        shape_bound=cfg.shape_bound,
    )
    md = init_modar(
        rng,
        template.joint_count,
        template.shape_dim,
        cfg.channels,
        dim=cfg.modar_dim,
        attn_dim=cfg.modar_attn_dim,
        ffn_dim=cfg.modar_ffn_dim,
        rho=cfg.rho,
        pose_clamp=cfg.pose_clamp,
        alt_block2=cfg.alt_block2,
    )
    return ModelParams(fusion=fusion, dmaps=dm, modar=md, template=template, config=cfg)


def estimate_root_translation(
    keypoints_px: np.ndarray,
    bone_sum: Var,
    camera: CameraModel,
    parents: np.ndarray,
    ema: float = 0.8,
) -> Var:
    """Per-frame camera-space root position from pinhole proportionality.

    Depth = focal * (sum of calibrated bone lengths) / (sum of observed 2D
    bone lengths), causally smoothed with an exponential moving average;
    x and y follow from the pelvis keypoint through the inverse projection.
    """
    kp = np.asarray(keypoints_px, dtype=np.float64)
    t = kp.shape[0]
    child = kp[:, 1:, :]
    parent = kp[:, np.asarray(parents)[1:], :]
    pix = np.maximum(np.linalg.norm(child - parent, axis=2).sum(axis=1), 1.0e-3)
    z_raw = tape.div(tape.mul(bone_sum, camera.focal), tape.constant(pix))
    if not 0.0 <= ema < 1.0:
        raise ValueError("ema must lie in [0, 1)")
    prev = z_raw[0:1]
    rows = [prev]
    for i in range(1, t):
        prev = tape.add(tape.mul(prev, ema), tape.mul(z_raw[i : i + 1], 1.0 - ema))
        rows.append(prev)
    z = tape.concat(rows, axis=0)
    u = (kp[:, 0, 0] - camera.cx) / camera.focal
    v = (camera.cy - kp[:, 0, 1]) / camera.focal
    cols = [
        tape.reshape(tape.mul(z, tape.constant(u)), (t, 1)),
        tape.reshape(tape.mul(z, tape.constant(v)), (t, 1)),
        tape.reshape(z, (t, 1)),
    ]
    return tape.concat(cols, axis=1)


def forward(
    params: ModelParams,
    sample: SequenceSample,
    camera: CameraModel,
    flags: AblationFlags,
    rho_override: Optional[float] = None,
    compute_vertices: bool = True,
) -> Prediction:
    """Run the full model on one sequence of observations."""
    flags.validate()
    template = params.template
    cfg = params.config
    fusion_result = fuse(
        params.fusion,
        tape.constant(sample.rgb),
        tape.constant(sample.depth),
        use_depth=flags.use_depth,
        use_mask=flags.use_mask,
        use_gates=flags.use_gates,
    )
    motion = motion_tokens_from_observations(
        sample.lifted_3d, sample.keypoints_2d, camera.width, camera.height
    )
    depth_embed = fusion_result.depth_embed if flags.use_depth else None

    calibration: Optional[CalibrationState] = None
    if flags.use_dmaps:
        init_result = dmaps_init(
            params.dmaps,
            template,
            motion,
            sample.confidence,
            sample.person_mask,
            fusion_result.fused,
            depth_embed,
            use_attention=True,
        )
        p_init = init_result.pose
        s_init = init_result.shape
        calibration = init_result.calibration
        degenerate = init_result.degenerate_observed
        twist = init_result.twist
        bone_sum = tape.sum_(calibration.b_z)
    else:
        p_init, degenerate, twist = init_pose(
            params.dmaps,
            template,
            motion,
            fusion_result.fused,
            depth_embed,
            use_attention=False,
        )
        s_init = tape.constant(np.zeros(template.shape_dim))
        bone_sum = tape.constant(np.float64(template.rest_bone_lengths.sum()))

    x_track: Optional[Var] = None
    if flags.use_modar:
        p_ref, s_ref, x_track = modar_mod.refine(
            params.modar,
            motion,
            fusion_result.fused,
            p_init,
            s_init,
            shape_bound=cfg.shape_bound,
            rho_override=rho_override,
        )
    else:
        p_ref, s_ref = p_init, s_init

    root = estimate_root_translation(
        sample.keypoints_2d, bone_sum, camera, template.tree.parents, cfg.root_ema
    )
    rest_joints, rest_vertices = apply_shape_tape(template, s_ref)
    joints, glob = fk_tape(rest_joints, template.tree.parents, p_ref, root)
    vertices = None
    if compute_vertices:
        vertices = skin_vertices_tape(
            template, rest_joints, rest_vertices, glob, joints
        )
    return Prediction(
        joints=joints,
        vertices=vertices,
        local_quats=p_ref,
        shape=s_ref,
        root=root,
        init_quats=p_init,
        init_shape=s_init,
        fusion=fusion_result,
        calibration=calibration,
        x_track=x_track,
        degenerate_observed=degenerate,
        twist=twist,
    )


def trainable_params(
    params: ModelParams, flags: AblationFlags, phase: int
) -> list[tuple[str, Var]]:
    """Named parameters the optimizer should touch in a given phase.

    Phase 1 trains fusion and the twist head (the initialization path);
    phase 2 additionally trains the calibration sharpness, shape head,
    temporal attention, and the refinement stack, per the active flags.
    """
    if phase not in (1, 2):
        raise ValueError("phase must be 1 or 2")
    out = list(named_params(params.fusion, "fusion"))
    out += list(named_params(params.dmaps.twist_hidden, "dmaps.twist_hidden"))
    out += list(named_params(params.dmaps.twist_out, "dmaps.twist_out"))
    if phase == 2:
        if flags.use_dmaps:
            out.append(("dmaps.eta", params.dmaps.eta))
            out += list(named_params(params.dmaps.shape_head, "dmaps.shape_head"))
            for name in ("attn_q", "attn_k", "attn_v", "attn_out"):
                out += list(
                    named_params(getattr(params.dmaps, name), "dmaps." + name)
                )
        if flags.use_modar:
            out += list(named_params(params.modar, "modar"))
    return out


def all_params(params: ModelParams) -> list[tuple[str, Var]]:
    out = list(named_params(params.fusion, "fusion"))
    out += list(named_params(params.dmaps, "dmaps"))
    out += list(named_params(params.modar, "modar"))
    return out


def save_params(params: ModelParams, path: str) -> None:
    arrays = {name: p.value for name, p in all_params(params)}
    np.savez(path, **arrays)


def load_params(params: ModelParams, path: str) -> None:
    """Load values saved by save_params into an existing parameter set."""
    data = np.load(path)
    current = dict(all_params(params))
    missing = set(current) - set(data.files)
    extra = set(data.files) - set(current)
    if missing or extra:
        raise ValueError(
            "checkpoint mismatch (missing: %s, unexpected: %s)"
            % (sorted(missing), sorted(extra))
        )
    for name, var in current.items():
        arr = np.asarray(data[name], dtype=np.float64)
        if arr.shape != np.asarray(var.value).shape:
            raise ValueError("shape mismatch for %r" % name)
        var.value = arr
