"""Depth-aware metric initialization.

Turns noisy observations (lifted 3D joints, 2D keypoints, depth confidence)
into calibrated bone lengths and an initial pose/shape estimate:

* per-frame quality m̄_t = mean depth confidence over the person region,
  temporal weights w_t = σ(η m̄_t), sequence gate α = σ(η mean m̄);
* bone lengths B̃ as the w-weighted temporal mean of per-frame lengths,
  calibrated against template statistics: B^Z = α B̃ + (1-α) B̄;
* shape via an analytically initialized linear head on (B^Z - B̄)/B̄;
* pose via swing-twist: swings from observed bone directions accumulated
  down the tree, twists from a small head on fused features with local
  depth patches, root from two-vector frame alignment, and a zero-init
  residual self-attention pass across frames.

Everything that should receive gradients (η, heads, attention) runs on the
tape; observed quantities enter as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rotation
from .body import BodyTemplate, bone_lengths
from .numerics import tape
from .numerics.layers import LayerParams, dense, init_layer, layer_from_arrays
from .numerics.tape import Var

ETA_DEFAULT = 4.0
SHAPE_BOUND = 5.0
TWIST_PATCH = 3  # depth patch side length, in cells


@dataclass
class DmapsParams:
    eta: Var  # quality sharpness, learnable scalar
    twist_hidden: LayerParams
    twist_out: LayerParams  # zero-init scalar head
    shape_head: LayerParams  # analytic pseudoinverse init
    attn_q: LayerParams
    attn_k: LayerParams
    attn_v: LayerParams
    attn_out: LayerParams  # zero-init residual projection
    shape_bound: float = SHAPE_BOUND


@dataclass
class MotionTokens:
    """Observed per-frame tokens: pelvis-centered 3D joints and normalized 2D."""

    joints: np.ndarray  # (T, J, 3) meters, pelvis row at the origin
    keypoints: np.ndarray  # (T, J, 2) in [0,1] image units

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        if self.joints.ndim != 3 or self.joints.shape[-1] != 3:
            raise ValueError("joints must be (T, J, 3)")
        if self.keypoints.shape != self.joints.shape[:2] + (2,):
            raise ValueError("keypoints must be (T, J, 2)")
        if np.max(np.abs(self.joints[:, 0, :])) > 1.0e-9:
            raise ValueError("pelvis row must be the origin")

    @property
    def frames(self) -> int:
        return int(self.joints.shape[0])


def motion_tokens_from_observations(
    lifted_3d, keypoints_px, image_width: float, image_height: float
) -> MotionTokens:
    lifted = np.asarray(lifted_3d, dtype=np.float64)
    lifted = lifted - lifted[:, 0:1, :]
    kp = np.asarray(keypoints_px, dtype=np.float64).copy()
    kp[..., 0] /= image_width
    kp[..., 1] /= image_height
    return MotionTokens(joints=lifted, keypoints=kp)


@dataclass
class CalibrationState:
    mean_confidence: np.ndarray  # (T,) m̄_t
    eta: Var
    weights: Var  # (T,) w_t
    alpha: Var  # scalar gate
    b_tilde: Var  # (B,)
    b_bar: np.ndarray  # (B,) template lengths
    b_z: Var  # (B,)
    degenerate_bones: np.ndarray  # (B,) bool, fell back to template
    empty_person_frames: list[int] = field(default_factory=list)


@dataclass
class InitResult:
    pose: list[Var]  # per joint, (T, 4) unit quaternions
    shape: Var  # (S,)
    calibration: CalibrationState
    degenerate_observed: np.ndarray  # (T, J) bool, zero-length observed bone
    twist: Var  # (T, J) predicted twist angles


def init_dmaps(
    rng: np.random.Generator,
    template: BodyTemplate,
    channels: int,
    hidden: int = 48,
    attn_dim: int = 32,
    eta: float = ETA_DEFAULT,
    shape_bound: float = SHAPE_BOUND,
) -> DmapsParams:
    j = template.joint_count
    patch = TWIST_PATCH * TWIST_PATCH * channels
    tok = 4 * j
    return DmapsParams(
        eta=tape.param(np.float64(eta)),
        twist_hidden=init_layer(rng, channels + patch + j, hidden, "linear+relu"),
        twist_out=init_layer(rng, hidden, 1, "linear", zero=True),
        shape_head=analytic_shape_head(template),
        attn_q=init_layer(rng, tok, attn_dim, "linear"),
        attn_k=init_layer(rng, tok, attn_dim, "linear"),
        attn_v=init_layer(rng, tok, attn_dim, "linear"),
        attn_out=init_layer(rng, attn_dim, tok, "linear", zero=True),
        shape_bound=shape_bound,
    )


def analytic_shape_head(template: BodyTemplate) -> LayerParams:
    """Linear head = pseudoinverse of the normalized-length Jacobian.

    apply_shape makes relative bone-length changes exactly linear in the
    coefficients, with Jacobian G[b, k] = length_gains[k, b]; the head
    weight pinv(G) therefore inverts noiseless residuals exactly.
    """
    jac = template.length_gains.T  # (B, S)
    weight = np.linalg.pinv(jac)  # (S, B)
    return layer_from_arrays(weight, np.zeros(weight.shape[0]), "linear")


# ---------------------------------------------------------------------------
# quality and calibration


def frame_quality(confidence, person_mask) -> tuple[np.ndarray, list[int]]:
    """Mean confidence over the person region per frame.

    Frames whose person mask is empty get quality 0 and are reported.
    """
    conf = np.asarray(confidence, dtype=np.float64)
    mask = np.asarray(person_mask, dtype=np.float64)
    if conf.shape != mask.shape or conf.ndim != 3:
        raise ValueError("confidence and person_mask must both be (T, H, W)")
    t = conf.shape[0]
    m_bar = np.zeros(t)
    empty = []
    for i in range(t):
        sel = mask[i] > 0.0
        if not sel.any():
            empty.append(i)
            continue
        m_bar[i] = float(conf[i][sel].mean())
    return np.clip(m_bar, 0.0, 1.0), empty


def _eta_var(eta) -> Var:
    if isinstance(eta, Var):
        if float(np.asarray(eta.value).reshape(-1)[0]) <= 0.0:
            raise ValueError("eta must be positive")
        return eta
    if float(eta) <= 0.0:
        raise ValueError("eta must be positive")
    return tape.constant(np.float64(eta))


def temporal_weights(m_bar, eta) -> Var:
    """w_t = sigmoid(eta * m̄_t)."""
    m = np.asarray(m_bar, dtype=np.float64)
    if m.ndim != 1 or m.size == 0:
        raise ValueError("m_bar must be a nonempty vector")
    if np.any(m < -1.0e-12) or np.any(m > 1.0 + 1.0e-12):
        raise ValueError("m_bar entries must lie in [0, 1]")
    return tape.sigmoid(tape.mul(_eta_var(eta), tape.constant(m)))


def fusion_gate(m_bar, eta) -> Var:
    """alpha = sigmoid(eta * mean(m̄))."""
    m = np.asarray(m_bar, dtype=np.float64)
    if m.size == 0:
        raise ValueError("cannot gate an empty sequence")
    if np.any(m < -1.0e-12) or np.any(m > 1.0 + 1.0e-12):
        raise ValueError("m_bar entries must lie in [0, 1]")
    return tape.sigmoid(tape.mul(_eta_var(eta), tape.constant(np.float64(m.mean()))))


def estimate_bone_lengths(joints_seq, parents, w) -> Var:
    """Weighted temporal mean of per-frame bone lengths (B̃)."""
    joints = np.asarray(joints_seq, dtype=np.float64)
    if joints.ndim != 3:
        raise ValueError("joints_seq must be (T, J, 3)")
    lengths = bone_lengths(joints, parents)  # (T, B)
    w_var = w if isinstance(w, Var) else tape.constant(np.asarray(w, dtype=np.float64))
    if w_var.value.shape != (joints.shape[0],):
        raise ValueError("need one weight per frame")
    if float(np.sum(w_var.value)) <= 0.0:
        raise ValueError("weights must not all be zero")
    t = joints.shape[0]
    num = tape.sum_(
        tape.mul(tape.reshape(w_var, (t, 1)), tape.constant(lengths)), axis=0
    )
    return tape.div(num, tape.sum_(w_var))


def calibrate_bone_lengths(b_tilde, b_bar, alpha) -> tuple[Var, np.ndarray]:
    """B^Z = alpha*B̃ + (1-alpha)*B̄, with degenerate estimates falling back.

    Bones whose estimate is non-positive keep the template length and are
    flagged in the returned boolean array.
    """
    bt = b_tilde if isinstance(b_tilde, Var) else tape.constant(
        np.asarray(b_tilde, dtype=np.float64)
    )
    bb = np.asarray(b_bar, dtype=np.float64)
    if np.any(bb <= 0.0):
        raise ValueError("template lengths must be positive")
    if bt.value.shape != bb.shape:
        raise ValueError("bone count mismatch")
    a = alpha if isinstance(alpha, Var) else tape.constant(np.float64(alpha))
    if not 0.0 < float(np.asarray(a.value).reshape(-1)[0]) < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    ok = bt.value > 0.0
    flags = ~ok
    mask = ok.astype(np.float64)
    blend = tape.add(
        tape.constant(bb), tape.mul(tape.add(bt, tape.constant(-bb)), a)
    )
    b_z = tape.add(
        tape.mul(blend, tape.constant(mask)), tape.constant((1.0 - mask) * bb)
    )
    return b_z, flags


def calibrate(
    template: BodyTemplate,
    motion: MotionTokens,
    confidence,
    person_mask,
    eta,
) -> CalibrationState:
    """Full quality → weights → B̃ → B^Z chain for one sequence."""
    m_bar, empty = frame_quality(confidence, person_mask)
    eta_var = _eta_var(eta)
    w = temporal_weights(m_bar, eta_var)
    alpha = fusion_gate(m_bar, eta_var)
    b_tilde = estimate_bone_lengths(motion.joints, template.tree.parents, w)
    b_bar = template.rest_bone_lengths
    b_z, flags = calibrate_bone_lengths(b_tilde, b_bar, alpha)
    return CalibrationState(
        mean_confidence=m_bar,
        eta=eta_var,
        weights=w,
        alpha=alpha,
        b_tilde=b_tilde,
        b_bar=b_bar,
        b_z=b_z,
        degenerate_bones=flags,
        empty_person_frames=empty,
    )


# ---------------------------------------------------------------------------
# shape head


def init_shape(params: DmapsParams, b_z, b_bar) -> Var:
    """Shape coefficients from normalized calibrated lengths, clamped."""
    bz = b_z if isinstance(b_z, Var) else tape.constant(np.asarray(b_z, dtype=np.float64))
    bb = np.asarray(b_bar, dtype=np.float64)
    if np.any(bz.value <= 0.0):
        raise ValueError("calibrated lengths must be positive")
    x = tape.div(tape.add(bz, tape.constant(-bb)), tape.constant(bb))
    s = dense(params.shape_head, tape.reshape(x, (1, bb.size)))
    s = tape.reshape(s, (params.shape_head.n_out,))
    return tape.clip(s, -params.shape_bound, params.shape_bound)


# ---------------------------------------------------------------------------
# twist head


def joint_cells(keypoints_norm: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Grid cell (row, col) per joint from normalized keypoints, clamped."""
    kp = np.asarray(keypoints_norm, dtype=np.float64)
    col = np.clip((kp[..., 0] * grid_w).astype(np.intp), 0, grid_w - 1)
    row = np.clip((kp[..., 1] * grid_h).astype(np.intp), 0, grid_h - 1)
    return np.stack([row, col], axis=-1)


def twist_head(
    params: DmapsParams,
    fused: Var,
    depth_embed: Optional[Var],
    cells: np.ndarray,
) -> Var:
    """Tanh-scaled twist angle per (frame, joint) from local features.

    Input per joint: the fused cell vector at the joint's projected cell,
    the 3x3 depth-embedding patch around it (zeros when the depth stream is
    off), and a one-hot joint id.
    """
    t, h, w, c = fused.value.shape
    j = cells.shape[1]
    rows = cells[..., 0]
    cols = cells[..., 1]
    t_idx = np.repeat(np.arange(t), j)
    base = t_idx * (h * w)
    center = base + rows.ravel() * w + cols.ravel()
    flat_fused = tape.reshape(fused, (t * h * w, c))
    parts = [tape.gather_rows(flat_fused, center)]

    half = TWIST_PATCH // 2
    if depth_embed is not None:
        flat_depth = tape.reshape(depth_embed, (t * h * w, c))
        for dr in range(-half, half + 1):
            for dc in range(-half, half + 1):
                rr = np.clip(rows.ravel() + dr, 0, h - 1)
                cc = np.clip(cols.ravel() + dc, 0, w - 1)
                parts.append(tape.gather_rows(flat_depth, base + rr * w + cc))
    else:
        parts.append(
            tape.constant(np.zeros((t * j, TWIST_PATCH * TWIST_PATCH * c)))
        )
    parts.append(tape.constant(np.tile(np.eye(j), (t, 1))))
    x = tape.concat(parts, axis=1)
    y = dense(params.twist_out, dense(params.twist_hidden, x))
    return tape.mul(tape.tanh(tape.reshape(y, (t, j))), np.pi)


# ---------------------------------------------------------------------------
# pose initialization


def _root_from_two_vectors(
    template: BodyTemplate, joints_obs: np.ndarray
) -> np.ndarray:
    """Per-frame root rotation aligning rest to observed root-child geometry.

    Uses the direction to the root's first child plus the line between its
    outer children (for a humanoid: pelvis→spine and hip→hip). With fewer
    than two children it falls back to the minimal swing.
    """
    tree = template.tree
    kids = tree.children(0)
    rest = template.rest_joints
    t = joints_obs.shape[0]
    out = np.zeros((t, 4))
    r1 = rest[kids[0]] - rest[0]
    if len(kids) >= 2:
        ka, kb = kids[1], kids[-1]
        r2 = rest[kb] - rest[ka]
    for f in range(t):
        f1 = joints_obs[f, kids[0]] - joints_obs[f, 0]
        if np.linalg.norm(f1) < 1.0e-9:
            out[f] = rotation.quat_identity()
            continue
        if len(kids) < 2:
            out[f] = rotation.swing_between(r1, f1)
            continue
        f2 = joints_obs[f, kb] - joints_obs[f, ka]
        frame_obs = _orthonormal_frame(f1, f2)
        frame_rest = _orthonormal_frame(r1, r2)
        if frame_obs is None or frame_rest is None:
            out[f] = rotation.swing_between(r1, f1)
            continue
        out[f] = rotation.quat_from_matrix(frame_obs @ frame_rest.T)
    return out


def _orthonormal_frame(v1: np.ndarray, v2: np.ndarray) -> Optional[np.ndarray]:
    e1 = v1 / np.linalg.norm(v1)
    u = v2 - np.dot(v2, e1) * e1
    n = np.linalg.norm(u)
    if n < 1.0e-9:
        return None
    e2 = u / n
    return np.stack([e1, e2, np.cross(e1, e2)], axis=1)


def _skew(a: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]]
    )


def init_pose(
    params: DmapsParams,
    template: BodyTemplate,
    motion: MotionTokens,
    fused: Var,
    depth_embed: Optional[Var],
    use_attention: bool = True,
) -> tuple[list[Var], np.ndarray, Var]:
    """Swing-twist pose initialization.

    Returns (per-joint (T, 4) quaternion Vars, degenerate-bone flags (T, J),
    twist angles (T, J) Var). Swings come from observed bone directions
    re-expressed in each parent's estimated frame; twists from the twist
    head about each joint's rest axis; the root from two-vector alignment.
    A zero-init self-attention pass refines the stacked pose tokens.
    """
    tree = template.tree
    j = tree.joint_count
    t = motion.frames
    obs = motion.joints
    cells = joint_cells(motion.keypoints, fused.value.shape[1], fused.value.shape[2])
    theta = twist_head(params, fused, depth_embed, cells)

    degenerate = np.zeros((t, j), dtype=bool)
    root_q = tape.constant(_root_from_two_vectors(template, obs))
    local: list[Optional[Var]] = [root_q]
    glob: list[Optional[Var]] = [root_q]
    conj = np.array([1.0, -1.0, -1.0, -1.0])

    for joint in range(1, j):
        kids = tree.children(joint)
        axis = template.twist_axes[joint]
        half = tape.mul(tape.reshape(theta[:, joint], (t, 1)), 0.5)
        twist_q = tape.concat(
            [tape.cos(half), tape.mul(tape.sin(half), tape.constant(axis))],
            axis=1,
        )
        if kids:
            child = kids[0]
            d_obs = obs[:, child] - obs[:, joint]
            norms = np.linalg.norm(d_obs, axis=1)
            bad = norms < 1.0e-8
            degenerate[bad, joint] = True
            rest_dir = axis  # rest direction to the first child by construction
            parent_glob = glob[tree.parents[joint]]
            d_loc = tape.unit_rows(
                tape.quat_rotate(
                    tape.mul(parent_glob, tape.constant(conj)),
                    tape.constant(np.where(bad[:, None], 0.0, d_obs)),
                )
            )
            # Degenerate frames take the rest direction in the parent frame,
            # which makes their swing exactly the identity.
            d_loc = tape.add(
                tape.mul(d_loc, tape.constant((~bad).astype(np.float64)[:, None])),
                tape.constant(bad[:, None] * rest_dir),
            )
            dot = tape.sum_(
                tape.mul(d_loc, tape.constant(rest_dir)), axis=1, keepdims=True
            )
            cross = tape.matmul(d_loc, tape.constant(_skew(rest_dir).T))
            w_comp = tape.clip(tape.add(dot, 1.0), lo=1.0e-9)
            swing = tape.unit_rows(tape.concat([w_comp, cross], axis=1))
            q = tape.quat_mul(swing, twist_q)
        else:
            q = twist_q  # leaves: twist about the incoming bone only
        local.append(q)
        glob.append(tape.quat_mul(glob[tree.parents[joint]], q))

    if use_attention:
        tokens = tape.reshape(
            tape.concat([tape.reshape(q, (t, 1, 4)) for q in local], axis=1),
            (t, 4 * j),
        )
        scale = 1.0 / np.sqrt(params.attn_q.n_out)
        q3 = tape.reshape(dense(params.attn_q, tokens), (1, t, params.attn_q.n_out))
        k3 = tape.reshape(dense(params.attn_k, tokens), (1, t, params.attn_k.n_out))
        v3 = tape.reshape(dense(params.attn_v, tokens), (1, t, params.attn_v.n_out))
        att = tape.reshape(tape.attention(q3, k3, v3, scale), (t, params.attn_q.n_out))
        refined = tape.add(tokens, dense(params.attn_out, att))
        quats = tape.unit_rows(tape.reshape(refined, (t, j, 4)))
        local = [tape.getitem(quats, (slice(None), joint)) for joint in range(j)]

    return local, degenerate, theta


def dmaps_init(
    params: DmapsParams,
    template: BodyTemplate,
    motion: MotionTokens,
    confidence,
    person_mask,
    fused: Var,
    depth_embed: Optional[Var],
    use_attention: bool = True,
) -> InitResult:
    """Calibration + shape + pose in one pass (the D-MAPS stage)."""
    cal = calibrate(template, motion, confidence, person_mask, params.eta)
    shape = init_shape(params, cal.b_z, cal.b_bar)
    pose, degenerate, theta = init_pose(
        params, template, motion, fused, depth_embed, use_attention
    )
    return InitResult(
        pose=pose,
        shape=shape,
        calibration=cal,
        degenerate_observed=degenerate,
        twist=theta,
    )
