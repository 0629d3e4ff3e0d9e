"""Synthetic sequence harness: motion, oracle features, noise, occlusion.

Stands in for real video, detectors, and pretrained encoders. Every field
of a sample is a pure function of (config, seed). Feature grids carry real
signal about the ground-truth pose so training is solvable:

RGB grid (T, H, W, C), channel group of size C // J per joint j:
    channel 2j   = bump_j * cos(twist_j)
    channel 2j+1 = bump_j * sin(twist_j)
where bump_j is a Gaussian centered at joint j's projected cell position
and twist_j is the ground-truth twist angle of joint j about its rest
axis. Groups of size 1 carry the bump only; channels past J * group are 0.

Depth grid (T, Hd, Wd, C) at reduced resolution:
    channel j (j < J) = bump_j at reduced resolution
    channel J         = camera depth (meters) of the nearest projected joint
    remaining channels zero.

Confidence (T, H, W) = exp(-mean |depth-channel noise|) per cell, floored
inside the occlusion region; person_mask marks cells near projected joints.
White noise everywhere scales with a single noise_level knob: feature noise
std = noise_level, 2D keypoint noise std = 20 px * noise_level, lifted-3D
noise std = 0.1 m * noise_level (10 mm at the default 0.1). Occlusion adds
fixed extra corruption to occluded joints independent of noise_level.

Camera convention: u = cx + f X/Z, v = cy - f Y/Z (world y up), depth = Z.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import backend, textio
from .body import BodyTemplate, fk_numpy, skin_vertices


@dataclass(frozen=True)
class CameraModel:
    focal: float = 500.0
    cx: float = 128.0
    cy: float = 128.0
    width: int = 256
    height: int = 256
    fps: float = 30.0

    def __post_init__(self):
        if self.focal <= 0 or self.fps <= 0:
            raise ValueError("focal and fps must be positive")

    def project(self, points) -> np.ndarray:
        """Pinhole projection of (..., 3) points; rejects points behind camera."""
        p = np.asarray(points, dtype=np.float64)
        z = p[..., 2]
        if np.any(z <= 0.1):
            raise ValueError("joints behind (or too close to) the camera")
        uv = np.empty(p.shape[:-1] + (2,))
        uv[..., 0] = self.cx + self.focal * p[..., 0] / z
        uv[..., 1] = self.cy - self.focal * p[..., 1] / z
        return uv


@dataclass(frozen=True)
class OcclusionSpec:
    """Confidence floor + feature blanking over a frame window and cell rect."""

    frame_start: int
    frame_end: int  # exclusive
    row_start: int
    row_end: int  # exclusive, full-resolution grid rows
    col_start: int
    col_end: int
    floor: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.floor < 1.0:
            raise ValueError("confidence floor must lie in [0, 1)")
        if self.frame_end <= self.frame_start:
            raise ValueError("empty occlusion window")

    def frame_mask(self, t: int) -> np.ndarray:
        m = np.zeros(t, dtype=bool)
        m[self.frame_start : self.frame_end] = True
        return m


@dataclass
class DataConfig:
    frames: int = 16
    grid_h: int = 8
    grid_w: int = 8
    channels: int = 32
    depth_h: int = 4
    depth_w: int = 4
    noise_level: float = 0.1
    bump_sigma: float = 0.8  # cells
    person_radius: float = 1.5  # cells
    kp_noise_px: float = 20.0  # per unit noise_level
    lifter_noise_m: float = 0.1  # per unit noise_level
    smoothness_band: float = 1.2  # Hz
    pose_amplitude: float = 1.2  # rad
    root_depth: tuple[float, float] = (3.2, 5.0)
    root_wander: float = 0.1  # m
    shape_bound: float = 5.0
    occlusion_rate: float = 0.0  # expected fraction of occluded frames
    occlusion_floor: float = 0.05
    occlusion_extra_3d: float = 0.08  # m, lifter corruption inside the window
    occlusion_extra_2d: float = 8.0  # px


@dataclass
class SequenceSample:
    gt_quats: np.ndarray  # (T, J, 4) local rotations
    gt_shape: np.ndarray  # (S,)
    gt_root: np.ndarray  # (T, 3)
    gt_joints: np.ndarray  # (T, J, 3) world
    gt_vertices: np.ndarray  # (T, V, 3) world
    gt_twists: np.ndarray  # (T, J) signed twist angle about the rest axis
    rgb: np.ndarray  # (T, H, W, C)
    depth: np.ndarray  # (T, Hd, Wd, C)
    confidence: np.ndarray  # (T, H, W)
    person_mask: np.ndarray  # (T, H, W) binary
    keypoints_2d: np.ndarray  # (T, J, 2) pixels
    lifted_3d: np.ndarray  # (T, J, 3) pelvis-centered meters
    occlusion: Optional[OcclusionSpec]
    seed: tuple[int, ...]

    @property
    def frames(self) -> int:
        return int(self.gt_quats.shape[0])


def twist_angles(quats, axes) -> np.ndarray:
    """Signed twist angle of local rotations (..., J, 4) about rest axes (J, 3)."""
    q = np.asarray(quats, dtype=np.float64)
    q = np.where(q[..., 0:1] < 0.0, -q, q)
    proj = np.sum(q[..., 1:] * axes, axis=-1)
    ang = 2.0 * np.arctan2(proj, q[..., 0])
    ang = np.where(ang > np.pi, ang - 2.0 * np.pi, ang)
    ang = np.where(ang <= -np.pi, ang + 2.0 * np.pi, ang)
    return ang


def gen_motion(
    template: BodyTemplate,
    frames: int,
    rng: np.random.Generator,
    cfg: DataConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Smooth random motion: per-joint sinusoidal axis-angle trajectories.

    Returns (local quats (T, J, 4), shape (S,), root translation (T, 3)).
    Every quantity is drawn in a fixed order from ``rng``.
    """
    if frames < 1:
        raise ValueError("need at least one frame")
    j = template.joint_count
    shape = rng.uniform(-cfg.shape_bound, cfg.shape_bound, size=template.shape_dim)
    ts = np.arange(frames) / 30.0  # generation clock; fps only affects metrics
    aa = np.zeros((frames, j, 3))
    for joint in range(j):
        limit = cfg.pose_amplitude * (0.3 if joint == 0 else 1.0)
        n_waves = 3
        axes = rng.standard_normal((n_waves, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        amps = rng.uniform(0.1, 1.0, size=n_waves)
        freqs = rng.uniform(0.0, cfg.smoothness_band, size=n_waves)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=n_waves)
        total = amps.sum()
        if total > limit:
            amps *= limit / total
        for k in range(n_waves):
            aa[:, joint] += (
                amps[k] * np.sin(2.0 * np.pi * freqs[k] * ts + phases[k])
            )[:, None] * axes[k]
    quats = backend.aa_to_quat(aa.reshape(-1, 3)).reshape(frames, j, 4)

    z0 = rng.uniform(*cfg.root_depth)
    root = np.zeros((frames, 3))
    for axis in range(3):
        amp = rng.uniform(0.2, 1.0) * cfg.root_wander
        freq = rng.uniform(0.0, cfg.smoothness_band)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        root[:, axis] = amp * np.sin(2.0 * np.pi * freq * ts + phase)
    root[:, 2] += z0
    return quats, shape, root


def _sample_occlusion(
    rng: np.random.Generator, cfg: DataConfig
) -> Optional[OcclusionSpec]:
    if cfg.occlusion_rate <= 0.0:
        return None
    n_occ = int(rng.binomial(cfg.frames, cfg.occlusion_rate))
    if n_occ == 0:
        return None
    start = int(rng.integers(0, cfg.frames - n_occ + 1))
    h, w = cfg.grid_h, cfg.grid_w
    rh = int(rng.integers(max(1, h // 2), h + 1))
    cw = int(rng.integers(max(1, w // 2), w + 1))
    r0 = int(rng.integers(0, h - rh + 1))
    c0 = int(rng.integers(0, w - cw + 1))
    return OcclusionSpec(
        frame_start=start,
        frame_end=start + n_occ,
        row_start=r0,
        row_end=r0 + rh,
        col_start=c0,
        col_end=c0 + cw,
        floor=cfg.occlusion_floor,
    )


def render_features(
    template: BodyTemplate,
    camera: CameraModel,
    cfg: DataConfig,
    gt_quats: np.ndarray,
    gt_shape: np.ndarray,
    gt_root: np.ndarray,
    rng: np.random.Generator,
    occlusion: Optional[OcclusionSpec] = None,
) -> SequenceSample:
    """Render oracle observations for a ground-truth trajectory."""
    if cfg.noise_level < 0.0:
        raise ValueError("noise_level must be nonnegative")
    t = gt_quats.shape[0]
    j = template.joint_count
    h, w, c = cfg.grid_h, cfg.grid_w, cfg.channels
    hd, wd = cfg.depth_h, cfg.depth_w
    if c < j + 1:
        raise ValueError("need at least J+1 channels for the feature layout")
    if h % hd or w % wd:
        raise ValueError("depth grid must divide the full grid")

    from .body import apply_shape  # local import to avoid cycle at module load

    rest_joints, rest_verts = apply_shape(template, gt_shape)
    root = rest_joints[0].copy()
    rest_joints = rest_joints - root
    rest_verts = rest_verts - root
    joints, glob = fk_numpy(rest_joints, template.tree.parents, gt_quats, gt_root)
    verts = skin_vertices(template, rest_joints, rest_verts, glob, joints)
    twists = twist_angles(gt_quats, template.twist_axes)

    uv = camera.project(joints)  # (T, J, 2), raises behind-camera
    cu = uv[..., 0] * (w / camera.width)  # full-grid cell coords
    cv = uv[..., 1] * (h / camera.height)
    cu_d = uv[..., 0] * (wd / camera.width)
    cv_d = uv[..., 1] * (hd / camera.height)

    inv2s2 = 1.0 / (2.0 * cfg.bump_sigma**2)
    sig_d = cfg.bump_sigma * (hd / h)
    inv2s2_d = 1.0 / (2.0 * sig_d**2)
    bumps = backend.gauss_maps(cu.ravel(), cv.ravel(), inv2s2, h, w).reshape(
        t, j, h, w
    )
    bumps_d = backend.gauss_maps(
        cu_d.ravel(), cv_d.ravel(), inv2s2_d, hd, wd
    ).reshape(t, j, hd, wd)

    rgb = np.zeros((t, h, w, c))
    group = c // j
    for joint in range(j):
        base = joint * group
        if group >= 2:
            rgb[..., base] = bumps[:, joint] * np.cos(twists[:, joint])[:, None, None]
            rgb[..., base + 1] = (
                bumps[:, joint] * np.sin(twists[:, joint])[:, None, None]
            )
        else:
            rgb[..., base] = bumps[:, joint]

    depth = np.zeros((t, hd, wd, c))
    depth[..., :j] = np.moveaxis(bumps_d, 1, -1)
    # Nearest projected joint's camera depth per reduced cell.
    ys = np.arange(hd) + 0.5
    xs = np.arange(wd) + 0.5
    dy = ys[None, :, None, None] - cv_d[:, None, None, :]  # (T, hd, 1, J)
    dx = xs[None, None, :, None] - cu_d[:, None, None, :]  # (T, 1, wd, J)
    d2 = dx**2 + dy**2  # (T, hd, wd, J)
    nearest = np.argmin(d2, axis=-1)
    depth[..., j] = np.take_along_axis(
        np.broadcast_to(joints[:, None, None, :, 2], d2.shape),
        nearest[..., None],
        axis=-1,
    )[..., 0]

    # Noise draws in a fixed order.
    rgb_noise = rng.standard_normal(rgb.shape) * cfg.noise_level
    depth_noise = rng.standard_normal(depth.shape) * cfg.noise_level
    kp_noise = rng.standard_normal((t, j, 2)) * (cfg.kp_noise_px * cfg.noise_level)
    lift_noise = rng.standard_normal((t, j, 3)) * (
        cfg.lifter_noise_m * cfg.noise_level
    )
    lift_noise[:, 0] = 0.0
    occ_kp = rng.standard_normal((t, j, 2)) * cfg.occlusion_extra_2d
    occ_lift = rng.standard_normal((t, j, 3)) * cfg.occlusion_extra_3d
    occ_lift[:, 0] = 0.0

    rgb += rgb_noise
    depth += depth_noise
    confidence = np.exp(-np.mean(np.abs(depth_noise), axis=-1))  # (T, hd, wd)
    confidence = np.repeat(np.repeat(confidence, h // hd, axis=1), w // wd, axis=2)

    keypoints = uv + kp_noise
    lifted = (joints - joints[:, 0:1, :]) + lift_noise

    if occlusion is not None:
        fm = occlusion.frame_mask(t)
        r0, r1 = occlusion.row_start, occlusion.row_end
        c0, c1 = occlusion.col_start, occlusion.col_end
        rgb[fm, r0:r1, c0:c1, :] = 0.0
        rd0, rd1 = r0 * hd // h, max(r1 * hd // h, r0 * hd // h + 1)
        cd0, cd1 = c0 * wd // w, max(c1 * wd // w, c0 * wd // w + 1)
        depth[fm, rd0:rd1, cd0:cd1, :] = 0.0
        confidence[fm, r0:r1, c0:c1] = np.minimum(
            confidence[fm, r0:r1, c0:c1], occlusion.floor
        )
        # Joints whose projection falls in the occluded rect lose precision.
        in_rect = (
            (cv >= r0) & (cv < r1) & (cu >= c0) & (cu < c1) & fm[:, None]
        )  # (T, J)
        keypoints += occ_kp * in_rect[..., None]
        lifted += occ_lift * in_rect[..., None]
        lifted[:, 0] = 0.0

    # Person mask: cells whose center is near any projected joint.
    ys_f = np.arange(h) + 0.5
    xs_f = np.arange(w) + 0.5
    dyf = ys_f[None, :, None, None] - cv[:, None, None, :]
    dxf = xs_f[None, None, :, None] - cu[:, None, None, :]
    near = (dxf**2 + dyf**2) <= cfg.person_radius**2
    person = near.any(axis=-1).astype(np.float64)

    return SequenceSample(
        gt_quats=gt_quats,
        gt_shape=np.asarray(gt_shape, dtype=np.float64),
        gt_root=gt_root,
        gt_joints=joints,
        gt_vertices=verts,
        gt_twists=twists,
        rgb=rgb,
        depth=depth,
        confidence=np.clip(confidence, 0.0, 1.0),
        person_mask=person,
        keypoints_2d=keypoints,
        lifted_3d=lifted,
        occlusion=occlusion,
        seed=(),
    )


def decode_depth(depth_frame: np.ndarray, row: int, col: int, joint_count: int) -> float:
    """Read the camera-depth channel of one reduced-grid cell."""
    return float(depth_frame[row, col, joint_count])


def make_sample(
    template: BodyTemplate,
    camera: CameraModel,
    cfg: DataConfig,
    seed: int,
    split: int,
    index: int,
) -> SequenceSample:
    """One fully deterministic sample keyed by (seed, split, index)."""
    key = (int(seed), int(split), int(index))
    rng = np.random.default_rng(key)
    quats, shape, root = gen_motion(template, cfg.frames, rng, cfg)
    occ = _sample_occlusion(rng, cfg)
    sample = render_features(template, camera, cfg, quats, shape, root, rng, occ)
    sample.seed = key
    return sample


TRAIN_SPLIT = 0
EVAL_SPLIT = 1


def make_dataset(
    template: BodyTemplate,
    camera: CameraModel,
    cfg: DataConfig,
    n: int,
    seed: int,
    split: int = TRAIN_SPLIT,
) -> list[SequenceSample]:
    """n samples; train and eval splits use disjoint deterministic key spaces."""
    if n < 1:
        raise ValueError("need at least one sequence")
    return [make_sample(template, camera, cfg, seed, split, i) for i in range(n)]


# ---------------------------------------------------------------------------
# plain-text serialization (diffable fixtures)

_SAMPLE_FIELDS = (
    "gt_quats",
    "gt_shape",
    "gt_root",
    "gt_joints",
    "gt_vertices",
    "gt_twists",
    "rgb",
    "depth",
    "confidence",
    "person_mask",
    "keypoints_2d",
    "lifted_3d",
)


def save_sample_text(sample: SequenceSample, path: str) -> None:
    """One sample per file: a header line, then one section per array field."""
    with open(path, "w") as out:
        occ = sample.occlusion
        occ_txt = (
            "none"
            if occ is None
            else "%d,%d,%d,%d,%d,%d,%r"
            % (
                occ.frame_start,
                occ.frame_end,
                occ.row_start,
                occ.row_end,
                occ.col_start,
                occ.col_end,
                occ.floor,
            )
        )
        out.write(
            "sequence-sample seed=%s occlusion=%s\n"
            % (",".join(str(s) for s in sample.seed), occ_txt)
        )
        for name in _SAMPLE_FIELDS:
            textio.write_array(out, name, getattr(sample, name))


def load_sample_text(path: str) -> SequenceSample:
    with open(path) as f:
        lines = f.readlines()
    header = lines[0].strip()
    if not header.startswith("sequence-sample "):
        raise ValueError("not a sample file")
    meta = dict(kv.split("=", 1) for kv in header.split(" ")[1:])
    seed = tuple(int(x) for x in meta["seed"].split(",") if x)
    occ = None
    if meta["occlusion"] != "none":
        parts = meta["occlusion"].split(",")
        occ = OcclusionSpec(
            frame_start=int(parts[0]),
            frame_end=int(parts[1]),
            row_start=int(parts[2]),
            row_end=int(parts[3]),
            col_start=int(parts[4]),
            col_end=int(parts[5]),
            floor=float(parts[6]),
        )
    arrays = {}
    pos = 1
    for name in _SAMPLE_FIELDS:
        arrays[name], pos = textio.read_array(lines, pos, name)
    return SequenceSample(occlusion=occ, seed=seed, **arrays)
