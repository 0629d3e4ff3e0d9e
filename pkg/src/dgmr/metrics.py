"""Training losses and evaluation metrics.

Loss terms (weighted sum, defaults λ_mesh=1, λ_joint=5, λ_pose=1,
λ_shape=0.1, λ_smooth=0.5):

* mesh: mean absolute coordinate deviation of pelvis-centered vertices;
* joint: mean squared Euclidean distance of pelvis-centered joints;
* pose: mean squared Frobenius distance of local rotation matrices;
* shape: squared distance of shape coefficients;
* smooth: mean squared norm of the second temporal difference of the
  predicted (pelvis-centered) joints; zero with a warning under 3 frames.

Metrics (numpy, meters in → millimeters out): MPJPE root-aligns each frame
on the pelvis and averages distances over the non-root joints; PA-MPJPE
applies a per-frame closed-form similarity alignment (scale, rotation with
reflections excluded, translation) and averages over all joints; MPVPE
root-aligns vertices by the root joint; Accel compares second differences
of absolute joints scaled by fps², in mm/s².
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .numerics import tape
from .numerics.tape import Var


@dataclass(frozen=True)
class LossWeights:
    mesh: float = 1.0
    joint: float = 5.0
    pose: float = 1.0
    shape: float = 0.1
    smooth: float = 0.5

    def __post_init__(self):
        vals = (self.mesh, self.joint, self.pose, self.shape, self.smooth)
        if any(not np.isfinite(v) or v < 0.0 for v in vals):
            raise ValueError("loss weights must be finite and nonnegative")


def _center_root(x: Var, root_index: int) -> Var:
    root = x[:, root_index : root_index + 1, :]
    return tape.add(x, tape.mul(root, -1.0))


def mesh_loss(pred_vertices: Var, gt_vertices: np.ndarray) -> Var:
    return tape.mean_(
        tape.absolute(tape.add(pred_vertices, tape.constant(-gt_vertices)))
    )


def joint_loss(pred_joints: Var, gt_joints: np.ndarray) -> Var:
    d = tape.add(pred_joints, tape.constant(-np.asarray(gt_joints)))
    return tape.mean_(tape.sum_(tape.mul(d, d), axis=2))


def pose_loss(pred_local_quats: list[Var], gt_quats: np.ndarray) -> Var:
    t, j = gt_quats.shape[:2]
    quats = tape.concat([tape.reshape(q, (t, 1, 4)) for q in pred_local_quats], axis=1)
    pred_r = tape.quat_to_mat(tape.reshape(quats, (t * j, 4)))
    gt_r = backend.quat_to_mat(gt_quats.reshape(-1, 4))
    d = tape.add(pred_r, tape.constant(-gt_r))
    return tape.mean_(tape.sum_(tape.mul(d, d), axis=(1, 2)))


def shape_loss(pred_shape: Var, gt_shape: np.ndarray) -> Var:
    d = tape.add(pred_shape, tape.constant(-np.asarray(gt_shape)))
    return tape.sum_(tape.mul(d, d))


def smooth_loss(pred_joints: Var) -> Var:
    t = pred_joints.value.shape[0]
    if t < 3:
        warnings.warn("smoothness term needs at least 3 frames; returning 0")
        return tape.constant(np.float64(0.0))
    d2 = tape.add(
        tape.add(pred_joints[2:], tape.mul(pred_joints[1:-1], -2.0)),
        pred_joints[:-2],
    )
    return tape.mean_(tape.sum_(tape.mul(d2, d2), axis=2))


def total_loss(
    pred_joints: Var,
    pred_vertices: Var,
    pred_local_quats: list[Var],
    pred_shape: Var,
    gt_joints: np.ndarray,
    gt_vertices: np.ndarray,
    gt_quats: np.ndarray,
    gt_shape: np.ndarray,
    weights: LossWeights = LossWeights(),
    root_index: int = 0,
    include_smooth: bool = True,
) -> tuple[Var, dict[str, float]]:
    """Weighted sum of the five terms plus a per-term numeric breakdown.

    Joints and vertices are pelvis-centered on both sides before the mesh,
    joint, and smoothness terms, so the loss supervises articulation
    rather than the root-translation estimate.
    """
    gt_j = np.asarray(gt_joints, dtype=np.float64)
    gt_v = np.asarray(gt_vertices, dtype=np.float64)
    pj = _center_root(pred_joints, root_index)
    gj = gt_j - gt_j[:, root_index : root_index + 1, :]
    pv = tape.add(
        pred_vertices,
        tape.mul(pred_joints[:, root_index : root_index + 1, :], -1.0),
    )
    gv = gt_v - gt_j[:, root_index : root_index + 1, :]

    terms = {
        "mesh": mesh_loss(pv, gv),
        "joint": joint_loss(pj, gj),
        "pose": pose_loss(pred_local_quats, np.asarray(gt_quats)),
        "shape": shape_loss(pred_shape, np.asarray(gt_shape)),
    }
    if include_smooth:
        terms["smooth"] = smooth_loss(pj)
    else:
        terms["smooth"] = tape.constant(np.float64(0.0))
    lam = {
        "mesh": weights.mesh,
        "joint": weights.joint,
        "pose": weights.pose,
        "shape": weights.shape,
        "smooth": weights.smooth,
    }
    total = None
    for name, term in terms.items():
        piece = tape.mul(term, lam[name])
        total = piece if total is None else tape.add(total, piece)
    breakdown = {name: float(term.value) for name, term in terms.items()}
    breakdown["total"] = float(total.value)
    return total, breakdown


# ---------------------------------------------------------------------------
# Procrustes


@dataclass
class ProcrustesTransform:
    scale: float
    rotation: np.ndarray  # (3, 3), det +1
    translation: np.ndarray  # (3,)
    degenerate: bool = False

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * p @ self.rotation.T + self.translation


def procrustes_align(pred, gt) -> tuple[ProcrustesTransform, np.ndarray]:
    """Closed-form similarity alignment of pred onto gt (least squares).

    Reflections are excluded by flipping the sign of the smallest singular
    direction when the raw solution would have det -1. Rank-deficient
    covariances still produce a valid transform but set the degenerate
    flag.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError("pred and gt must both be (J, 3)")
    n = p.shape[0]
    if n < 3:
        raise ValueError("need at least 3 points")
    mu_p = p.mean(axis=0)
    mu_g = g.mean(axis=0)
    x = p - mu_p
    y = g - mu_g
    var_y = float((y**2).sum()) / n
    if var_y <= 0.0:
        raise ValueError("ground truth points are all coincident")
    cov = y.T @ x / n
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        s_fix[-1] = -1.0
    rot = u @ np.diag(s_fix) @ vt
    var_x = float((x**2).sum()) / n
    degenerate = bool(np.sum(d > d[0] * 1.0e-9) < 3) if d[0] > 0.0 else True
    if var_x <= 0.0:
        scale = 1.0
        degenerate = True
    else:
        scale = float((d * s_fix).sum()) / var_x
        if scale <= 0.0:
            scale = np.finfo(np.float64).tiny
    trans = mu_g - scale * rot @ mu_p
    tf = ProcrustesTransform(
        scale=scale, rotation=rot, translation=trans, degenerate=degenerate
    )
    return tf, tf.apply(p)


# ---------------------------------------------------------------------------
# metrics


def mpjpe(pred_seq, gt_seq, root_index: int = 0) -> float:
    """Root-aligned mean joint distance over non-root joints, in mm."""
    return float(per_frame_mpjpe(pred_seq, gt_seq, root_index).mean())


def per_frame_mpjpe(pred_seq, gt_seq, root_index: int = 0) -> np.ndarray:
    p = np.asarray(pred_seq, dtype=np.float64)
    g = np.asarray(gt_seq, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 3:
        raise ValueError("sequences must both be (T, J, 3)")
    pa = p - p[:, root_index : root_index + 1, :]
    ga = g - g[:, root_index : root_index + 1, :]
    dist = np.linalg.norm(pa - ga, axis=2)
    keep = np.ones(p.shape[1], dtype=bool)
    keep[root_index] = False
    return dist[:, keep].mean(axis=1) * 1000.0


def pa_mpjpe(pred_seq, gt_seq) -> float:
    return float(per_frame_pa_mpjpe(pred_seq, gt_seq).mean())


def per_frame_pa_mpjpe(pred_seq, gt_seq) -> np.ndarray:
    p = np.asarray(pred_seq, dtype=np.float64)
    g = np.asarray(gt_seq, dtype=np.float64)
    out = np.empty(p.shape[0])
    for t in range(p.shape[0]):
        _, aligned = procrustes_align(p[t], g[t])
        out[t] = np.linalg.norm(aligned - g[t], axis=1).mean() * 1000.0
    return out


def mpvpe(pred_vertices, gt_vertices, pred_joints, gt_joints, root_index: int = 0) -> float:
    return float(
        per_frame_mpvpe(
            pred_vertices, gt_vertices, pred_joints, gt_joints, root_index
        ).mean()
    )


def per_frame_mpvpe(
    pred_vertices, gt_vertices, pred_joints, gt_joints, root_index: int = 0
) -> np.ndarray:
    pv = np.asarray(pred_vertices, dtype=np.float64)
    gv = np.asarray(gt_vertices, dtype=np.float64)
    pj = np.asarray(pred_joints, dtype=np.float64)
    gj = np.asarray(gt_joints, dtype=np.float64)
    pa = pv - pj[:, root_index : root_index + 1, :]
    ga = gv - gj[:, root_index : root_index + 1, :]
    return np.linalg.norm(pa - ga, axis=2).mean(axis=1) * 1000.0


def accel_error(pred_seq, gt_seq, fps: float) -> float:
    """Mean second-difference discrepancy of absolute joints, mm/s^2."""
    p = np.asarray(pred_seq, dtype=np.float64)
    g = np.asarray(gt_seq, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 3:
        raise ValueError("sequences must both be (T, J, 3)")
    if p.shape[0] < 3:
        raise ValueError("acceleration needs at least 3 frames")
    if fps <= 0.0:
        raise ValueError("fps must be positive")
    ap = (p[2:] - 2.0 * p[1:-1] + p[:-2]) * fps**2
    ag = (g[2:] - 2.0 * g[1:-1] + g[:-2]) * fps**2
    return float(np.linalg.norm(ap - ag, axis=2).mean() * 1000.0)


@dataclass
class MetricReport:
    mpjpe: float
    pa_mpjpe: float
    mpvpe: float
    accel: float
    frames: int
    per_frame_mpjpe: np.ndarray = field(repr=False, default=None)
    per_frame_pa_mpjpe: np.ndarray = field(repr=False, default=None)
    per_frame_mpvpe: np.ndarray = field(repr=False, default=None)

    def as_dict(self) -> dict[str, float]:
        return {
            "mpjpe": self.mpjpe,
            "pa_mpjpe": self.pa_mpjpe,
            "mpvpe": self.mpvpe,
            "accel": self.accel,
        }


def compute_metrics(
    pred_joints,
    pred_vertices,
    gt_joints,
    gt_vertices,
    fps: float,
    root_index: int = 0,
) -> MetricReport:
    pf_m = per_frame_mpjpe(pred_joints, gt_joints, root_index)
    pf_pa = per_frame_pa_mpjpe(pred_joints, gt_joints)
    pf_v = per_frame_mpvpe(
        pred_vertices, gt_vertices, pred_joints, gt_joints, root_index
    )
    return MetricReport(
        mpjpe=float(pf_m.mean()),
        pa_mpjpe=float(pf_pa.mean()),
        mpvpe=float(pf_v.mean()),
        accel=accel_error(pred_joints, gt_joints, fps),
        frames=int(np.asarray(pred_joints).shape[0]),
        per_frame_mpjpe=pf_m,
        per_frame_pa_mpjpe=pf_pa,
        per_frame_mpvpe=pf_v,
    )
