"""Quaternion utilities: canonical forms, axis-angle maps, swing-twist.

Quaternions are float64 arrays (w, x, y, z) and represent rotations by
conjugation, so q and -q act identically; canonicalization picks the
representative with w > 0 (ties broken by the first nonzero vector
component being positive). Single quaternions are shape (4,); the batched
kernels live in dgmr.backend.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend

QUAT_EPS = 1.0e-12


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < QUAT_EPS:
        raise ValueError("cannot normalize a zero-norm quaternion")
    return q / n


def quat_canonical(q) -> np.ndarray:
    """Fix the sign ambiguity: w > 0, ties broken lexicographically."""
    q = quat_normalize(q)
    if q[0] < 0.0:
        return -q
    if q[0] == 0.0:
        for c in q[1:]:
            if c > 0.0:
                return q
            if c < 0.0:
                return -q
    return q


def quat_multiply(a, b) -> np.ndarray:
    out = backend.quat_mul(
        np.asarray(a, dtype=np.float64).reshape(1, 4),
        np.asarray(b, dtype=np.float64).reshape(1, 4),
    )
    return out[0]


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate_vec(q, v) -> np.ndarray:
    out = backend.quat_rotate(
        np.asarray(q, dtype=np.float64).reshape(1, 4),
        np.asarray(v, dtype=np.float64).reshape(1, 3),
    )
    return out[0]


def quat_to_matrix(q) -> np.ndarray:
    return backend.quat_to_mat(np.asarray(q, dtype=np.float64).reshape(1, 4))[0]


def quat_from_matrix(m) -> np.ndarray:
    """Canonical quaternion for a proper rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError("expected a 3x3 matrix")
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [
                0.25 * s,
                (m[2, 1] - m[1, 2]) / s,
                (m[0, 2] - m[2, 0]) / s,
                (m[1, 0] - m[0, 1]) / s,
            ]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [
                (m[2, 1] - m[1, 2]) / s,
                0.25 * s,
                (m[0, 1] + m[1, 0]) / s,
                (m[0, 2] + m[2, 0]) / s,
            ]
        )
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [
                (m[0, 2] - m[2, 0]) / s,
                (m[0, 1] + m[1, 0]) / s,
                0.25 * s,
                (m[1, 2] + m[2, 1]) / s,
            ]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [
                (m[1, 0] - m[0, 1]) / s,
                (m[0, 2] + m[2, 0]) / s,
                (m[1, 2] + m[2, 1]) / s,
                0.25 * s,
            ]
        )
    return quat_canonical(q)


def compose(a, b) -> np.ndarray:
    """Hamilton product, renormalized and sign-canonicalized."""
    return quat_canonical(quat_multiply(a, b))


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if abs(n - 1.0) > 1.0e-9:
        raise ValueError("axis must be unit length")
    half = 0.5 * float(angle)
    q = np.empty(4)
    q[0] = np.cos(half)
    q[1:] = np.sin(half) * axis
    return quat_canonical(q)


def quat_from_rotvec(v) -> np.ndarray:
    """Axis-angle vector (angle * unit axis) to quaternion; zero maps to identity."""
    return backend.aa_to_quat(np.asarray(v, dtype=np.float64).reshape(1, 3))[0]


def quat_to_axis_angle(q) -> tuple[np.ndarray, float]:
    """Canonical axis and angle in [0, pi]. Identity returns the x axis, 0."""
    q = quat_canonical(q)
    s = np.linalg.norm(q[1:])
    if s < QUAT_EPS:
        return np.array([1.0, 0.0, 0.0]), 0.0
    angle = 2.0 * np.arctan2(s, q[0])
    return q[1:] / s, float(angle)


def quat_to_rotvec(q) -> np.ndarray:
    axis, angle = quat_to_axis_angle(q)
    return axis * angle


def random_unit_quat(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1.0e-3:
        q = rng.standard_normal(4)
    return quat_canonical(q)


@dataclass
class SwingTwist:
    """Decomposition q = swing * twist with twist a rotation about axis."""

    swing: np.ndarray
    twist: np.ndarray
    axis: np.ndarray

    @property
    def twist_angle(self) -> float:
        """Signed twist angle in (-pi, pi] about the stored axis."""
        w = float(np.clip(self.twist[0], -1.0, 1.0))
        s = float(np.dot(self.twist[1:], self.axis))
        angle = 2.0 * np.arctan2(s, w)
        if angle > np.pi:
            angle -= 2.0 * np.pi
        if angle <= -np.pi:
            angle += 2.0 * np.pi
        return angle


def swing_twist_decompose(q, axis) -> SwingTwist:
    """Split q into a rotation about ``axis`` (twist) and a remainder (swing).

    The twist is the normalized projection of q onto the axis; when the
    projection vanishes (a pure half-turn perpendicular to the axis) the
    twist is the identity and the swing carries everything.
    """
    q = quat_normalize(q)
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if abs(n - 1.0) > 1.0e-9:
        raise ValueError("axis must be unit length")
    proj = np.dot(q[1:], axis)
    twist = np.array([q[0], proj * axis[0], proj * axis[1], proj * axis[2]])
    tn = np.linalg.norm(twist)
    if tn < 1.0e-9:
        twist = quat_identity()
    else:
        twist = quat_canonical(twist / tn)
    swing = quat_canonical(quat_multiply(q, quat_conjugate(twist)))
    return SwingTwist(swing=swing, twist=twist, axis=axis.copy())


def swing_between(v_from, v_to) -> np.ndarray:
    """Minimal-angle rotation mapping direction v_from onto v_to.

    Inputs need not be unit length but must be nonzero. Antiparallel inputs
    have no unique minimal rotation; the convention here is a half-turn
    about normalize(cross(v_from, e)), where e is the coordinate basis
    vector least aligned with v_from.
    """
    a = np.asarray(v_from, dtype=np.float64)
    b = np.asarray(v_to, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < QUAT_EPS or nb < QUAT_EPS:
        raise ValueError("swing_between requires nonzero directions")
    a = a / na
    b = b / nb
    d = float(np.dot(a, b))
    if d < -1.0 + 1.0e-12:
        e = np.zeros(3)
        e[int(np.argmin(np.abs(a)))] = 1.0
        axis = np.cross(a, e)
        axis = axis / np.linalg.norm(axis)
        return quat_canonical(np.array([0.0, axis[0], axis[1], axis[2]]))
    c = np.cross(a, b)
    q = np.array([1.0 + d, c[0], c[1], c[2]])
    return quat_canonical(q)
