"""Pure numpy implementations of the hot kernels.

These are the reference semantics for the optional compiled extension in
``_kernels.pyx``; both expose the same functions over float64 arrays.
Quaternion rows are ordered (w, x, y, z). Backward functions take the
upstream gradient and return gradients for the differentiable inputs in
argument order.
"""

import numpy as np


def _as2d4(q):
    q = np.ascontiguousarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != 4:
        raise ValueError("expected quaternion array of shape (N, 4)")
    return q


def quat_mul(a, b):
    """Hamilton product of two quaternion batches, shape (N, 4)."""
    a = _as2d4(a)
    b = _as2d4(b)
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    out = np.empty_like(a)
    out[:, 0] = aw * bw - ax * bx - ay * by - az * bz
    out[:, 1] = aw * bx + ax * bw + ay * bz - az * by
    out[:, 2] = aw * by - ax * bz + ay * bw + az * bx
    out[:, 3] = aw * bz + ax * by - ay * bx + az * bw
    return out


def quat_mul_backward(a, b, g):
    a = _as2d4(a)
    b = _as2d4(b)
    g = _as2d4(g)
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    gw, gx, gy, gz = g[:, 0], g[:, 1], g[:, 2], g[:, 3]
    ga = np.empty_like(a)
    gb = np.empty_like(b)
    # d(out)/d(a) is right-multiplication by b; transpose applied to g.
    ga[:, 0] = bw * gw + bx * gx + by * gy + bz * gz
    ga[:, 1] = -bx * gw + bw * gx - bz * gy + by * gz
    ga[:, 2] = -by * gw + bz * gx + bw * gy - bx * gz
    ga[:, 3] = -bz * gw - by * gx + bx * gy + bw * gz
    gb[:, 0] = aw * gw + ax * gx + ay * gy + az * gz
    gb[:, 1] = -ax * gw + aw * gx + az * gy - ay * gz
    gb[:, 2] = -ay * gw - az * gx + aw * gy + ax * gz
    gb[:, 3] = -az * gw + ay * gx - ax * gy + aw * gz
    return ga, gb


def quat_rotate(q, v):
    """Rotate vectors v (N, 3) by quaternions q (N, 4).

    Uses the expanded polynomial form, valid for unit quaternions:
    out = (w^2 - |u|^2) v + 2 (u . v) u + 2 w (u x v), u = (x, y, z).
    """
    q = _as2d4(q)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] != q.shape[0]:
        raise ValueError("expected vectors of shape (N, 3) matching q")
    w = q[:, 0:1]
    u = q[:, 1:4]
    uv = np.cross(u, v)
    udv = np.sum(u * v, axis=1, keepdims=True)
    uu = np.sum(u * u, axis=1, keepdims=True)
    return (w * w - uu) * v + 2.0 * udv * u + 2.0 * w * uv


def quat_rotate_backward(q, v, g):
    q = _as2d4(q)
    v = np.ascontiguousarray(v, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    w = q[:, 0:1]
    u = q[:, 1:4]
    uv = np.cross(u, v)
    udv = np.sum(u * v, axis=1, keepdims=True)
    uu = np.sum(u * u, axis=1, keepdims=True)
    udg = np.sum(u * g, axis=1, keepdims=True)
    vdg = np.sum(v * g, axis=1, keepdims=True)
    gv = (w * w - uu) * g + 2.0 * udg * u + 2.0 * w * np.cross(g, u)
    gq = np.empty_like(q)
    gq[:, 0] = 2.0 * np.sum((w * v + uv) * g, axis=1)
    gq[:, 1:4] = (
        -2.0 * vdg * u + 2.0 * udg * v + 2.0 * udv * g + 2.0 * w * np.cross(v, g)
    )
    return gq, gv


def quat_to_mat(q):
    """Rotation matrices (N, 3, 3) from quaternions (N, 4)."""
    q = _as2d4(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    m[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    m[:, 0, 1] = 2.0 * (x * y - w * z)
    m[:, 0, 2] = 2.0 * (x * z + w * y)
    m[:, 1, 0] = 2.0 * (x * y + w * z)
    m[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    m[:, 1, 2] = 2.0 * (y * z - w * x)
    m[:, 2, 0] = 2.0 * (x * z - w * y)
    m[:, 2, 1] = 2.0 * (y * z + w * x)
    m[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return m


def quat_to_mat_backward(q, g):
    q = _as2d4(q)
    g = np.ascontiguousarray(g, dtype=np.float64)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    gq = np.empty_like(q)
    gq[:, 0] = 2.0 * (
        -z * g[:, 0, 1] + y * g[:, 0, 2]
        + z * g[:, 1, 0] - x * g[:, 1, 2]
        - y * g[:, 2, 0] + x * g[:, 2, 1]
    )
    gq[:, 1] = 2.0 * (
        y * g[:, 0, 1] + z * g[:, 0, 2]
        + y * g[:, 1, 0] - 2.0 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2.0 * x * g[:, 2, 2]
    )
    gq[:, 2] = 2.0 * (
        -2.0 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
        + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2.0 * y * g[:, 2, 2]
    )
    gq[:, 3] = 2.0 * (
        -2.0 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
        + w * g[:, 1, 0] - 2.0 * z * g[:, 1, 1] + y * g[:, 1, 2]
        + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    return gq


_AA_EPS = 1.0e-4


def aa_to_quat(v):
    """Axis-angle rows (N, 3) to unit quaternions (N, 4).

    Small angles use the series expansion of sin(t/2)/t and cos(t/2) so the
    map stays smooth through zero.
    """
    v = np.ascontiguousarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 3:
        raise ValueError("expected axis-angle array of shape (N, 3)")
    t2 = np.sum(v * v, axis=1)
    t = np.sqrt(t2)
    small = t < _AA_EPS
    half = 0.5 * t
    w = np.where(small, 1.0 - t2 / 8.0 + t2 * t2 / 384.0, np.cos(half))
    s = np.where(
        small,
        0.5 - t2 / 48.0 + t2 * t2 / 3840.0,
        np.sin(half) / np.where(small, 1.0, t),
    )
    out = np.empty((v.shape[0], 4), dtype=np.float64)
    out[:, 0] = w
    out[:, 1:4] = s[:, None] * v
    return out


def aa_to_quat_backward(v, g):
    v = np.ascontiguousarray(v, dtype=np.float64)
    g = _as2d4(g)
    t2 = np.sum(v * v, axis=1)
    t = np.sqrt(t2)
    small = t < _AA_EPS
    half = 0.5 * t
    w = np.where(small, 1.0 - t2 / 8.0 + t2 * t2 / 384.0, np.cos(half))
    s = np.where(
        small,
        0.5 - t2 / 48.0 + t2 * t2 / 3840.0,
        np.sin(half) / np.where(small, 1.0, t),
    )
    # c2 = (d s / d t) / t, smooth through zero.
    c2 = np.where(
        small,
        -1.0 / 24.0 + t2 / 960.0,
        (0.5 * w - s) / np.where(small, 1.0, t2),
    )
    gw = g[:, 0]
    gxyz = g[:, 1:4]
    vdg = np.sum(v * gxyz, axis=1)
    gv = (
        s[:, None] * gxyz
        + (c2 * vdg)[:, None] * v
        - (0.5 * s * gw)[:, None] * v
    )
    return gv


def lbs_forward(weights, rel, rot, pos):
    """Linear blend skinning.

    Args:
        weights: (V, J) skinning weights.
        rel: (V, J, 3) rest offsets of each vertex from each joint.
        rot: (T, J, 3, 3) global joint rotations.
        pos: (T, J, 3) global joint positions.

    Returns:
        (T, V, 3) skinned vertices.
    """
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    rel = np.ascontiguousarray(rel, dtype=np.float64)
    rot = np.ascontiguousarray(rot, dtype=np.float64)
    pos = np.ascontiguousarray(pos, dtype=np.float64)
    # (T, V, J, 3) rotated offsets, then weighted sum over joints.
    rotated = np.einsum("tjab,vjb->tvja", rot, rel)
    placed = rotated + pos[:, None, :, :]
    return np.einsum("vj,tvja->tva", weights, placed)


def lbs_backward(weights, rel, rot, g):
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    rel = np.ascontiguousarray(rel, dtype=np.float64)
    rot = np.ascontiguousarray(rot, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    grel = np.einsum("vj,tva,tjab->vjb", weights, g, rot)
    grot = np.einsum("vj,tva,vjb->tjab", weights, g, rel)
    gpos = np.einsum("vj,tva->tja", weights, g)
    return grel, grot, gpos


def attention_forward(q, k, v, scale):
    """Scaled dot-product attention over batched token sets.

    Args:
        q: (B, n, dk) queries.
        k: (B, m, dk) keys.
        v: (B, m, dv) values.
        scale: positive scalar applied to the score matrix.

    Returns:
        (out, attn) with out (B, n, dv) and attn (B, n, m) the row-stochastic
        weights after max-subtracted softmax.
    """
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    scores -= np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / np.sum(e, axis=-1, keepdims=True)
    out = np.matmul(attn, v)
    return out, attn


def attention_backward(q, k, v, attn, scale, g):
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    attn = np.ascontiguousarray(attn, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    gv = np.matmul(np.swapaxes(attn, -1, -2), g)
    gattn = np.matmul(g, np.swapaxes(v, -1, -2))
    # Softmax Jacobian applied row-wise.
    dot = np.sum(gattn * attn, axis=-1, keepdims=True)
    gscores = attn * (gattn - dot)
    gq = np.matmul(gscores, k) * scale
    gk = np.matmul(np.swapaxes(gscores, -1, -2), q) * scale
    return gq, gk, gv


def gauss_maps(cu, cv, inv_two_sigma2, h, w):
    """Gaussian bump maps on a cell grid.

    Args:
        cu: (N,) horizontal centers in cell units.
        cv: (N,) vertical centers in cell units.
        inv_two_sigma2: scalar, 1 / (2 sigma^2) in cell units.
        h, w: grid dimensions.

    Returns:
        (N, h, w) bump values exp(-d^2 / (2 sigma^2)) measured from cell
        centers (row + 0.5, col + 0.5).
    """
    cu = np.ascontiguousarray(cu, dtype=np.float64)
    cv = np.ascontiguousarray(cv, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64) + 0.5
    xs = np.arange(w, dtype=np.float64) + 0.5
    dy = ys[None, :, None] - cv[:, None, None]
    dx = xs[None, None, :] - cu[:, None, None]
    return np.exp(-(dx * dx + dy * dy) * inv_two_sigma2)
