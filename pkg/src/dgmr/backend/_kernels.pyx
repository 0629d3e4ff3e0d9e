# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels mirroring dgmr.backend.kernels_py.

Same function names, argument orders, and float64 semantics as the numpy
reference; parity is enforced by tests/test_backend.py.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, exp, sin, sqrt

cnp.import_array()

DEF AA_EPS = 1.0e-4


cdef inline cnp.ndarray _carr(object a):
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if not arr.flags.writeable:
        arr = arr.copy()  # typed memoryviews refuse read-only buffers
    return arr


cdef inline cnp.ndarray _c2d(object a, int cols, str name):
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if not arr.flags.writeable:
        arr = arr.copy()  # typed memoryviews refuse read-only buffers
    if arr.ndim != 2 or arr.shape[1] != cols:
        raise ValueError("expected %s array of shape (N, %d)" % (name, cols))
    return arr


def quat_mul(object a_in, object b_in):
    cdef double[:, ::1] a = _c2d(a_in, 4, "quaternion")
    cdef double[:, ::1] b = _c2d(b_in, 4, "quaternion")
    cdef Py_ssize_t n = a.shape[0], i
    out_arr = np.empty((n, 4), dtype=np.float64)
    cdef double[:, ::1] o = out_arr
    cdef double aw, ax, ay, az, bw, bx, by, bz
    for i in range(n):
        aw = a[i, 0]; ax = a[i, 1]; ay = a[i, 2]; az = a[i, 3]
        bw = b[i, 0]; bx = b[i, 1]; by = b[i, 2]; bz = b[i, 3]
        o[i, 0] = aw * bw - ax * bx - ay * by - az * bz
        o[i, 1] = aw * bx + ax * bw + ay * bz - az * by
        o[i, 2] = aw * by - ax * bz + ay * bw + az * bx
        o[i, 3] = aw * bz + ax * by - ay * bx + az * bw
    return out_arr


def quat_mul_backward(object a_in, object b_in, object g_in):
    cdef double[:, ::1] a = _c2d(a_in, 4, "quaternion")
    cdef double[:, ::1] b = _c2d(b_in, 4, "quaternion")
    cdef double[:, ::1] g = _c2d(g_in, 4, "gradient")
    cdef Py_ssize_t n = a.shape[0], i
    ga_arr = np.empty((n, 4), dtype=np.float64)
    gb_arr = np.empty((n, 4), dtype=np.float64)
    cdef double[:, ::1] ga = ga_arr
    cdef double[:, ::1] gb = gb_arr
    cdef double aw, ax, ay, az, bw, bx, by, bz, gw, gx, gy, gz
    for i in range(n):
        aw = a[i, 0]; ax = a[i, 1]; ay = a[i, 2]; az = a[i, 3]
        bw = b[i, 0]; bx = b[i, 1]; by = b[i, 2]; bz = b[i, 3]
        gw = g[i, 0]; gx = g[i, 1]; gy = g[i, 2]; gz = g[i, 3]
        ga[i, 0] = bw * gw + bx * gx + by * gy + bz * gz
        ga[i, 1] = -bx * gw + bw * gx - bz * gy + by * gz
        ga[i, 2] = -by * gw + bz * gx + bw * gy - bx * gz
        ga[i, 3] = -bz * gw - by * gx + bx * gy + bw * gz
        gb[i, 0] = aw * gw + ax * gx + ay * gy + az * gz
        gb[i, 1] = -ax * gw + aw * gx + az * gy - ay * gz
        gb[i, 2] = -ay * gw - az * gx + aw * gy + ax * gz
        gb[i, 3] = -az * gw + ay * gx - ax * gy + aw * gz
    return ga_arr, gb_arr


def quat_rotate(object q_in, object v_in):
    cdef double[:, ::1] q = _c2d(q_in, 4, "quaternion")
    cdef double[:, ::1] v = _c2d(v_in, 3, "vector")
    if v.shape[0] != q.shape[0]:
        raise ValueError("expected vectors of shape (N, 3) matching q")
    cdef Py_ssize_t n = q.shape[0], i
    out_arr = np.empty((n, 3), dtype=np.float64)
    cdef double[:, ::1] o = out_arr
    cdef double w, ux, uy, uz, vx, vy, vz, udv, ww_uu, cx, cy, cz
    for i in range(n):
        w = q[i, 0]; ux = q[i, 1]; uy = q[i, 2]; uz = q[i, 3]
        vx = v[i, 0]; vy = v[i, 1]; vz = v[i, 2]
        udv = ux * vx + uy * vy + uz * vz
        ww_uu = w * w - (ux * ux + uy * uy + uz * uz)
        cx = uy * vz - uz * vy
        cy = uz * vx - ux * vz
        cz = ux * vy - uy * vx
        o[i, 0] = ww_uu * vx + 2.0 * udv * ux + 2.0 * w * cx
        o[i, 1] = ww_uu * vy + 2.0 * udv * uy + 2.0 * w * cy
        o[i, 2] = ww_uu * vz + 2.0 * udv * uz + 2.0 * w * cz
    return out_arr


def quat_rotate_backward(object q_in, object v_in, object g_in):
    cdef double[:, ::1] q = _c2d(q_in, 4, "quaternion")
    cdef double[:, ::1] v = _c2d(v_in, 3, "vector")
    cdef double[:, ::1] g = _c2d(g_in, 3, "gradient")
    cdef Py_ssize_t n = q.shape[0], i
    gq_arr = np.empty((n, 4), dtype=np.float64)
    gv_arr = np.empty((n, 3), dtype=np.float64)
    cdef double[:, ::1] gq = gq_arr
    cdef double[:, ::1] gv = gv_arr
    cdef double w, ux, uy, uz, vx, vy, vz, gx, gy, gz
    cdef double udv, udg, vdg, ww_uu, cx, cy, cz, vxg_x, vxg_y, vxg_z
    cdef double gxu_x, gxu_y, gxu_z
    for i in range(n):
        w = q[i, 0]; ux = q[i, 1]; uy = q[i, 2]; uz = q[i, 3]
        vx = v[i, 0]; vy = v[i, 1]; vz = v[i, 2]
        gx = g[i, 0]; gy = g[i, 1]; gz = g[i, 2]
        udv = ux * vx + uy * vy + uz * vz
        udg = ux * gx + uy * gy + uz * gz
        vdg = vx * gx + vy * gy + vz * gz
        ww_uu = w * w - (ux * ux + uy * uy + uz * uz)
        cx = uy * vz - uz * vy
        cy = uz * vx - ux * vz
        cz = ux * vy - uy * vx
        vxg_x = vy * gz - vz * gy
        vxg_y = vz * gx - vx * gz
        vxg_z = vx * gy - vy * gx
        gxu_x = gy * uz - gz * uy
        gxu_y = gz * ux - gx * uz
        gxu_z = gx * uy - gy * ux
        gv[i, 0] = ww_uu * gx + 2.0 * udg * ux + 2.0 * w * gxu_x
        gv[i, 1] = ww_uu * gy + 2.0 * udg * uy + 2.0 * w * gxu_y
        gv[i, 2] = ww_uu * gz + 2.0 * udg * uz + 2.0 * w * gxu_z
        gq[i, 0] = 2.0 * (
            (w * vx + cx) * gx + (w * vy + cy) * gy + (w * vz + cz) * gz
        )
        gq[i, 1] = -2.0 * vdg * ux + 2.0 * udg * vx + 2.0 * udv * gx + 2.0 * w * vxg_x
        gq[i, 2] = -2.0 * vdg * uy + 2.0 * udg * vy + 2.0 * udv * gy + 2.0 * w * vxg_y
        gq[i, 3] = -2.0 * vdg * uz + 2.0 * udg * vz + 2.0 * udv * gz + 2.0 * w * vxg_z
    return gq_arr, gv_arr


def quat_to_mat(object q_in):
    cdef double[:, ::1] q = _c2d(q_in, 4, "quaternion")
    cdef Py_ssize_t n = q.shape[0], i
    out_arr = np.empty((n, 3, 3), dtype=np.float64)
    cdef double[:, :, ::1] m = out_arr
    cdef double w, x, y, z
    for i in range(n):
        w = q[i, 0]; x = q[i, 1]; y = q[i, 2]; z = q[i, 3]
        m[i, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
        m[i, 0, 1] = 2.0 * (x * y - w * z)
        m[i, 0, 2] = 2.0 * (x * z + w * y)
        m[i, 1, 0] = 2.0 * (x * y + w * z)
        m[i, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
        m[i, 1, 2] = 2.0 * (y * z - w * x)
        m[i, 2, 0] = 2.0 * (x * z - w * y)
        m[i, 2, 1] = 2.0 * (y * z + w * x)
        m[i, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out_arr


def quat_to_mat_backward(object q_in, object g_in):
    cdef double[:, ::1] q = _c2d(q_in, 4, "quaternion")
    g_arr = _carr(g_in)
    if g_arr.ndim != 3 or g_arr.shape[1] != 3 or g_arr.shape[2] != 3:
        raise ValueError("expected gradient array of shape (N, 3, 3)")
    cdef double[:, :, ::1] g = g_arr
    cdef Py_ssize_t n = q.shape[0], i
    gq_arr = np.empty((n, 4), dtype=np.float64)
    cdef double[:, ::1] gq = gq_arr
    cdef double w, x, y, z
    for i in range(n):
        w = q[i, 0]; x = q[i, 1]; y = q[i, 2]; z = q[i, 3]
        gq[i, 0] = 2.0 * (
            -z * g[i, 0, 1] + y * g[i, 0, 2]
            + z * g[i, 1, 0] - x * g[i, 1, 2]
            - y * g[i, 2, 0] + x * g[i, 2, 1]
        )
        gq[i, 1] = 2.0 * (
            y * g[i, 0, 1] + z * g[i, 0, 2]
            + y * g[i, 1, 0] - 2.0 * x * g[i, 1, 1] - w * g[i, 1, 2]
            + z * g[i, 2, 0] + w * g[i, 2, 1] - 2.0 * x * g[i, 2, 2]
        )
        gq[i, 2] = 2.0 * (
            -2.0 * y * g[i, 0, 0] + x * g[i, 0, 1] + w * g[i, 0, 2]
            + x * g[i, 1, 0] + z * g[i, 1, 2]
            - w * g[i, 2, 0] + z * g[i, 2, 1] - 2.0 * y * g[i, 2, 2]
        )
        gq[i, 3] = 2.0 * (
            -2.0 * z * g[i, 0, 0] - w * g[i, 0, 1] + x * g[i, 0, 2]
            + w * g[i, 1, 0] - 2.0 * z * g[i, 1, 1] + y * g[i, 1, 2]
            + x * g[i, 2, 0] + y * g[i, 2, 1]
        )
    return gq_arr


def aa_to_quat(object v_in):
    cdef double[:, ::1] v = _c2d(v_in, 3, "axis-angle")
    cdef Py_ssize_t n = v.shape[0], i
    out_arr = np.empty((n, 4), dtype=np.float64)
    cdef double[:, ::1] o = out_arr
    cdef double t2, t, w, s
    for i in range(n):
        t2 = v[i, 0] * v[i, 0] + v[i, 1] * v[i, 1] + v[i, 2] * v[i, 2]
        t = sqrt(t2)
        if t < AA_EPS:
            w = 1.0 - t2 / 8.0 + t2 * t2 / 384.0
            s = 0.5 - t2 / 48.0 + t2 * t2 / 3840.0
        else:
            w = cos(0.5 * t)
            s = sin(0.5 * t) / t
        o[i, 0] = w
        o[i, 1] = s * v[i, 0]
        o[i, 2] = s * v[i, 1]
        o[i, 3] = s * v[i, 2]
    return out_arr


def aa_to_quat_backward(object v_in, object g_in):
    cdef double[:, ::1] v = _c2d(v_in, 3, "axis-angle")
    cdef double[:, ::1] g = _c2d(g_in, 4, "gradient")
    cdef Py_ssize_t n = v.shape[0], i
    gv_arr = np.empty((n, 3), dtype=np.float64)
    cdef double[:, ::1] gv = gv_arr
    cdef double t2, t, w, s, c2, gw, vdg, coef
    for i in range(n):
        t2 = v[i, 0] * v[i, 0] + v[i, 1] * v[i, 1] + v[i, 2] * v[i, 2]
        t = sqrt(t2)
        if t < AA_EPS:
            w = 1.0 - t2 / 8.0 + t2 * t2 / 384.0
            s = 0.5 - t2 / 48.0 + t2 * t2 / 3840.0
            c2 = -1.0 / 24.0 + t2 / 960.0
        else:
            w = cos(0.5 * t)
            s = sin(0.5 * t) / t
            c2 = (0.5 * w - s) / t2
        gw = g[i, 0]
        vdg = v[i, 0] * g[i, 1] + v[i, 1] * g[i, 2] + v[i, 2] * g[i, 3]
        coef = c2 * vdg - 0.5 * s * gw
        gv[i, 0] = s * g[i, 1] + coef * v[i, 0]
        gv[i, 1] = s * g[i, 2] + coef * v[i, 1]
        gv[i, 2] = s * g[i, 3] + coef * v[i, 2]
    return gv_arr


def lbs_forward(object weights_in, object rel_in, object rot_in, object pos_in):
    w_arr = _carr(weights_in)
    rel_arr = _carr(rel_in)
    rot_arr = _carr(rot_in)
    pos_arr = _carr(pos_in)
    cdef double[:, ::1] w = w_arr
    cdef double[:, :, ::1] rel = rel_arr
    cdef double[:, :, :, ::1] rot = rot_arr
    cdef double[:, :, ::1] pos = pos_arr
    cdef Py_ssize_t nv = w.shape[0], nj = w.shape[1], nt = rot.shape[0]
    cdef Py_ssize_t t, vi, j
    out_arr = np.zeros((nt, nv, 3), dtype=np.float64)
    cdef double[:, :, ::1] o = out_arr
    cdef double wj, rx, ry, rz, px, py, pz
    for t in range(nt):
        for vi in range(nv):
            for j in range(nj):
                wj = w[vi, j]
                if wj == 0.0:
                    continue
                rx = rel[vi, j, 0]; ry = rel[vi, j, 1]; rz = rel[vi, j, 2]
                px = rot[t, j, 0, 0] * rx + rot[t, j, 0, 1] * ry + rot[t, j, 0, 2] * rz
                py = rot[t, j, 1, 0] * rx + rot[t, j, 1, 1] * ry + rot[t, j, 1, 2] * rz
                pz = rot[t, j, 2, 0] * rx + rot[t, j, 2, 1] * ry + rot[t, j, 2, 2] * rz
                o[t, vi, 0] += wj * (px + pos[t, j, 0])
                o[t, vi, 1] += wj * (py + pos[t, j, 1])
                o[t, vi, 2] += wj * (pz + pos[t, j, 2])
    return out_arr


def lbs_backward(object weights_in, object rel_in, object rot_in, object g_in):
    w_arr = _carr(weights_in)
    rel_arr = _carr(rel_in)
    rot_arr = _carr(rot_in)
    g_arr = _carr(g_in)
    cdef double[:, ::1] w = w_arr
    cdef double[:, :, ::1] rel = rel_arr
    cdef double[:, :, :, ::1] rot = rot_arr
    cdef double[:, :, ::1] g = g_arr
    cdef Py_ssize_t nv = w.shape[0], nj = w.shape[1], nt = g.shape[0]
    cdef Py_ssize_t t, vi, j, a
    grel_arr = np.zeros((nv, nj, 3), dtype=np.float64)
    grot_arr = np.zeros((nt, nj, 3, 3), dtype=np.float64)
    gpos_arr = np.zeros((nt, nj, 3), dtype=np.float64)
    cdef double[:, :, ::1] grel = grel_arr
    cdef double[:, :, :, ::1] grot = grot_arr
    cdef double[:, :, ::1] gpos = gpos_arr
    cdef double wj, ga
    for t in range(nt):
        for vi in range(nv):
            for j in range(nj):
                wj = w[vi, j]
                if wj == 0.0:
                    continue
                for a in range(3):
                    ga = wj * g[t, vi, a]
                    grot[t, j, a, 0] += ga * rel[vi, j, 0]
                    grot[t, j, a, 1] += ga * rel[vi, j, 1]
                    grot[t, j, a, 2] += ga * rel[vi, j, 2]
                    grel[vi, j, 0] += ga * rot[t, j, a, 0]
                    grel[vi, j, 1] += ga * rot[t, j, a, 1]
                    grel[vi, j, 2] += ga * rot[t, j, a, 2]
                    gpos[t, j, a] += ga
    return grel_arr, grot_arr, gpos_arr


def attention_forward(object q_in, object k_in, object v_in, double scale):
    q_arr = _carr(q_in)
    k_arr = _carr(k_in)
    v_arr = _carr(v_in)
    cdef double[:, :, ::1] q = q_arr
    cdef double[:, :, ::1] k = k_arr
    cdef double[:, :, ::1] v = v_arr
    cdef Py_ssize_t nb = q.shape[0], n = q.shape[1], dk = q.shape[2]
    cdef Py_ssize_t m = k.shape[1], dv = v.shape[2]
    cdef Py_ssize_t b, i, j, d
    out_arr = np.zeros((nb, n, dv), dtype=np.float64)
    attn_arr = np.empty((nb, n, m), dtype=np.float64)
    cdef double[:, :, ::1] o = out_arr
    cdef double[:, :, ::1] attn = attn_arr
    cdef double s, mx, tot, a
    for b in range(nb):
        for i in range(n):
            mx = -np.inf
            for j in range(m):
                s = 0.0
                for d in range(dk):
                    s += q[b, i, d] * k[b, j, d]
                s *= scale
                attn[b, i, j] = s
                if s > mx:
                    mx = s
            tot = 0.0
            for j in range(m):
                a = exp(attn[b, i, j] - mx)
                attn[b, i, j] = a
                tot += a
            for j in range(m):
                a = attn[b, i, j] / tot
                attn[b, i, j] = a
                for d in range(dv):
                    o[b, i, d] += a * v[b, j, d]
    return out_arr, attn_arr


def attention_backward(object q_in, object k_in, object v_in,
                       object attn_in, double scale, object g_in):
    q_arr = _carr(q_in)
    k_arr = _carr(k_in)
    v_arr = _carr(v_in)
    attn_arr = _carr(attn_in)
    g_arr = _carr(g_in)
    cdef double[:, :, ::1] q = q_arr
    cdef double[:, :, ::1] k = k_arr
    cdef double[:, :, ::1] v = v_arr
    cdef double[:, :, ::1] attn = attn_arr
    cdef double[:, :, ::1] g = g_arr
    cdef Py_ssize_t nb = q.shape[0], n = q.shape[1], dk = q.shape[2]
    cdef Py_ssize_t m = k.shape[1], dv = v.shape[2]
    cdef Py_ssize_t b, i, j, d
    gq_arr = np.zeros((nb, n, dk), dtype=np.float64)
    gk_arr = np.zeros((nb, m, dk), dtype=np.float64)
    gv_arr = np.zeros((nb, m, dv), dtype=np.float64)
    cdef double[:, :, ::1] gq = gq_arr
    cdef double[:, :, ::1] gk = gk_arr
    cdef double[:, :, ::1] gv = gv_arr
    cdef double ga, dot, gs
    for b in range(nb):
        for i in range(n):
            dot = 0.0
            for j in range(m):
                ga = 0.0
                for d in range(dv):
                    ga += g[b, i, d] * v[b, j, d]
                    gv[b, j, d] += attn[b, i, j] * g[b, i, d]
                dot += ga * attn[b, i, j]
                # stash raw d(out)/d(attn) in gk row temp? use recompute below
            for j in range(m):
                ga = 0.0
                for d in range(dv):
                    ga += g[b, i, d] * v[b, j, d]
                gs = attn[b, i, j] * (ga - dot) * scale
                for d in range(dk):
                    gq[b, i, d] += gs * k[b, j, d]
                    gk[b, j, d] += gs * q[b, i, d]
    return gq_arr, gk_arr, gv_arr


def gauss_maps(object cu_in, object cv_in, double inv_two_sigma2,
               Py_ssize_t h, Py_ssize_t w):
    cu_arr = _carr(cu_in)
    cv_arr = _carr(cv_in)
    cdef double[::1] cu = cu_arr
    cdef double[::1] cv = cv_arr
    cdef Py_ssize_t n = cu.shape[0], i, r, c
    out_arr = np.empty((n, h, w), dtype=np.float64)
    cdef double[:, :, ::1] o = out_arr
    cdef double dy, dx
    for i in range(n):
        for r in range(h):
            dy = (r + 0.5) - cv[i]
            for c in range(w):
                dx = (c + 0.5) - cu[i]
                o[i, r, c] = exp(-(dx * dx + dy * dy) * inv_two_sigma2)
    return out_arr
