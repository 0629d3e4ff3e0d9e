"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Criteria:
  A1  gradient correctness of every learned block (rel err < 1e-4)
  A2  scalar brute-force oracles for the fusion, calibration, and
      refinement equations (1e-12; 1e-9 for attention contexts)
  A3  Procrustes optimality vs a rotation-grid oracle; pa <= mpjpe
  A4  ablation direction on the default benchmark (complete beats
      RGB-only by >= 10% and both single-module controls)
  A5  sequence-length trend (T=32 no worse than T=8, low noise)
  A6  metric calibration recovery and occlusion-gate stability
  A7  structural invariants and CLI determinism
"""

import io
import json
import math
import time
from contextlib import redirect_stdout
from dataclasses import replace

import numpy as np
import yaml

from conftest import record_acceptance
from dgmr.body import (
    apply_shape,
    bone_lengths,
    build_template,
    fk_numpy,
    shaped_bone_lengths,
)
from dgmr.cli import main as cli_main
from dgmr.dmaps import (
    MotionTokens,
    calibrate,
    init_dmaps,
    init_pose,
    init_shape,
    motion_tokens_from_observations,
)
from dgmr.fusion import init_fusion, fuse
from dgmr.metrics import mpjpe, pa_mpjpe, procrustes_align
from dgmr.modar import build_context, causal_filter, init_modar, refine, residuals
from dgmr.model import ModelConfig
from dgmr.numerics import tape
from dgmr.numerics.gradcheck import grad_check
from dgmr.pipeline import RunConfig, TrainSchedule, config_to_dict, train
from dgmr.rotation import (
    quat_multiply,
    random_unit_quat,
    swing_twist_decompose,
)
from dgmr.synth import (
    TRAIN_SPLIT,
    CameraModel,
    DataConfig,
    OcclusionSpec,
    gen_motion,
    make_sample,
    render_features,
)


def _report(name: str, ok: bool, detail: str) -> None:
    record_acceptance("%s: %s (%s)" % (name, "PASS" if ok else "FAIL", detail))
    assert ok, "%s failed: %s" % (name, detail)


def _randn_like(rng, var, scale=0.4):
    var.value = rng.normal(size=var.value.shape) * scale


# ---------------------------------------------------------------------------
# A1: gradient correctness of every learned block


def _layer_params(name, layer):
    return [(name + ".weight", layer.weight), (name + ".bias", layer.bias)]


def _check_fusion_block(rng):
    params = init_fusion(rng, channels=3, levels=1)
    lvl = params.levels[0]
    named = []
    for nm in ("depth_embed", "mask_hidden", "mask_out",
               "gate_hidden", "gate_out", "project"):
        layer = getattr(lvl, nm)
        _randn_like(rng, layer.weight)
        _randn_like(rng, layer.bias, 0.1)
        named += _layer_params("fusion." + nm, layer)
    rgb = rng.normal(size=(2, 4, 4, 3))
    depth = rng.normal(size=(2, 2, 2, 3))
    p1 = rng.normal(size=(2, 4, 4, 3))
    p2 = rng.normal(size=(2, 4, 4, 3))
    p3 = rng.normal(size=(2, 6))

    def fn():
        res = fuse(params, rgb, depth)
        loss = tape.sum_(tape.mul(res.fused, p1))
        loss = tape.add(loss, tape.sum_(tape.mul(res.mask, p2)))
        return tape.add(loss, tape.sum_(tape.mul(res.gates, p3)))

    return fn, named


def _check_twist_block(rng, template):
    params = init_dmaps(rng, template, channels=4, hidden=6, attn_dim=5)
    _randn_like(rng, params.twist_out.weight)
    _randn_like(rng, params.attn_out.weight, 0.2)
    named = (
        _layer_params("dmaps.twist_hidden", params.twist_hidden)
        + _layer_params("dmaps.twist_out", params.twist_out)
        + _layer_params("dmaps.attn_q", params.attn_q)
        + _layer_params("dmaps.attn_k", params.attn_k)
        + _layer_params("dmaps.attn_v", params.attn_v)
        + _layer_params("dmaps.attn_out", params.attn_out)
    )
    t, j = 2, template.joint_count
    joints = rng.normal(size=(t, j, 3)) * 0.4 + template.rest_joints[None]
    joints -= joints[:, 0:1]
    motion = MotionTokens(joints=joints, keypoints=rng.random(size=(t, j, 2)))
    fused = tape.constant(rng.normal(size=(t, 3, 3, 4)))
    d_embed = tape.constant(rng.normal(size=(t, 3, 3, 4)))
    pj = [rng.normal(size=(t, 4)) for _ in range(j)]
    pt = rng.normal(size=(t, j))

    def fn():
        pose, _, theta = init_pose(params, template, motion, fused, d_embed)
        loss = tape.sum_(tape.mul(theta, pt))
        for q, p in zip(pose, pj):
            loss = tape.add(loss, tape.sum_(tape.mul(q, p)))
        return loss

    return fn, named


def _check_shape_block(rng, template):
    params = init_dmaps(rng, template, channels=4, hidden=6, attn_dim=5)
    named = _layer_params("dmaps.shape_head", params.shape_head) + [
        ("dmaps.eta", params.eta)
    ]
    t, j = 5, template.joint_count
    joints = rng.normal(size=(t, j, 3)) * 0.3 + template.rest_joints[None]
    joints -= joints[:, 0:1]
    motion = MotionTokens(joints=joints, keypoints=rng.random(size=(t, j, 2)))
    conf = rng.random(size=(t, 3, 3)) * 0.8 + 0.1
    mask = np.ones((t, 3, 3))
    p_b = rng.normal(size=template.rest_bone_lengths.shape)
    p_s = rng.normal(size=template.shape_dim)

    def fn():
        cal = calibrate(template, motion, conf, mask, params.eta)
        shape = init_shape(params, cal.b_z, cal.b_bar)
        return tape.add(
            tape.sum_(tape.mul(cal.b_z, p_b)), tape.sum_(tape.mul(shape, p_s))
        )

    return fn, named


def _check_modar_attention_block(rng):
    params = init_modar(rng, joint_count=2, shape_dim=1, channels=3,
                        dim=6, attn_dim=4, ffn_dim=5)
    named = _layer_params("modar.embed", params.embed)
    for bi, blk in enumerate(params.blocks):
        _randn_like(rng, blk.wo.weight, 0.3)
        _randn_like(rng, blk.ff2.weight, 0.3)
        pre = "modar.block%d." % bi
        named += (
            _layer_params(pre + "wq", blk.wq)
            + _layer_params(pre + "wk", blk.wk)
            + _layer_params(pre + "wv", blk.wv)
            + _layer_params(pre + "wo", blk.wo)
            + _layer_params(pre + "ff1", blk.ff1)
            + _layer_params(pre + "ff2", blk.ff2)
            + [(pre + "norm_in.gain", blk.norm_in.gain),
               (pre + "norm_in.offset", blk.norm_in.offset),
               (pre + "norm_ff.gain", blk.norm_ff.gain),
               (pre + "norm_ff.offset", blk.norm_ff.offset)]
        )
        if blk.wk_m is not None:
            named += _layer_params(pre + "wk_m", blk.wk_m)
            named += _layer_params(pre + "wv_m", blk.wv_m)
    named += [("modar.final_norm.gain", params.final_norm.gain),
              ("modar.final_norm.offset", params.final_norm.offset)]
    t = 2
    joints = rng.normal(size=(t, 2, 3))
    joints[:, 0] = 0.0
    motion = MotionTokens(joints=joints, keypoints=rng.random(size=(t, 2, 2)))
    fused = tape.constant(rng.normal(size=(t, 2, 2, 3)))
    p = rng.normal(size=(t, 6))

    def fn():
        return tape.sum_(tape.mul(build_context(params, motion, fused), p))

    return fn, named


def _check_residual_block(rng):
    params = init_modar(rng, joint_count=3, shape_dim=2, channels=3,
                        dim=6, attn_dim=4, ffn_dim=5)
    _randn_like(rng, params.delta_head.weight)
    _randn_like(rng, params.delta_head.bias, 0.1)
    _randn_like(rng, params.gate.weight)
    named = (
        _layer_params("modar.delta_head", params.delta_head)
        + _layer_params("modar.gate", params.gate)
        + [("modar.rho_logit", params.rho_logit)]
    )
    t, nx = 4, 3 * 3 + 2
    context = tape.constant(rng.normal(size=(t, 6)))
    x0 = tape.constant(rng.normal(size=(t, nx)))
    p = rng.normal(size=(t, nx))

    def fn():
        gated, _ = residuals(params, context, 3)
        x = causal_filter(x0, gated, tape.sigmoid(params.rho_logit))
        return tape.sum_(tape.mul(x, p))

    return fn, named


def test_A1_gradient_correctness():
    t0 = time.time()
    template = build_template()
    blocks = {
        "fusion": lambda rng: _check_fusion_block(rng),
        "twist+attention": lambda rng: _check_twist_block(rng, template),
        "shape+eta": lambda rng: _check_shape_block(rng, template),
        "modar-attention": lambda rng: _check_modar_attention_block(rng),
        "residual+gate+rho": lambda rng: _check_residual_block(rng),
    }
    worst = 0.0
    worst_name = ""
    checked = 0
    for bi, (name, build) in enumerate(blocks.items()):
        for i in range(10):
            rng = np.random.default_rng((bi, i))
            fn, named = build(rng)
            report = grad_check(fn, named, max_entries_per_param=10, rng=rng)
            checked += report.checked
            if report.max_rel_error > worst:
                worst = report.max_rel_error
                worst_name = "%s/%s" % (name, report.worst.param)
    elapsed = time.time() - t0
    ok = worst < 1e-4 and elapsed < 120.0
    _report(
        "A1 gradient-correctness",
        ok,
        "max rel err %.2e at %s over %d entries, %.1fs"
        % (worst, worst_name, checked, elapsed),
    )


# ---------------------------------------------------------------------------
# A2: scalar brute-force equation oracles


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def _lin(layer, x):
    w, b = layer.weight.value, layer.bias.value
    return [
        sum(w[o][k] * x[k] for k in range(len(x))) + b[o]
        for o in range(w.shape[0])
    ]


def _relu_list(v):
    return [u if u > 0.0 else 0.0 for u in v]


def _sig_list(v):
    return [_sig(u) for u in v]


def _norm_list(v, gain, offset, eps=1.0e-5):
    mu = sum(v) / len(v)
    var = sum((u - mu) ** 2 for u in v) / len(v)
    inv = 1.0 / math.sqrt(var + eps)
    return [gain[i] * (v[i] - mu) * inv + offset[i] for i in range(len(v))]


def _fusion_scalar(lvl, rgb, depth):
    t, h, w, c = rgb.shape
    dh = depth.shape[1]
    f = h // dh
    out = np.empty_like(rgb)
    for tt in range(t):
        emb = [[_lin(lvl.depth_embed, depth[tt, rr, cc])
                for cc in range(depth.shape[2])] for rr in range(dh)]
        cell_emb = [[emb[rr // f][cc // f] for cc in range(w)] for rr in range(h)]
        mask = [[_sig_list(_lin(lvl.mask_out,
                                _relu_list(_lin(lvl.mask_hidden,
                                                cell_emb[rr][cc]))))
                 for cc in range(w)] for rr in range(h)]
        pooled = []
        for ch in range(c):
            pooled.append(sum(mask[rr][cc][ch] * rgb[tt, rr, cc, ch]
                              for rr in range(h) for cc in range(w)) / (h * w))
        for ch in range(c):
            pooled.append(sum(cell_emb[rr][cc][ch]
                              for rr in range(h) for cc in range(w)) / (h * w))
        gates = _sig_list(_lin(lvl.gate_out,
                               _relu_list(_lin(lvl.gate_hidden, pooled))))
        for rr in range(h):
            for cc in range(w):
                gated = [gates[ch] * mask[rr][cc][ch] * rgb[tt, rr, cc, ch]
                         for ch in range(c)]
                gated += [gates[c + ch] * cell_emb[rr][cc][ch]
                          for ch in range(c)]
                out[tt, rr, cc] = _lin(lvl.project, gated)
    return out


def _calibration_scalar(joints, parents, b_bar, m_bar, eta):
    t = joints.shape[0]
    bones = [(child, parents[child]) for child in range(1, len(parents))]
    wts = [_sig(eta * m) for m in m_bar]
    alpha = _sig(eta * (sum(m_bar) / t))
    b_tilde = []
    for child, parent in bones:
        num = 0.0
        for tt in range(t):
            d = joints[tt, child] - joints[tt, parent]
            num += wts[tt] * math.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
        b_tilde.append(num / sum(wts))
    b_z = [
        bb + (bt - bb) * alpha if bt > 0.0 else bb
        for bt, bb in zip(b_tilde, b_bar)
    ]
    return np.array(b_tilde), np.array(b_z), alpha


def _context_scalar(params, tokens_in, fused):
    t, h, w, c = fused.shape
    xs = [_lin(params.embed, tokens_in[tt]) for tt in range(t)]
    for blk in params.blocks:
        dim = blk.wq.n_out
        scale = 1.0 / math.sqrt(dim)
        nxt = []
        for tt in range(t):
            xn = _norm_list(xs[tt], blk.norm_in.gain.value,
                            blk.norm_in.offset.value)
            q = _lin(blk.wq, xn)
            cells = [fused[tt, rr, cc] for rr in range(h) for cc in range(w)]
            ks = [_lin(blk.wk, cell) for cell in cells]
            vs = [_lin(blk.wv, cell) for cell in cells]
            if blk.wk_m is not None:
                ks.append(_lin(blk.wk_m, xn))
                vs.append(_lin(blk.wv_m, xn))
            scores = [sum(q[d] * k[d] for d in range(dim)) * scale for k in ks]
            mx = max(scores)
            es = [math.exp(s - mx) for s in scores]
            z = sum(es)
            att = [
                sum(es[i] * vs[i][d] for i in range(len(vs))) / z
                for d in range(dim)
            ]
            x = [xs[tt][i] + o for i, o in enumerate(_lin(blk.wo, att))]
            fn = _norm_list(x, blk.norm_ff.gain.value, blk.norm_ff.offset.value)
            ff = _lin(blk.ff2, _relu_list(_lin(blk.ff1, fn)))
            nxt.append([x[i] + ff[i] for i in range(len(x))])
        xs = nxt
    return np.array([
        _norm_list(x, params.final_norm.gain.value, params.final_norm.offset.value)
        for x in xs
    ])


def test_A2_equation_oracles():
    t0 = time.time()
    worst_fusion = worst_cal = worst_filter = worst_ctx = 0.0
    n = 1000

    for i in range(n):
        rng = np.random.default_rng((2, i))
        params = init_fusion(rng, channels=2, levels=1)
        lvl = params.levels[0]
        for nm in ("depth_embed", "mask_hidden", "mask_out",
                   "gate_hidden", "gate_out", "project"):
            layer = getattr(lvl, nm)
            _randn_like(rng, layer.weight, 0.6)
            _randn_like(rng, layer.bias, 0.2)
        t_n, h_n = int(rng.integers(1, 4)), int(rng.choice([2, 4]))
        dh = h_n if rng.random() < 0.5 else h_n // 2
        dh = max(dh, 1)
        rgb = rng.normal(size=(t_n, h_n, h_n, 2))
        depth = rng.normal(size=(t_n, dh, dh, 2))
        got = fuse(params, rgb, depth).fused.value
        want = _fusion_scalar(lvl, rgb, depth)
        worst_fusion = max(worst_fusion, float(np.max(np.abs(got - want))))

    template = build_template()
    for i in range(n):
        rng = np.random.default_rng((34, i))
        t_n = int(rng.integers(2, 9))
        b_n = int(rng.integers(2, 16))
        parents = np.array([-1] + [int(rng.integers(0, j)) for j in range(1, b_n + 1)])
        joints = rng.normal(size=(t_n, b_n + 1, 3))
        if i % 7 == 0:
            joints[:, -1] = joints[:, parents[-1]]  # force a degenerate bone
        m_bar = rng.random(size=t_n)
        eta = float(rng.uniform(0.5, 8.0))
        b_bar = rng.random(size=b_n) + 0.5
        from dgmr.dmaps import (
            calibrate_bone_lengths,
            estimate_bone_lengths,
            fusion_gate,
            temporal_weights,
        )
        w = temporal_weights(m_bar, eta)
        alpha = fusion_gate(m_bar, eta)
        bt = estimate_bone_lengths(joints, parents, w)
        bz, _ = calibrate_bone_lengths(bt, b_bar, alpha)
        sb_t, sb_z, sb_a = _calibration_scalar(joints, parents, b_bar, m_bar, eta)
        worst_cal = max(
            worst_cal,
            float(np.max(np.abs(bt.value - sb_t))),
            float(np.max(np.abs(bz.value - sb_z))),
            abs(float(np.asarray(alpha.value).reshape(-1)[0]) - sb_a),
        )

    for i in range(n):
        rng = np.random.default_rng((5, i))
        t_n = int(rng.integers(1, 9))
        width = int(rng.integers(1, 11))
        x0 = rng.normal(size=(t_n, width))
        res = rng.normal(size=(t_n, width))
        rho = 1.0 if i % 9 == 0 else float(rng.uniform(0.05, 0.999))
        got = causal_filter(x0, res, rho).value
        prev = x0[0].copy()
        want = np.empty_like(x0)
        for tt in range(t_n):
            for k in range(width):
                prev[k] = (1.0 - rho) * prev[k] + rho * (x0[tt, k] + res[tt, k])
            want[tt] = prev
        worst_filter = max(worst_filter, float(np.max(np.abs(got - want))))

    for i in range(n):
        rng = np.random.default_rng((52, i))
        params = init_modar(rng, joint_count=2, shape_dim=1, channels=3,
                            dim=6, attn_dim=4, ffn_dim=5)
        for blk in params.blocks:
            _randn_like(rng, blk.wo.weight, 0.4)
            _randn_like(rng, blk.ff2.weight, 0.4)
        t_n = int(rng.integers(1, 4))
        joints = rng.normal(size=(t_n, 2, 3))
        joints[:, 0] = 0.0
        kp = rng.random(size=(t_n, 2, 2))
        motion = MotionTokens(joints=joints, keypoints=kp)
        fused = rng.normal(size=(t_n, 2, 2, 3))
        got = build_context(params, motion, tape.constant(fused)).value
        tokens_in = np.concatenate(
            [joints.reshape(t_n, 6), kp.reshape(t_n, 4)], axis=1
        )
        want = _context_scalar(params, tokens_in, fused)
        worst_ctx = max(worst_ctx, float(np.max(np.abs(got - want))))

    elapsed = time.time() - t0
    ok = (worst_fusion < 1e-12 and worst_cal < 1e-12
          and worst_filter < 1e-12 and worst_ctx < 1e-9 and elapsed < 60.0)
    _report(
        "A2 equation-oracles",
        ok,
        "fusion %.1e, calibration %.1e, filter %.1e, context %.1e over %d "
        "instances each, %.1fs"
        % (worst_fusion, worst_cal, worst_filter, worst_ctx, n, elapsed),
    )


# ---------------------------------------------------------------------------
# A3: Procrustes optimality


def _fib_axes(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * i
    return np.stack([np.sin(phi) * np.cos(theta),
                     np.sin(phi) * np.sin(theta),
                     np.cos(phi)], axis=1)


def _rodrigues(axes, angles):
    k = axes
    n = k.shape[0]
    kx = np.zeros((n, 3, 3))
    kx[:, 0, 1], kx[:, 0, 2] = -k[:, 2], k[:, 1]
    kx[:, 1, 0], kx[:, 1, 2] = k[:, 2], -k[:, 0]
    kx[:, 2, 0], kx[:, 2, 1] = -k[:, 1], k[:, 0]
    s = np.sin(angles)[:, None, None]
    c = np.cos(angles)[:, None, None]
    return np.eye(3)[None] + s * kx + (1.0 - c) * (kx @ kx)


def _grid_sse(x, y, rots):
    """Best sum-of-squares residual over the rotation grid, with the scale
    minimized exactly per rotation (a lower bound on any scale line search;
    the scale is constrained positive since similarities exclude
    reflections)."""
    z = np.einsum("nab,jb->nja", rots, x)
    num = np.einsum("nja,ja->n", z, y)
    den = np.einsum("nja,nja->n", z, z)
    s = np.maximum(num / den, np.finfo(np.float64).tiny)
    res = s[:, None, None] * z - y[None]
    return float(np.einsum("nja,nja->n", res, res).min())


def test_A3_procrustes_optimality():
    t0 = time.time()
    axes = _fib_axes(320)
    ang = np.deg2rad(np.arange(2.0, 180.1, 2.0))
    global_rots = np.concatenate([
        _rodrigues(np.repeat(axes, ang.size, 0), np.tile(ang, axes.shape[0])),
        np.eye(3)[None],
    ], axis=0)
    local_ang = np.deg2rad(np.array([0.25, 0.5, 1.0, 2.0]))
    local_rots = _rodrigues(np.repeat(axes, local_ang.size, 0),
                            np.tile(local_ang, axes.shape[0]))

    rng = np.random.default_rng(3)
    worst_gap = -np.inf
    for i in range(100):
        x = rng.normal(size=(5, 3))
        if i % 4 == 0:
            y = rng.normal(size=(5, 3))
        else:
            r_true = _rodrigues(_fib_axes(9)[i % 9: i % 9 + 1],
                                np.array([rng.uniform(0, np.pi)]))[0]
            y = rng.uniform(0.3, 2.0) * x @ r_true.T + rng.normal(size=(5, 3)) * 0.2
        xc, yc = x - x.mean(0), y - y.mean(0)
        tf, aligned = procrustes_align(x, y)
        closed = float(((aligned - y) ** 2).sum())
        near = np.einsum("nab,bc->nac", local_rots, tf.rotation)
        oracle = min(_grid_sse(xc, yc, global_rots), _grid_sse(xc, yc, near))
        worst_gap = max(worst_gap, closed - oracle)

    violations = 0
    for i in range(10000):
        g = rng.normal(size=(16, 3))
        if i % 3 == 0:
            p = rng.normal(size=(16, 3))
        else:
            p = g + rng.normal(size=(16, 3)) * (10.0 ** rng.uniform(-2, 0))
        if pa_mpjpe(p[None], g[None]) > mpjpe(p[None], g[None]) + 1e-9:
            violations += 1

    elapsed = time.time() - t0
    ok = worst_gap <= 1e-9 and violations == 0 and elapsed < 120.0
    _report(
        "A3 procrustes-optimality",
        ok,
        "worst closed-form minus grid-oracle gap %.1e over 100 instances, "
        "%d pa>mpjpe violations in 10000, %.1fs"
        % (worst_gap, violations, elapsed),
    )


# ---------------------------------------------------------------------------
# A4: ablation direction on the default benchmark


def test_A4_ablation_direction():
    t0 = time.time()
    medians = {}
    for cell in ("rgb_only", "dmaps_only", "modar_only", "complete"):
        vals = []
        for seed in range(5):
            cfg = RunConfig(seed=seed, cell=cell)
            assert cfg.data.noise_level == 0.1
            assert cfg.data.occlusion_rate == 0.2
            vals.append(train(cfg)[1].metrics["mpjpe"])
        medians[cell] = float(np.median(vals))
    elapsed = time.time() - t0
    gain = (medians["rgb_only"] - medians["complete"]) / medians["rgb_only"]
    ok = (gain >= 0.10
          and medians["complete"] <= medians["dmaps_only"]
          and medians["complete"] <= medians["modar_only"]
          and elapsed < 1800.0)
    _report(
        "A4 ablation-direction",
        ok,
        "median MPJPE complete %.1f vs rgb-only %.1f (%.0f%% better), "
        "dmaps-only %.1f, modar-only %.1f; %.0fs"
        % (medians["complete"], medians["rgb_only"], 100 * gain,
           medians["dmaps_only"], medians["modar_only"], elapsed),
    )


# ---------------------------------------------------------------------------
# A5: sequence-length trend


def test_A5_sequence_length_trend():
    t0 = time.time()
    stats = {}
    for frames in (8, 32):
        mpjpes, accels = [], []
        for seed in range(5):
            base = RunConfig(seed=seed)
            cfg = replace(
                base, data=replace(base.data, noise_level=0.02, frames=frames)
            )
            metrics = train(cfg)[1].metrics
            mpjpes.append(metrics["mpjpe"])
            accels.append(metrics["accel"])
        stats[frames] = (float(np.median(mpjpes)), float(np.median(accels)))
    elapsed = time.time() - t0
    ok = (stats[32][0] <= stats[8][0] and stats[32][1] <= stats[8][1]
          and elapsed < 1800.0)
    _report(
        "A5 sequence-length-trend",
        ok,
        "median T=32 MPJPE %.1f <= T=8 %.1f and Accel %.0f <= %.0f; %.0fs"
        % (stats[32][0], stats[8][0], stats[32][1], stats[8][1], elapsed),
    )


# ---------------------------------------------------------------------------
# A6: metric calibration recovery and occlusion-gate stability


def test_A6_metric_calibration_recovery():
    t0 = time.time()
    template = build_template()
    cam = CameraModel()
    params = init_dmaps(np.random.default_rng(0), template, channels=8,
                        hidden=16, attn_dim=8)

    worst_rel = 0.0
    for idx in range(8):
        cfg = DataConfig(frames=16, noise_level=0.0)
        s = make_sample(template, cam, cfg, seed=20, split=TRAIN_SPLIT, index=idx)
        motion = motion_tokens_from_observations(
            s.lifted_3d, s.keypoints_2d, cam.width, cam.height
        )
        cal = calibrate(template, motion, s.confidence, s.person_mask, params.eta)
        shape_hat = init_shape(params, cal.b_z, cal.b_bar)
        recovered = shaped_bone_lengths(template, shape_hat.value)
        true = shaped_bone_lengths(template, s.gt_shape)
        worst_rel = max(worst_rel, float(np.max(np.abs(recovered - true) / true)))

    worst_ratio = 0.0
    for trial in range(5):
        cfg = DataConfig(frames=16, noise_level=0.1)
        occ = OcclusionSpec(frame_start=4, frame_end=10, row_start=0, row_end=8,
                            col_start=0, col_end=8, floor=0.05)
        quats, shape, root = gen_motion(
            template, cfg.frames, np.random.default_rng(30 + trial), cfg
        )
        seq_occ = render_features(template, cam, cfg, quats, shape, root,
                                  np.random.default_rng(60 + trial), occ)
        seq_clean = render_features(template, cam, cfg, quats, shape, root,
                                    np.random.default_rng(60 + trial), None)

        def b_z_of(seq):
            motion = motion_tokens_from_observations(
                seq.lifted_3d, seq.keypoints_2d, cam.width, cam.height
            )
            cal = calibrate(template, motion, seq.confidence,
                            seq.person_mask, params.eta)
            return cal.b_z.value, motion

        bz_clean, _ = b_z_of(seq_clean)
        bz_occ, motion_occ = b_z_of(seq_occ)
        raw = bone_lengths(motion_occ.joints, template.tree.parents)
        gated_dev = float(np.max(np.abs(bz_occ - bz_clean)))
        raw_worst = float(np.max(np.abs(raw - bz_clean[None, :])))
        worst_ratio = max(worst_ratio, gated_dev / raw_worst)

    elapsed = time.time() - t0
    ok = worst_rel < 0.02 and worst_ratio < 1.0 and elapsed < 60.0
    _report(
        "A6 metric-calibration-recovery",
        ok,
        "worst bone recovery error %.2f%% (< 2%%), occluded-vs-clean B^Z "
        "deviation at %.2fx the raw worst case (< 1x); %.1fs"
        % (100 * worst_rel, worst_ratio, elapsed),
    )


# ---------------------------------------------------------------------------
# A7: structural invariants and CLI determinism


def _tiny_cli_config(tmp_path):
    cfg = RunConfig(
        seed=0,
        model=ModelConfig(channels=18, fusion_levels=1, twist_hidden=8,
                          dmaps_attn_dim=8, modar_dim=12, modar_attn_dim=8,
                          modar_ffn_dim=12),
        data=DataConfig(frames=4, grid_h=4, grid_w=4, channels=18,
                        depth_h=2, depth_w=2, noise_level=0.05,
                        occlusion_rate=0.0),
        train=TrainSchedule(sequences=2, eval_sequences=2,
                            phase1_epochs=1, phase2_epochs=1),
    )
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(config_to_dict(cfg)))
    return str(path)


def _run_cli(argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = cli_main(argv)
    return code, buf.getvalue()


def test_A7_structural_invariants(tmp_path):
    t0 = time.time()
    rng = np.random.default_rng(7)
    template = build_template()
    j = template.joint_count

    # FK preserves shaped bone lengths under arbitrary poses.
    worst_fk = 0.0
    for _ in range(20):
        shape = rng.uniform(-2, 2, size=template.shape_dim)
        rest = apply_shape(template, shape)[0]
        quats = np.stack(
            [[random_unit_quat(rng) for _ in range(j)] for _ in range(3)]
        )
        pos, _ = fk_numpy(rest, template.tree.parents, quats,
                          rng.normal(size=(3, 3)))
        lengths = bone_lengths(pos, template.tree.parents)
        want = shaped_bone_lengths(template, shape)
        worst_fk = max(worst_fk, float(np.max(np.abs(lengths - want[None]))))

    # Swing-twist recomposition: q == swing * twist with twist about axis.
    worst_st = 0.0
    for _ in range(500):
        q = random_unit_quat(rng)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        st = swing_twist_decompose(q, axis)
        back = quat_multiply(st.swing, st.twist)
        err = min(np.max(np.abs(back - q)), np.max(np.abs(back + q)))
        cross = np.linalg.norm(np.cross(st.twist[1:], axis))
        worst_st = max(worst_st, err, cross)

    # Causal filter: outputs for a prefix never depend on later frames.
    prefix_exact = True
    x0 = rng.normal(size=(9, 5))
    res = rng.normal(size=(9, 5))
    full = causal_filter(x0, res, 0.37).value
    for k in (1, 4, 8):
        part = causal_filter(x0[:k], res[:k], 0.37).value
        prefix_exact = prefix_exact and np.array_equal(full[:k], part)

    # Zero-init refinement is a no-op on the pose track.
    params = init_modar(np.random.default_rng(0), joint_count=4, shape_dim=2,
                        channels=3, dim=8, attn_dim=6, ffn_dim=7)
    t_n = 5
    joints = rng.normal(size=(t_n, 4, 3))
    joints[:, 0] = 0.0
    motion = MotionTokens(joints=joints, keypoints=rng.random(size=(t_n, 4, 2)))
    fused = tape.constant(rng.normal(size=(t_n, 2, 2, 3)))
    pose_init = []
    for _ in range(4):
        q = np.stack([random_unit_quat(rng) for _ in range(t_n)])
        pose_init.append(tape.constant(q))
    shape_init = tape.constant(rng.normal(size=2))
    pose_ref, shape_ref, _ = refine(params, motion, fused, pose_init,
                                    shape_init, shape_bound=5.0)
    noop = all(
        np.array_equal(pr.value, pi.value)
        for pr, pi in zip(pose_ref, pose_init)
    ) and bool(np.max(np.abs(shape_ref.value - shape_init.value)) < 1e-12)

    # Every CLI subcommand is deterministic under a fixed seed.
    cfg_path = _tiny_cli_config(tmp_path)
    commands = [
        ["train", "--config", cfg_path],
        ["eval", "--config", cfg_path],
        ["ablate", "--config", cfg_path],
        ["sweep", "--config", cfg_path, "--lengths", "3", "4"],
        ["gen-data", "--config", cfg_path, "--out", str(tmp_path / "d")],
        ["grad-check", "--config", cfg_path],
    ]
    cli_ok = True
    for argv in commands:
        code_a, out_a = _run_cli(argv)
        code_b, out_b = _run_cli(argv)
        cli_ok = cli_ok and code_a == 0 and code_b == 0 and out_a == out_b
        json.loads(out_a)

    elapsed = time.time() - t0
    ok = (worst_fk < 1e-9 and worst_st < 1e-8 and prefix_exact and noop
          and cli_ok and elapsed < 120.0)
    _report(
        "A7 structural-invariants",
        ok,
        "fk length drift %.1e, swing-twist err %.1e, filter prefix %s, "
        "zero-init no-op %s, cli deterministic %s; %.1fs"
        % (worst_fk, worst_st, prefix_exact, noop, cli_ok, elapsed),
    )
