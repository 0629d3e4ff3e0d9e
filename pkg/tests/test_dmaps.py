"""Metric calibration and the swing-twist pose initializer."""

import numpy as np
import pytest

from dgmr import rotation as rot
from dgmr.body import apply_shape, build_template, fk_numpy, shaped_bone_lengths
from dgmr.dmaps import (
    MotionTokens,
    calibrate,
    calibrate_bone_lengths,
    dmaps_init,
    estimate_bone_lengths,
    frame_quality,
    fusion_gate,
    init_dmaps,
    init_pose,
    init_shape,
    joint_cells,
    motion_tokens_from_observations,
    temporal_weights,
)
from dgmr.numerics import tape


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@pytest.fixture(scope="module")
def template():
    return build_template()


@pytest.fixture(scope="module")
def params(template):
    return init_dmaps(np.random.default_rng(0), template, channels=8, hidden=16,
                      attn_dim=8)


def make_motion(joints, keypoints=None):
    joints = np.asarray(joints, dtype=np.float64)
    t, j = joints.shape[:2]
    if keypoints is None:
        keypoints = np.full((t, j, 2), 0.5)
    return MotionTokens(joints=joints - joints[:, 0:1], keypoints=keypoints)


def test_temporal_weights_zero_confidence_is_half():
    w = temporal_weights(np.zeros(5), 4.0)
    assert np.allclose(w.value, 0.5, atol=1e-15)


def test_temporal_weights_scalar_oracle():
    w = temporal_weights(np.array([0.8, 0.2]), 1.0)
    assert np.allclose(w.value, [0.68997, 0.54983], atol=5e-6)
    assert np.allclose(w.value, sigmoid(np.array([0.8, 0.2])), atol=1e-14)


def test_temporal_weights_monotone():
    rng = np.random.default_rng(1)
    m = np.sort(rng.uniform(0.0, 1.0, size=16))
    w = temporal_weights(m, 4.0).value
    assert np.all(np.diff(w) >= 0.0)
    distinct = np.diff(m) > 0
    assert np.all(np.diff(w)[distinct] > 0.0)


def test_temporal_weights_validates_inputs():
    with pytest.raises(ValueError):
        temporal_weights(np.array([-0.1, 0.5]), 4.0)
    with pytest.raises(ValueError):
        temporal_weights(np.array([0.5]), -1.0)


def test_fusion_gate_oracles():
    assert np.allclose(fusion_gate(np.zeros(4), 2.0).value, 0.5, atol=1e-15)
    alpha = fusion_gate(np.array([0.4, 0.6]), 2.0)
    assert abs(float(alpha.value) - 0.73106) < 5e-6
    lo = fusion_gate(np.full(3, 0.3), 4.0).value
    hi = fusion_gate(np.full(3, 0.7), 4.0).value
    assert hi > lo
    with pytest.raises(ValueError):
        fusion_gate(np.zeros(0), 4.0)


def test_estimate_bone_lengths_constant_skeleton(template):
    rng = np.random.default_rng(2)
    joints = np.tile(template.rest_joints, (6, 1, 1))
    w = tape.constant(rng.uniform(0.5, 1.0, size=6))
    b = estimate_bone_lengths(joints, template.tree.parents, w)
    assert np.allclose(b.value, template.rest_bone_lengths, atol=1e-12)


def test_estimate_bone_lengths_two_frame_oracle():
    # one bone, lengths (1.0, 1.2), weights sigmoid(0.8), sigmoid(0.2)
    joints = np.zeros((2, 2, 3))
    joints[0, 1, 0] = 1.0
    joints[1, 1, 0] = 1.2
    w = temporal_weights(np.array([0.8, 0.2]), 1.0)
    b = estimate_bone_lengths(joints, np.array([-1, 0]), w)
    assert abs(float(b.value[0]) - 1.0887) < 5e-5
    ws = sigmoid(np.array([0.8, 0.2]))
    want = (ws[0] * 1.0 + ws[1] * 1.2) / ws.sum()
    assert abs(float(b.value[0]) - want) < 1e-14


def test_estimate_bone_lengths_uniform_weights_is_mean(template):
    rng = np.random.default_rng(3)
    joints = rng.normal(size=(5, template.joint_count, 3))
    w = tape.constant(np.full(5, 0.37))
    got = estimate_bone_lengths(joints, template.tree.parents, w).value
    parents = template.tree.parents
    want = np.mean(
        [
            np.linalg.norm(joints[:, j] - joints[:, parents[j]], axis=1)
            for j in range(1, template.joint_count)
        ],
        axis=1,
    )
    assert np.allclose(got, want, atol=1e-12)
    with pytest.raises(ValueError):
        estimate_bone_lengths(joints, parents, tape.constant(np.zeros(5)))


def test_calibrate_bone_lengths_oracles():
    b, flags = calibrate_bone_lengths(
        tape.constant(np.array([1.1])), np.array([0.9]),
        tape.constant(np.float64(0.5))
    )
    assert abs(float(b.value[0]) - 1.0) < 1e-14
    assert not flags[0]
    # alpha near 1: result within 1e-4 of the estimate
    near_one = sigmoid(10.0)
    b2, _ = calibrate_bone_lengths(
        tape.constant(np.array([1.1])), np.array([0.9]),
        tape.constant(np.float64(near_one))
    )
    assert abs(float(b2.value[0]) - 1.1) < 1e-4


def test_calibrate_bone_lengths_convexity():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n = int(rng.integers(1, 12))
        bt = rng.uniform(0.1, 2.0, size=n)
        bb = rng.uniform(0.1, 2.0, size=n)
        alpha = rng.uniform(0.01, 0.99)
        out, flags = calibrate_bone_lengths(
            tape.constant(bt), bb, tape.constant(np.float64(alpha))
        )
        lo = np.minimum(bt, bb)
        hi = np.maximum(bt, bb)
        assert np.all(out.value >= lo - 1e-12)
        assert np.all(out.value <= hi + 1e-12)
        assert not flags.any()


def test_calibrate_bone_lengths_degenerate_fallback():
    bt = tape.constant(np.array([0.0, 1.2, -0.3]))
    bb = np.array([0.8, 1.0, 0.9])
    out, flags = calibrate_bone_lengths(bt, bb, tape.constant(np.float64(0.7)))
    assert flags.tolist() == [True, False, True]
    assert out.value[0] == 0.8
    assert out.value[2] == 0.9
    assert abs(out.value[1] - (0.7 * 1.2 + 0.3 * 1.0)) < 1e-12
    with pytest.raises(ValueError):
        calibrate_bone_lengths(bt, bb, tape.constant(np.float64(1.0)))


def test_eq34_scalar_brute_force(template):
    """Weights, gate, estimate, calibration against explicit loops."""
    rng = np.random.default_rng(5)
    for _ in range(50):
        t = int(rng.integers(1, 9))
        j = int(rng.integers(2, 16))
        par = np.array([-1] + [int(rng.integers(0, k)) for k in range(1, j)])
        joints = rng.normal(size=(t, j, 3))
        m = rng.uniform(size=t)
        eta = rng.uniform(0.5, 6.0)
        w = temporal_weights(m, eta).value
        alpha = float(fusion_gate(m, eta).value)
        bb = rng.uniform(0.2, 1.5, size=j - 1)
        bt = estimate_bone_lengths(joints, par, temporal_weights(m, eta)).value
        bz = calibrate_bone_lengths(
            tape.constant(bt), bb, fusion_gate(m, eta)
        )[0].value
        for k in range(1, j):
            num = 0.0
            den = 0.0
            for ti in range(t):
                wt = 1.0 / (1.0 + np.exp(-eta * m[ti]))
                num += wt * np.sqrt(
                    ((joints[ti, k] - joints[ti, par[k]]) ** 2).sum()
                )
                den += wt
            assert abs(bt[k - 1] - num / den) < 1e-12
            a = 1.0 / (1.0 + np.exp(-eta * m.mean()))
            want = a * bt[k - 1] + (1.0 - a) * bb[k - 1]
            assert abs(bz[k - 1] - want) < 1e-12
        assert abs(alpha - 1.0 / (1.0 + np.exp(-eta * m.mean()))) < 1e-14


def test_scale_consistency(template):
    """Doubling observed joints doubles the estimate exactly."""
    rng = np.random.default_rng(6)
    joints = rng.normal(size=(4, template.joint_count, 3))
    w = temporal_weights(rng.uniform(size=4), 4.0)
    b1 = estimate_bone_lengths(joints, template.tree.parents, w).value
    b2 = estimate_bone_lengths(2.0 * joints, template.tree.parents, w).value
    assert np.allclose(b2, 2.0 * b1, atol=1e-12)
    # the calibrated value moves toward the doubled estimate by factor alpha
    bb = template.rest_bone_lengths
    alpha = fusion_gate(rng.uniform(size=4), 4.0)
    z1 = calibrate_bone_lengths(tape.constant(b1), bb, alpha)[0].value
    z2 = calibrate_bone_lengths(tape.constant(b2), bb, alpha)[0].value
    assert np.allclose(z2 - z1, float(alpha.value) * (b2 - b1), atol=1e-12)


def test_frame_quality_masks_person_region():
    conf = np.zeros((2, 4, 4))
    conf[0, :2, :2] = 0.8
    conf[1] = 0.3
    mask = np.zeros((2, 4, 4), dtype=bool)
    mask[0, :2, :2] = True
    m, empty = frame_quality(conf, mask)
    assert abs(m[0] - 0.8) < 1e-12
    assert m[1] == 0.0
    assert empty == [1]


def test_init_shape_zero_on_template(template, params):
    bb = template.rest_bone_lengths
    s = init_shape(params, tape.constant(bb.copy()), bb)
    assert np.allclose(s.value, 0.0, atol=1e-8)


def test_init_shape_recovers_shape_from_exact_lengths(template, params):
    rng = np.random.default_rng(7)
    for _ in range(40):
        s_star = rng.uniform(-4.0, 4.0, size=template.shape_dim)
        bz = shaped_bone_lengths(template, s_star)
        got = init_shape(params, tape.constant(bz), template.rest_bone_lengths)
        assert np.allclose(got.value, s_star, atol=0.1)


def test_init_shape_clamps_to_bounds(template, params):
    bz = template.rest_bone_lengths * 100.0
    s = init_shape(params, tape.constant(bz), template.rest_bone_lengths)
    assert np.all(np.abs(s.value) <= params.shape_bound + 1e-12)
    assert np.max(np.abs(s.value)) == params.shape_bound
    with pytest.raises(ValueError):
        init_shape(params, tape.constant(-template.rest_bone_lengths),
                   template.rest_bone_lengths)


def test_joint_cells_clamps_to_grid():
    kp = np.array([[[0.05, 0.1], [0.99, 0.99], [-0.2, 0.5], [0.5, 1.4]]])
    cells = joint_cells(kp, 8, 8)
    assert cells.shape == (1, 4, 2)
    assert cells[0, 0].tolist() == [0, 0]
    assert cells[0, 1].tolist() == [7, 7]
    assert cells[0, 2].tolist() == [4, 0]
    assert cells[0, 3].tolist() == [7, 4]


def rest_motion(template, frames):
    joints = np.tile(template.rest_joints, (frames, 1, 1))
    return make_motion(joints)


def zero_features(frames, h=4, w=4, c=8):
    return tape.constant(np.zeros((frames, h, w, c)))


def test_init_pose_identity_on_rest_directions(template, params):
    frames = 3
    motion = rest_motion(template, frames)
    pose, degenerate, theta = init_pose(
        params, template, motion, zero_features(frames), zero_features(frames)
    )
    assert not degenerate.any()
    assert np.allclose(theta.value, 0.0, atol=1e-12)
    for j, q in enumerate(pose):
        assert q.value.shape == (frames, 4)
        for t in range(frames):
            assert np.allclose(
                rot.quat_canonical(q.value[t]), rot.quat_identity(), atol=1e-6
            ), "joint %d frame %d" % (j, t)


def swing_only_pose(template, rng):
    quats = np.zeros((template.joint_count, 4))
    quats[0] = rot.random_unit_quat(rng)
    for j in range(1, template.joint_count):
        full = rot.random_unit_quat(rng)
        quats[j] = rot.swing_twist_decompose(full, template.twist_axes[j]).swing
    return quats


def test_init_pose_fk_roundtrip_swing_only(template, params):
    """Observed joints from a swing-only pose are reconstructed exactly."""
    rng = np.random.default_rng(8)
    frames = 4
    quats = np.stack([swing_only_pose(template, rng) for _ in range(frames)])
    world, _ = fk_numpy(
        template.rest_joints, template.tree.parents, quats, np.zeros((frames, 3))
    )
    motion = make_motion(world)
    pose, degenerate, _ = init_pose(
        params, template, motion, zero_features(frames), zero_features(frames)
    )
    assert not degenerate.any()
    est = np.stack([q.value for q in pose], axis=1)
    world2, _ = fk_numpy(
        template.rest_joints, template.tree.parents, est, np.zeros((frames, 3))
    )
    parents = template.tree.parents
    for j in range(1, template.joint_count):
        d_gt = world[:, j] - world[:, parents[j]]
        d_est = world2[:, j] - world2[:, parents[j]]
        d_gt /= np.linalg.norm(d_gt, axis=1, keepdims=True)
        d_est /= np.linalg.norm(d_est, axis=1, keepdims=True)
        assert np.max(np.abs(d_gt - d_est)) < 1e-5
    # same template, same lengths: positions come along for free
    centered_gt = world - world[:, 0:1]
    centered_est = world2 - world2[:, 0:1]
    assert np.max(np.abs(centered_gt - centered_est)) < 1e-5


def test_init_pose_twist_head_factorization(template, params):
    """Decomposing each estimated local rotation about its bone axis
    recovers the predicted twist angle."""
    rng = np.random.default_rng(9)
    frames = 2
    old = params.twist_out.weight.value.copy()
    params.twist_out.weight.value = rng.normal(
        size=params.twist_out.weight.value.shape
    )
    try:
        motion = rest_motion(template, frames)
        fused = tape.constant(rng.normal(size=(frames, 4, 4, 8)))
        depth = tape.constant(rng.normal(size=(frames, 4, 4, 8)))
        pose, _, theta = init_pose(params, template, motion, fused, depth,
                                   use_attention=False)
        assert np.any(theta.value != 0.0)
        # the root comes from two-vector alignment, not the twist head
        for j, q in enumerate(pose):
            if j == 0:
                continue
            for t in range(frames):
                st = rot.swing_twist_decompose(
                    rot.quat_normalize(q.value[t]), template.twist_axes[j]
                )
                assert abs(st.twist_angle - theta.value[t, j]) < 1e-6
    finally:
        params.twist_out.weight.value = old


def test_init_pose_flags_degenerate_bones(template, params):
    frames = 2
    joints = np.tile(template.rest_joints, (frames, 1, 1))
    # collapse one child onto its parent in frame 1
    child = 5
    parent = template.tree.parents[child]
    joints[1, child] = joints[1, parent]
    motion = make_motion(joints)
    pose, degenerate, _ = init_pose(
        params, template, motion, zero_features(frames), zero_features(frames)
    )
    assert degenerate[1].any()
    assert not degenerate[0].any()
    # the degenerate joint still carries a unit quaternion (identity swing)
    q = pose[parent].value[1] if parent > 0 else pose[child].value[1]
    assert abs(np.linalg.norm(q) - 1.0) < 1e-9


def test_init_pose_attention_is_resnet_noop_at_init(template, params):
    rng = np.random.default_rng(10)
    frames = 3
    quats = np.stack([swing_only_pose(template, rng) for _ in range(frames)])
    world, _ = fk_numpy(
        template.rest_joints, template.tree.parents, quats, np.zeros((frames, 3))
    )
    motion = make_motion(world)
    with_attn, _, _ = init_pose(
        params, template, motion, zero_features(frames), zero_features(frames),
        use_attention=True,
    )
    without, _, _ = init_pose(
        params, template, motion, zero_features(frames), zero_features(frames),
        use_attention=False,
    )
    for qa, qb in zip(with_attn, without):
        assert np.allclose(qa.value, qb.value, atol=1e-12)


def test_calibrate_full_chain(template):
    rng = np.random.default_rng(11)
    frames = 6
    s_star = rng.uniform(-2.0, 2.0, size=template.shape_dim)
    joints, _ = apply_shape(template, s_star)
    world = np.tile(joints, (frames, 1, 1))
    motion = make_motion(world)
    conf = np.full((frames, 4, 4), 0.9)
    mask = np.ones((frames, 4, 4), dtype=bool)
    cal = calibrate(template, motion, conf, mask, 4.0)
    want_alpha = sigmoid(4.0 * 0.9)
    assert abs(float(cal.alpha.value) - want_alpha) < 1e-12
    true_lengths = shaped_bone_lengths(template, s_star)
    assert np.allclose(cal.b_tilde.value, true_lengths, atol=1e-12)
    want = want_alpha * true_lengths + (1 - want_alpha) * cal.b_bar
    assert np.allclose(cal.b_z.value, want, atol=1e-12)
    assert cal.empty_person_frames == []


def test_dmaps_init_end_to_end(template, params):
    rng = np.random.default_rng(12)
    frames = 4
    quats = np.stack([swing_only_pose(template, rng) for _ in range(frames)])
    world, _ = fk_numpy(
        template.rest_joints, template.tree.parents, quats, np.zeros((frames, 3))
    )
    motion = make_motion(world)
    conf = np.full((frames, 4, 4), 0.8)
    mask = np.ones((frames, 4, 4), dtype=bool)
    res = dmaps_init(
        params, template, motion, conf, mask,
        zero_features(frames), zero_features(frames),
    )
    assert len(res.pose) == template.joint_count
    assert res.shape.value.shape == (template.shape_dim,)
    assert np.all(np.abs(res.shape.value) <= params.shape_bound)
    assert not res.degenerate_observed.any()
    # the true shape is zero here and the estimator should say so
    assert np.allclose(res.shape.value, 0.0, atol=0.05)


def test_motion_tokens_center_pelvis():
    rng = np.random.default_rng(13)
    lifted = rng.normal(size=(3, 5, 3))
    kp = rng.uniform(0, 256, size=(3, 5, 2))
    tok = motion_tokens_from_observations(lifted, kp, 256, 256)
    assert np.allclose(tok.joints[:, 0], 0.0, atol=1e-12)
    assert np.all(tok.keypoints >= 0.0) and np.all(tok.keypoints <= 1.0)
    with pytest.raises(ValueError):
        MotionTokens(joints=lifted, keypoints=kp / 256.0)
