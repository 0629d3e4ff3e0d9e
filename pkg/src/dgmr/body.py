"""Simplified parametric body: kinematic tree, shape basis, FK, skinning.

The default template is a 16-joint humanoid with a small vertex cloud and
a 4-dimensional shape basis. Basis displacement fields are built by
accumulating per-bone elongation gains down the tree, which makes every
bone length an exactly linear function of the shape coefficients (until a
length would cross zero; coefficient bounds keep that impossible). That
linearity is what lets the bone-length calibration initialize the shape
head analytically.

Conventions: float64 everywhere, joints ordered so every parent index is
smaller than its child, pelvis (root) at the origin of the rest pose,
y up, quaternions (w, x, y, z) in the parent frame.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import backend
from .numerics import tape
from .numerics.tape import Var


@dataclass(frozen=True)
class KinematicTree:
    """Rooted tree over joints; parents[i] < i, root has parent -1."""

    parents: np.ndarray

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.intp)
        object.__setattr__(self, "parents", parents)
        if parents.ndim != 1 or parents.size < 2:
            raise ValueError("tree needs at least two joints")
        if parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        if np.any(parents[1:] < 0) or np.any(parents[1:] >= np.arange(1, parents.size)):
            raise ValueError("parents must satisfy parents[i] < i for i > 0")

    @property
    def joint_count(self) -> int:
        return int(self.parents.size)

    @property
    def bones(self) -> list[tuple[int, int]]:
        """(parent, child) pairs ordered by child index."""
        return [(int(self.parents[j]), j) for j in range(1, self.joint_count)]

    def children(self, j: int) -> list[int]:
        return [c for c in range(1, self.joint_count) if self.parents[c] == j]


@dataclass(frozen=True)
class BodyTemplate:
    tree: KinematicTree
    rest_joints: np.ndarray  # (J, 3)
    rest_vertices: np.ndarray  # (V, 3)
    skin_weights: np.ndarray  # (V, J), rows sum to 1
    joint_basis: np.ndarray  # (S, J, 3)
    vertex_basis: np.ndarray  # (S, V, 3)
    length_gains: np.ndarray  # (S, J-1): d(length_b)/d(s_k) / rest length
    twist_axes: np.ndarray  # (J, 3) unit axes in the parent-relative rest frame

    def __post_init__(self):
        w = self.skin_weights
        if np.any(w < -1.0e-12):
            raise ValueError("skin weights must be nonnegative")
        if np.max(np.abs(w.sum(axis=1) - 1.0)) > 1.0e-12:
            raise ValueError("skin weight rows must sum to 1")
        if np.any(bone_lengths(self.rest_joints, self.tree.parents) <= 0.0):
            raise ValueError("rest bone lengths must be positive")

    @property
    def joint_count(self) -> int:
        return self.tree.joint_count

    @property
    def vertex_count(self) -> int:
        return int(self.rest_vertices.shape[0])

    @property
    def shape_dim(self) -> int:
        return int(self.joint_basis.shape[0])

    @property
    def rest_bone_lengths(self) -> np.ndarray:
        return bone_lengths(self.rest_joints, self.tree.parents)


def bone_lengths(joints, parents) -> np.ndarray:
    """Per-bone lengths ordered by child index; leading axes broadcast."""
    joints = np.asarray(joints, dtype=np.float64)
    parents = np.asarray(parents, dtype=np.intp)
    child = joints[..., 1:, :]
    parent = joints[..., parents[1:], :]
    return np.linalg.norm(child - parent, axis=-1)


def _humanoid_rest() -> tuple[np.ndarray, np.ndarray]:
    parents = np.array([-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 2, 10, 11, 2, 13, 14])
    joints = np.array(
        [
            [0.00, 0.00, 0.00],  # pelvis
            [0.00, 0.22, 0.01],  # spine
            [0.00, 0.44, 0.00],  # chest
            [0.00, 0.66, 0.03],  # head
            [-0.09, -0.06, 0.00],  # left hip
            [-0.10, -0.48, 0.02],  # left knee
            [-0.11, -0.90, -0.02],  # left ankle
            [0.09, -0.06, 0.00],  # right hip
            [0.10, -0.48, 0.02],  # right knee
            [0.11, -0.90, -0.02],  # right ankle
            [-0.18, 0.42, 0.00],  # left shoulder
            [-0.45, 0.40, -0.02],  # left elbow
            [-0.71, 0.39, 0.00],  # left wrist
            [0.18, 0.42, 0.00],  # right shoulder
            [0.45, 0.40, -0.02],  # right elbow
            [0.71, 0.39, 0.00],  # right wrist
        ]
    )
    return parents, joints


def _chain_rest(joint_count: int) -> tuple[np.ndarray, np.ndarray]:
    parents = np.arange(-1, joint_count - 1)
    joints = np.zeros((joint_count, 3))
    for j in range(1, joint_count):
        a = 0.4 * j
        joints[j] = joints[j - 1] + 0.25 * np.array(
            [np.sin(a), np.cos(a), 0.05 * (-1.0) ** j]
        )
    return parents, joints


def _bone_groups(tree: KinematicTree, joint_count: int) -> dict[str, list[int]]:
    """Bone indices (by child-1) for the elongation bases."""
    if joint_count == 16:
        return {
            "legs": [4, 5, 7, 8],  # thighs and shins (children 5, 6, 8, 9)
            "leg_roots": [3, 6],  # hip offsets (children 4, 7)
            "arms": [10, 11, 13, 14],  # upper arms and forearms
            "arm_roots": [9, 12],  # shoulder offsets (children 10, 13)
            "torso": [0, 1, 2],  # spine, chest, head
        }
    nb = joint_count - 1
    thirds = np.array_split(np.arange(nb), 3)
    return {
        "legs": list(thirds[0]),
        "leg_roots": [],
        "arms": list(thirds[1]),
        "arm_roots": [],
        "torso": list(thirds[2]),
    }


def _basis_gains(tree: KinematicTree, shape_dim: int) -> np.ndarray:
    """Per-basis, per-bone relative elongation gains, shape (S, J-1).

    Gains are sized so that within coefficient bounds of +-5 every bone
    keeps a positive length: sum_k |gain_k| <= 0.16 per bone.
    """
    j = tree.joint_count
    groups = _bone_groups(tree, j)
    gains = np.zeros((shape_dim, j - 1))
    gains[0, :] = 0.06  # global scale
    if shape_dim > 1:
        gains[1, groups["legs"]] = 0.06
        gains[1, groups["leg_roots"]] = 0.01
    if shape_dim > 2:
        gains[2, groups["arms"]] = 0.06
        gains[2, groups["arm_roots"]] = 0.01
    if shape_dim > 3:
        # Torso width: elongate the lateral shoulder and hip offsets only.
        gains[3, groups["arm_roots"]] = 0.05
        gains[3, groups["leg_roots"]] = 0.05
    for k in range(4, shape_dim):
        gains[k, (k - 4) % (j - 1)] = 0.05
    return gains


def _accumulate_displacements(
    tree: KinematicTree, rest_joints: np.ndarray, gains: np.ndarray
) -> np.ndarray:
    """Joint displacement fields (S, J, 3) from per-bone elongation gains."""
    s, j = gains.shape[0], tree.joint_count
    disp = np.zeros((s, j, 3))
    for child in range(1, j):
        parent = tree.parents[child]
        offset = rest_joints[child] - rest_joints[parent]
        disp[:, child] = disp[:, parent] + gains[:, child - 1, None] * offset
    return disp


def _twist_axes(tree: KinematicTree, rest_joints: np.ndarray) -> np.ndarray:
    """Unit twist axis per joint: the rest direction of its leading bone.

    Joints with children use the bone to their first child; leaves reuse
    the incoming bone; the root uses the bone to its first child.
    """
    j = tree.joint_count
    axes = np.zeros((j, 3))
    for joint in range(j):
        kids = tree.children(joint)
        if kids:
            d = rest_joints[kids[0]] - rest_joints[joint]
        else:
            d = rest_joints[joint] - rest_joints[tree.parents[joint]]
        axes[joint] = d / np.linalg.norm(d)
    return axes


def _segment_distances(point: np.ndarray, rest_joints: np.ndarray, bones) -> np.ndarray:
    """Distance from a point to every bone segment, ordered by child index."""
    out = np.empty(len(bones))
    for b, (parent, child) in enumerate(bones):
        a = rest_joints[parent]
        d = rest_joints[child] - a
        tt = np.clip(np.dot(point - a, d) / np.dot(d, d), 0.0, 1.0)
        out[b] = np.linalg.norm(point - (a + tt * d))
    return out


def skin_weights_for_points(
    tree: KinematicTree, rest_joints: np.ndarray, points: np.ndarray
) -> np.ndarray:
    """Inverse-distance weights to the two nearest bones, per point.

    Each bone's share lands on the joint that drives it (its parent), since
    the bone vector rotates with the parent's global frame. Rows sum to 1.
    """
    bones = tree.bones
    weights = np.zeros((points.shape[0], tree.joint_count))
    for i, point in enumerate(points):
        dist = _segment_distances(point, rest_joints, bones)
        nearest = np.argsort(dist, kind="stable")[:2]
        inv = 1.0 / np.maximum(dist[nearest], 1.0e-9)
        share = inv / inv.sum()
        for s, b in zip(share, nearest):
            weights[i, bones[b][0]] += s
    return weights


def _place_vertices(
    tree: KinematicTree,
    rest_joints: np.ndarray,
    vertex_count: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Vertex cloud around the bones; weights from the two nearest bones."""
    bones = tree.bones
    verts = np.zeros((vertex_count, 3))
    for i in range(vertex_count):
        parent, child = bones[i % len(bones)]
        frac = 0.2 + 0.6 * float(rng.random())
        axis = rest_joints[child] - rest_joints[parent]
        length = np.linalg.norm(axis)
        axis = axis / length
        # A stable perpendicular for the radial offset.
        ref = np.array([1.0, 0.0, 0.0])
        if abs(axis[0]) > 0.9:
            ref = np.array([0.0, 1.0, 0.0])
        perp = np.cross(axis, ref)
        perp /= np.linalg.norm(perp)
        ang = 2.0 * np.pi * float(rng.random())
        radius = (0.04 + 0.04 * float(rng.random())) * length
        radial = np.cos(ang) * perp + np.sin(ang) * np.cross(axis, perp)
        verts[i] = rest_joints[parent] + frac * length * axis + radius * radial
    return verts, skin_weights_for_points(tree, rest_joints, verts)


def build_template(
    joint_count: int = 16,
    shape_dim: int = 4,
    vertex_count: int = 64,
    seed: int = 0,
) -> BodyTemplate:
    """Construct the rest-pose template, shape basis, and skinning data.

    The vertex cloud is the only randomized part; the same seed always
    yields the same template.
    """
    if joint_count < 4:
        raise ValueError("need at least 4 joints")
    if shape_dim < 1:
        raise ValueError("need at least one shape dimension")
    if vertex_count < joint_count:
        raise ValueError("vertex count must be at least the joint count")
    if joint_count == 16:
        parents, rest = _humanoid_rest()
    else:
        parents, rest = _chain_rest(joint_count)
    tree = KinematicTree(parents=parents)
    gains = _basis_gains(tree, shape_dim)
    joint_basis = _accumulate_displacements(tree, rest, gains)
    rng = np.random.default_rng((int(seed), 0x7E3))
    verts, weights = _place_vertices(tree, rest, vertex_count, rng)
    vertex_basis = np.einsum("vj,sjd->svd", weights, joint_basis)
    return BodyTemplate(
        tree=tree,
        rest_joints=rest,
        rest_vertices=verts,
        skin_weights=weights,
        joint_basis=joint_basis,
        vertex_basis=vertex_basis,
        length_gains=gains,
        twist_axes=_twist_axes(tree, rest),
    )


# ---------------------------------------------------------------------------
# shape


def apply_shape(template: BodyTemplate, shape) -> tuple[np.ndarray, np.ndarray]:
    """Shaped rest joints and vertices for coefficient vector ``shape``."""
    s = np.asarray(shape, dtype=np.float64)
    if s.shape != (template.shape_dim,):
        raise ValueError("shape must have %d coefficients" % template.shape_dim)
    joints = template.rest_joints + np.einsum("s,sjd->jd", s, template.joint_basis)
    verts = template.rest_vertices + np.einsum("s,svd->vd", s, template.vertex_basis)
    return joints, verts


def apply_shape_tape(template: BodyTemplate, shape: Var) -> tuple[Var, Var]:
    """Differentiable version of apply_shape for a (S,) shape Var."""
    s_dim = template.shape_dim
    jb = template.joint_basis.reshape(s_dim, -1)
    vb = template.vertex_basis.reshape(s_dim, -1)
    s_row = tape.reshape(shape, (1, s_dim))
    joints = tape.add(
        tape.constant(template.rest_joints),
        tape.reshape(tape.matmul(s_row, jb), template.rest_joints.shape),
    )
    verts = tape.add(
        tape.constant(template.rest_vertices),
        tape.reshape(tape.matmul(s_row, vb), template.rest_vertices.shape),
    )
    return joints, verts


def shaped_bone_lengths(template: BodyTemplate, shape) -> np.ndarray:
    joints, _ = apply_shape(template, shape)
    return bone_lengths(joints, template.tree.parents)


# ---------------------------------------------------------------------------
# forward kinematics


def fk_numpy(
    rest_joints, parents, local_quats, root_translation
) -> tuple[np.ndarray, np.ndarray]:
    """Forward kinematics over a sequence.

    Args:
        rest_joints: (J, 3) shaped rest joints.
        parents: (J,) parent indices.
        local_quats: (T, J, 4) unit local rotations in parent frames.
        root_translation: (T, 3).

    Returns:
        (positions (T, J, 3), global_quats (T, J, 4)).
    """
    rest_joints = np.asarray(rest_joints, dtype=np.float64)
    parents = np.asarray(parents, dtype=np.intp)
    q = np.asarray(local_quats, dtype=np.float64)
    trans = np.asarray(root_translation, dtype=np.float64)
    t, j = q.shape[0], q.shape[1]
    pos = np.zeros((t, j, 3))
    glob = np.zeros((t, j, 4))
    pos[:, 0] = trans + rest_joints[0]
    glob[:, 0] = q[:, 0]
    for child in range(1, j):
        parent = parents[child]
        offset = np.broadcast_to(rest_joints[child] - rest_joints[parent], (t, 3))
        pos[:, child] = pos[:, parent] + backend.quat_rotate(glob[:, parent], offset)
        glob[:, child] = backend.quat_mul(glob[:, parent], q[:, child])
    return pos, glob


def fk_tape(
    rest_joints: Var,
    parents,
    local_quats: Sequence[Var],
    root_translation: Var,
) -> tuple[Var, list[Var]]:
    """Differentiable FK.

    Args:
        rest_joints: (J, 3) Var of shaped rest joints.
        parents: (J,) parent indices.
        local_quats: per-joint (T, 4) Vars of unit local rotations.
        root_translation: (T, 3) Var.

    Returns:
        (positions (T, J, 3) Var, list of per-joint global quaternion Vars).
    """
    parents = np.asarray(parents, dtype=np.intp)
    j = parents.size
    t = local_quats[0].value.shape[0]
    glob: list[Var] = [local_quats[0]]
    root_rest = tape.expand0(rest_joints[0], t)
    pos: list[Var] = [tape.add(root_translation, root_rest)]
    for child in range(1, j):
        parent = parents[child]
        offset = tape.add(rest_joints[child], tape.mul(rest_joints[parent], -1.0))
        offset_t = tape.expand0(offset, t)
        pos.append(
            tape.add(pos[parent], tape.quat_rotate(glob[parent], offset_t))
        )
        glob.append(tape.quat_mul(glob[parent], local_quats[child]))
    stacked = tape.stack(pos, axis=1)
    return stacked, glob


def skin_vertices(
    template: BodyTemplate,
    shaped_rest_joints,
    shaped_rest_vertices,
    global_quats,
    world_joints,
) -> np.ndarray:
    """LBS over a sequence (numpy). global_quats (T, J, 4), world_joints (T, J, 3)."""
    rel = np.asarray(shaped_rest_vertices)[:, None, :] - np.asarray(
        shaped_rest_joints
    )[None, :, :]
    t, j = np.asarray(global_quats).shape[:2]
    rot = backend.quat_to_mat(np.asarray(global_quats).reshape(-1, 4)).reshape(
        t, j, 3, 3
    )
    return backend.lbs_forward(template.skin_weights, rel, rot, world_joints)


def skin_vertices_tape(
    template: BodyTemplate,
    shaped_rest_joints: Var,
    shaped_rest_vertices: Var,
    global_quats: list[Var],
    world_joints: Var,
) -> Var:
    """Differentiable LBS; returns a (T, V, 3) Var."""
    j = template.joint_count
    t = global_quats[0].value.shape[0]
    v = template.vertex_count
    rel = tape.add(
        tape.reshape(shaped_rest_vertices, (v, 1, 3)),
        tape.mul(tape.reshape(shaped_rest_joints, (1, j, 3)), -1.0),
    )
    quats = tape.concat([tape.reshape(q, (t, 1, 4)) for q in global_quats], axis=1)
    rot = tape.reshape(tape.quat_to_mat(tape.reshape(quats, (t * j, 4))), (t, j, 3, 3))
    return tape.lbs(template.skin_weights, rel, rot, world_joints)


# ---------------------------------------------------------------------------
# template scaling


def scale_template(template: BodyTemplate, target_lengths) -> BodyTemplate:
    """Rescale rest geometry so bone lengths match ``target_lengths``.

    Joint offsets are scaled along the tree; each vertex keeps its
    rest-relative offset from its dominant joint, scaled with that joint's
    incoming bone (root-dominated vertices use the mean scale of the root's
    outgoing bones). Applying the op twice with the same targets is a no-op
    because the first application already makes the rest lengths equal the
    targets.
    """
    target = np.asarray(target_lengths, dtype=np.float64)
    nb = template.joint_count - 1
    if target.shape != (nb,):
        raise ValueError("expected %d target lengths" % nb)
    if np.any(target <= 0.0):
        raise ValueError("target bone lengths must be positive")
    parents = template.tree.parents
    current = template.rest_bone_lengths
    factor = target / current
    new_joints = np.zeros_like(template.rest_joints)
    new_joints[0] = template.rest_joints[0]
    for child in range(1, template.joint_count):
        parent = parents[child]
        offset = template.rest_joints[child] - template.rest_joints[parent]
        new_joints[child] = new_joints[parent] + factor[child - 1] * offset

    joint_scale = np.empty(template.joint_count)
    for joint in range(template.joint_count):
        if joint == 0:
            kids = template.tree.children(0)
            joint_scale[0] = float(np.mean([factor[c - 1] for c in kids]))
        else:
            joint_scale[joint] = factor[joint - 1]
    anchor = np.argmax(template.skin_weights, axis=1)
    offsets = template.rest_vertices - template.rest_joints[anchor]
    new_verts = new_joints[anchor] + joint_scale[anchor, None] * offsets
    return replace(template, rest_joints=new_joints, rest_vertices=new_verts)


# ---------------------------------------------------------------------------
# plain-text serialization

_TEMPLATE_FIELDS = (
    "rest_joints",
    "rest_vertices",
    "skin_weights",
    "joint_basis",
    "vertex_basis",
    "length_gains",
    "twist_axes",
)


def save_template_text(template: BodyTemplate, path: str) -> None:
    """Write the template to a diffable text file (exact float round-trip)."""
    from . import textio

    with open(path, "w") as out:
        out.write(
            "body-template joints=%d vertices=%d shape=%d\n"
            % (template.joint_count, template.vertex_count, template.shape_dim)
        )
        textio.write_array(out, "parents", template.tree.parents)
        for name in _TEMPLATE_FIELDS:
            textio.write_array(out, name, getattr(template, name))


def load_template_text(path: str) -> BodyTemplate:
    from . import textio

    with open(path) as f:
        lines = f.readlines()
    if not lines or not lines[0].startswith("body-template "):
        raise ValueError("not a body-template file")
    parents, pos = textio.read_array(lines, 1, "parents", dtype=np.intp)
    arrays = {}
    for name in _TEMPLATE_FIELDS:
        arrays[name], pos = textio.read_array(lines, pos, name)
    return BodyTemplate(tree=KinematicTree(parents=parents), **arrays)
