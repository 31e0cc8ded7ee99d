"""Hand skeleton definition, forward kinematics, and the FK Jacobian.

A skeleton is a topologically sorted tree of bones. Bone i pivots at its
*head*, placed at offset_i from the parent's head; all of the bone's
rotational DOFs act about that head. Terminal "tip" bones carry the
fingertip sites as their heads, so the bone heads are exactly the
skeleton's keypoints.

Skeleton JSON:
{"bones":[{"name","parent","offset":[x,y,z],"rest_rot":[w,x,y,z]}],
 "dofs":[{"bone","axis":[x,y,z],"lo","hi"}],"tips":[...]}
Pose JSON: {"angles":[...],"rot":[w,x,y,z],"trans":[x,y,z]}.
Units: meters and radians.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rotations import axis_angle_matrix, quat_normalize, quat_to_matrix


class SkeletonError(ValueError):
    """Raised for parse, topology, or joint-limit violations."""


@dataclass(frozen=True)
class Bone:
    name: str
    parent: int | None
    offset: np.ndarray
    rest_rot: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64))
        q = np.asarray(self.rest_rot, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise SkeletonError(f"bone {self.name!r}: rest_rot is not a unit quaternion")
        object.__setattr__(self, "rest_rot", q)


@dataclass(frozen=True)
class Dof:
    bone: int
    axis: np.ndarray
    lo: float
    hi: float

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=np.float64)
        n = np.linalg.norm(a)
        if n < 1e-9:
            raise SkeletonError("DOF axis must be nonzero")
        object.__setattr__(self, "axis", a / n)
        if self.lo > self.hi:
            raise SkeletonError(f"DOF on bone {self.bone}: lower limit {self.lo} > upper {self.hi}")


@dataclass(frozen=True)
class SkeletonDef:
    bones: tuple[Bone, ...]
    dofs: tuple[Dof, ...]
    tips: tuple[int, ...] = ()

    def __post_init__(self):
        roots = 0
        for i, b in enumerate(self.bones):
            if b.parent is None:
                roots += 1
            elif not (0 <= b.parent < i):
                raise SkeletonError(
                    f"bone {i} ({b.name!r}) has parent {b.parent}; bones must be "
                    "topologically sorted with parent < index"
                )
        if roots != 1:
            raise SkeletonError(f"skeleton must have exactly one root, found {roots}")
        for d in self.dofs:
            if not (0 <= d.bone < len(self.bones)):
                raise SkeletonError(f"DOF references unknown bone {d.bone}")
        for t in self.tips:
            if not (0 <= t < len(self.bones)):
                raise SkeletonError(f"tip marker references unknown bone {t}")

    @property
    def num_bones(self) -> int:
        return len(self.bones)

    @property
    def num_dofs(self) -> int:
        return len(self.dofs)

    def dofs_of_bone(self, bone: int) -> list[int]:
        return [k for k, d in enumerate(self.dofs) if d.bone == bone]

    def limits(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([d.lo for d in self.dofs])
        hi = np.array([d.hi for d in self.dofs])
        return lo, hi

    def children(self, bone: int) -> list[int]:
        return [i for i, b in enumerate(self.bones) if b.parent == bone]

    def rest_heads(self) -> np.ndarray:
        """Canonical (rest, identity-global) head position of every bone."""
        heads = np.zeros((self.num_bones, 3))
        rots = [None] * self.num_bones
        for i, b in enumerate(self.bones):
            R_local = quat_to_matrix(b.rest_rot)
            if b.parent is None:
                heads[i] = b.offset
                rots[i] = R_local
            else:
                heads[i] = heads[b.parent] + rots[b.parent] @ b.offset
                rots[i] = rots[b.parent] @ R_local
        return heads

    def bone_lengths(self) -> np.ndarray:
        """|offset| per bone; the root entry is 0 (no parent segment)."""
        lengths = np.array([np.linalg.norm(b.offset) for b in self.bones])
        root = next(i for i, b in enumerate(self.bones) if b.parent is None)
        lengths[root] = 0.0
        return lengths


@dataclass(frozen=True)
class Pose:
    joint_angles: np.ndarray
    global_rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    global_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(
            self, "joint_angles", np.asarray(self.joint_angles, dtype=np.float64)
        )
        q = np.asarray(self.global_rotation, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise SkeletonError("global_rotation must be a unit quaternion")
        object.__setattr__(self, "global_rotation", q)
        object.__setattr__(
            self, "global_translation", np.asarray(self.global_translation, dtype=np.float64)
        )

    @staticmethod
    def rest(skel: SkeletonDef) -> "Pose":
        return Pose(np.zeros(skel.num_dofs))


@dataclass(frozen=True)
class BoneTransforms:
    """Per-bone rigid maps from canonical (rest) space to posed space."""

    matrices: np.ndarray   # (B, 4, 4)
    rotations: np.ndarray  # (B, 3, 3)

    def __post_init__(self):
        object.__setattr__(self, "matrices", np.asarray(self.matrices, dtype=np.float64))
        object.__setattr__(self, "rotations", np.asarray(self.rotations, dtype=np.float64))

    @property
    def num_bones(self) -> int:
        return self.matrices.shape[0]


def _local_rotation(skel: SkeletonDef, bone: int, angles: np.ndarray) -> np.ndarray:
    R = quat_to_matrix(skel.bones[bone].rest_rot)
    for k in skel.dofs_of_bone(bone):
        R = R @ axis_angle_matrix(skel.dofs[k].axis, angles[k])
    return R


def _global_frames(skel: SkeletonDef, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """World rotation (B,3,3) and head position (B,3) of every bone."""
    B = skel.num_bones
    rots = np.empty((B, 3, 3))
    heads = np.empty((B, 3))
    Rg = quat_to_matrix(quat_normalize(pose.global_rotation))
    tg = pose.global_translation
    for i, b in enumerate(skel.bones):
        R_local = _local_rotation(skel, i, pose.joint_angles)
        if b.parent is None:
            heads[i] = Rg @ b.offset + tg
            rots[i] = Rg @ R_local
        else:
            heads[i] = heads[b.parent] + rots[b.parent] @ b.offset
            rots[i] = rots[b.parent] @ R_local
    return rots, heads


def forward_kinematics(skel: SkeletonDef, pose: Pose) -> BoneTransforms:
    """Canonical->posed rigid transform per bone.

    T_b = G_b(pose) @ G_b(rest)^-1, so the rest pose with an identity global
    transform yields identities.
    """
    if pose.joint_angles.shape[0] != skel.num_dofs:
        raise SkeletonError(
            f"pose has {pose.joint_angles.shape[0]} angles, skeleton has {skel.num_dofs} DOFs"
        )
    rots, heads = _global_frames(skel, pose)
    rest_rots, rest_heads = _global_frames(skel, Pose.rest(skel))
    B = skel.num_bones
    T = np.tile(np.eye(4), (B, 1, 1))
    # G G0^-1 with G0 rigid: rotation R R0^T, translation h - R R0^T h0.
    R = rots @ rest_rots.transpose(0, 2, 1)
    T[:, :3, :3] = R
    T[:, :3, 3] = heads - np.einsum("bij,bj->bi", R, rest_heads)
    return BoneTransforms(matrices=T, rotations=R)


def joint_positions(skel: SkeletonDef, transforms: BoneTransforms) -> np.ndarray:
    """Posed head position of every bone, (B, 3).

    Fingertip sites are the heads of the tip-marked terminal bones, so they
    are included in the returned array.
    """
    if transforms.num_bones != skel.num_bones:
        raise SkeletonError("transform count does not match skeleton")
    rest = skel.rest_heads()
    return (
        np.einsum("bij,bj->bi", transforms.matrices[:, :3, :3], rest)
        + transforms.matrices[:, :3, 3]
    )


def scale_bone_lengths(skel: SkeletonDef, lengths: np.ndarray) -> SkeletonDef:
    """Rescale rest offsets so each parent-to-head distance matches `lengths`.

    `lengths` has one entry per bone; the root entry is ignored. Offset
    directions are preserved.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    if lengths.shape[0] != skel.num_bones:
        raise SkeletonError("need one length per bone (root entry ignored)")
    bones = []
    for i, b in enumerate(skel.bones):
        if b.parent is None:
            bones.append(b)
            continue
        if lengths[i] <= 0:
            raise SkeletonError(f"bone {i} ({b.name!r}): non-positive length {lengths[i]}")
        norm = np.linalg.norm(b.offset)
        if norm < 1e-12:
            raise SkeletonError(f"bone {i} ({b.name!r}) has zero rest offset; cannot scale")
        bones.append(Bone(b.name, b.parent, b.offset * (lengths[i] / norm), b.rest_rot))
    return SkeletonDef(tuple(bones), skel.dofs, skel.tips)


def fk_jacobian(skel: SkeletonDef, pose: Pose) -> np.ndarray:
    """d(joint positions)/d(pose parameters), shape (3*B, D+6).

    Parameter order: articulation angles, then a global rotation increment
    (world-frame rotation vector about the origin, evaluated at zero), then
    global translation. The rotation columns match perturbing the pose as
    R <- exp([w]x) R_global.
    """
    if pose.joint_angles.shape[0] != skel.num_dofs:
        raise SkeletonError("pose does not match skeleton DOF layout")
    B, D = skel.num_bones, skel.num_dofs
    rots, heads = _global_frames(skel, pose)
    J = np.zeros((3 * B, D + 6))

    # Descendant masks: desc[b] marks bones strictly below b.
    desc = np.zeros((B, B), dtype=bool)
    for i, b in enumerate(skel.bones):
        if b.parent is not None:
            desc[b.parent, i] = True
            desc[:, i] |= desc[:, b.parent]

    Rg = quat_to_matrix(quat_normalize(pose.global_rotation))
    tg = pose.global_translation

    for k, d in enumerate(skel.dofs):
        b = d.bone
        # World-frame axis: parent world rotation, the bone's rest rotation,
        # then any of the bone's preceding DOF rotations.
        parent = skel.bones[b].parent
        R_pref = rots[parent] if parent is not None else Rg
        R_pref = R_pref @ quat_to_matrix(skel.bones[b].rest_rot)
        for kk in skel.dofs_of_bone(b):
            if kk == k:
                break
            R_pref = R_pref @ axis_angle_matrix(skel.dofs[kk].axis, pose.joint_angles[kk])
        axis_w = R_pref @ d.axis
        pivot = heads[b]
        for j in np.nonzero(desc[b])[0]:
            J[3 * j : 3 * j + 3, k] = np.cross(axis_w, heads[j] - pivot)

    for j in range(B):
        r = heads[j] - tg
        # d/dw of exp([w]x) (p - t): the three skew-basis columns.
        J[3 * j : 3 * j + 3, D + 0] = np.cross([1.0, 0, 0], r)
        J[3 * j : 3 * j + 3, D + 1] = np.cross([0, 1.0, 0], r)
        J[3 * j : 3 * j + 3, D + 2] = np.cross([0, 0, 1.0], r)
        J[3 * j : 3 * j + 3, D + 3 :] = np.eye(3)
    return J


def load_skeleton(path: str | Path) -> SkeletonDef:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SkeletonError(f"skeleton file {path} is not valid JSON: {e}") from e
    try:
        bones = tuple(
            Bone(
                name=b["name"],
                parent=b["parent"],
                offset=np.array(b["offset"], dtype=np.float64),
                rest_rot=np.array(b.get("rest_rot", [1.0, 0, 0, 0]), dtype=np.float64),
            )
            for b in doc["bones"]
        )
        dofs = tuple(
            Dof(bone=d["bone"], axis=np.array(d["axis"], dtype=np.float64), lo=float(d["lo"]), hi=float(d["hi"]))
            for d in doc.get("dofs", [])
        )
        tips = tuple(doc.get("tips", []))
    except (KeyError, TypeError) as e:
        raise SkeletonError(f"skeleton file {path} is malformed: {e}") from e
    return SkeletonDef(bones, dofs, tips)


def save_skeleton(skel: SkeletonDef, path: str | Path) -> None:
    doc = {
        "bones": [
            {
                "name": b.name,
                "parent": b.parent,
                "offset": [float(x) for x in b.offset],
                "rest_rot": [float(x) for x in b.rest_rot],
            }
            for b in skel.bones
        ],
        "dofs": [
            {"bone": d.bone, "axis": [float(x) for x in d.axis], "lo": d.lo, "hi": d.hi}
            for d in skel.dofs
        ],
        "tips": list(skel.tips),
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_pose(path: str | Path) -> Pose:
    doc = json.loads(Path(path).read_text())
    return Pose(
        joint_angles=np.array(doc["angles"], dtype=np.float64),
        global_rotation=np.array(doc["rot"], dtype=np.float64),
        global_translation=np.array(doc["trans"], dtype=np.float64),
    )


def save_pose(pose: Pose, path: str | Path) -> None:
    doc = {
        "angles": [float(x) for x in pose.joint_angles],
        "rot": [float(x) for x in pose.global_rotation],
        "trans": [float(x) for x in pose.global_translation],
    }
    Path(path).write_text(json.dumps(doc))


def default_skeleton_path() -> Path:
    """Path of the packaged 21-bone, 26-DOF hand skeleton."""
    return Path(__file__).parent / "data" / "hand_skeleton_21.json"
