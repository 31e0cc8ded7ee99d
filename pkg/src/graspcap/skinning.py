"""Canonical skinning-weight voxel grid and linear blend skinning.

The grid stores per-bone weights at voxel centers; weights are assigned by
nearest template point (exact lowest-index tie-breaking) and sampled by
trilinear interpolation with renormalization. Posing blends per-bone rigid
transforms elementwise, extracts the nearest rotation by polar
decomposition, and maps Gaussian positions/covariance factors.

Binary formats (little endian):
  template: int32 M, int32 B, then M*3 float32 positions, M*B float32 weights
  grid:     int32 dims[3], int32 B, float32 bounds[6] (min xyz, max xyz),
            then dims[0]*dims[1]*dims[2]*B float32 weights
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gaussian_cloud import GaussianCloud
from .kinematics import BoneTransforms
from .rotations import matrix_to_quat, polar_rotation, quat_multiply

_WEIGHT_TOL = 1e-6


@dataclass(frozen=True)
class WeightedTemplate:
    points: np.ndarray   # (M, 3) canonical positions
    weights: np.ndarray  # (M, B), rows sum to 1

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        w = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        if pts.shape[0] != w.shape[0]:
            raise ValueError("points/weights row count mismatch")
        if pts.shape[0] and np.abs(w.sum(axis=1) - 1.0).max() > _WEIGHT_TOL:
            raise ValueError("template weights must sum to 1 per point")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def num_bones(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class SkinningGrid:
    dims: tuple[int, int, int]
    bounds_min: np.ndarray  # (3,)
    bounds_max: np.ndarray  # (3,)
    weights: np.ndarray     # (dx, dy, dz, B)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "bounds_min", np.asarray(self.bounds_min, dtype=np.float64))
        object.__setattr__(self, "bounds_max", np.asarray(self.bounds_max, dtype=np.float64))
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape[:3] != self.dims:
            raise ValueError("weight array does not match dims")
        object.__setattr__(self, "weights", w)

    @property
    def num_bones(self) -> int:
        return self.weights.shape[3]

    @property
    def cell_size(self) -> np.ndarray:
        return (self.bounds_max - self.bounds_min) / np.array(self.dims)

    def voxel_centers_axis(self, axis: int) -> np.ndarray:
        d = self.dims[axis]
        cell = self.cell_size[axis]
        return self.bounds_min[axis] + (np.arange(d) + 0.5) * cell


def build_grid(
    template: WeightedTemplate,
    dims: tuple[int, int, int],
    bounds_min: np.ndarray,
    bounds_max: np.ndarray,
) -> SkinningGrid:
    """Assign each voxel center the weights of its nearest template point.

    Exact nearest neighbor with ties broken by lowest point index, computed
    by chunked brute-force argmin (the tie rule is contractual, so no tree).
    """
    if template.points.shape[0] < 1:
        raise ValueError("template must contain at least one point")
    dims = tuple(int(d) for d in dims)
    if min(dims) < 2:
        raise ValueError("grid needs at least 2 voxels per axis")
    bounds_min = np.asarray(bounds_min, dtype=np.float64)
    bounds_max = np.asarray(bounds_max, dtype=np.float64)
    grid = SkinningGrid(dims, bounds_min, bounds_max,
                        np.zeros(dims + (template.num_bones,)))
    xs = grid.voxel_centers_axis(0)
    ys = grid.voxel_centers_axis(1)
    zs = grid.voxel_centers_axis(2)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    centers = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)

    pts = template.points
    p_sq = np.einsum("ij,ij->i", pts, pts)
    nearest = np.empty(centers.shape[0], dtype=np.int64)
    chunk = max(1, int(4e7 // max(pts.shape[0], 1)))
    for s in range(0, centers.shape[0], chunk):
        c = centers[s : s + chunk]
        d2 = np.einsum("ij,ij->i", c, c)[:, None] - 2.0 * (c @ pts.T) + p_sq[None, :]
        nearest[s : s + chunk] = np.argmin(d2, axis=1)

    weights = template.weights[nearest].reshape(dims + (template.num_bones,))
    return SkinningGrid(dims, bounds_min, bounds_max, weights)


def sample_weights(grid: SkinningGrid, query: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of grid weights, renormalized to sum to 1.

    Accepts a single 3-vector or an (N, 3) batch; out-of-bounds queries
    clamp to the boundary voxel.
    """
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    cell = grid.cell_size
    # continuous voxel coordinates: voxel centers sit at integer coords
    u = (q - grid.bounds_min) / cell - 0.5
    dims = np.array(grid.dims)
    u = np.clip(u, 0.0, dims - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), dims - 2)
    f = u - i0  # in [0, 1]

    w = grid.weights
    out = np.zeros((q.shape[0], grid.num_bones))
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                corner = w[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                out += (wx * wy * wz)[:, None] * corner
    out /= out.sum(axis=1, keepdims=True)
    return out[0] if single else out


def blend_transforms(
    weights: np.ndarray, bones: BoneTransforms
) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise blend T_g = sum_b w_b T_b and its polar rotation R_g."""
    weights = np.asarray(weights, dtype=np.float64)
    T = np.einsum("b,bij->ij", weights, bones.matrices)
    R = polar_rotation(T[:3, :3][None])[0]
    return T, R


@dataclass(frozen=True)
class GaussianTransforms:
    """Per-Gaussian blended transforms produced by posing.

    matrices carry the raw blended T_g (possibly non-rigid); rotations the
    polar-extracted R_g; rot_quats its quaternion (for chaining rotation
    gradients back to canonical parameters).
    """

    matrices: np.ndarray   # (N, 4, 4)
    rotations: np.ndarray  # (N, 3, 3)
    rot_quats: np.ndarray  # (N, 4)

    def __len__(self) -> int:
        return self.matrices.shape[0]

    @staticmethod
    def identity(n: int) -> "GaussianTransforms":
        q = np.zeros((n, 4))
        q[:, 0] = 1.0
        return GaussianTransforms(
            matrices=np.tile(np.eye(4), (n, 1, 1)),
            rotations=np.tile(np.eye(3), (n, 1, 1)),
            rot_quats=q,
        )


def pose_cloud(
    cloud: GaussianCloud, grid: SkinningGrid, bones: BoneTransforms
) -> tuple[GaussianCloud, GaussianTransforms]:
    """Linear blend skinning of a canonical cloud.

    Positions map through the raw blended T_g; covariance factors rotate by
    the polar R_g (quaternion premultiplied, scales unchanged), so the
    assembled posed covariance equals R_g Sigma R_g^T.
    """
    W = sample_weights(grid, cloud.positions)  # (N, B)
    if W.shape[1] != bones.num_bones:
        raise ValueError("grid bone count does not match transforms")
    T = np.einsum("nb,bij->nij", W, bones.matrices)  # (N, 4, 4)
    Rg = polar_rotation(T[:, :3, :3])
    qg = matrix_to_quat(Rg)

    posed_pos = np.einsum("nij,nj->ni", T[:, :3, :3], cloud.positions) + T[:, :3, 3]
    posed_rot = quat_multiply(qg, cloud.rotations)
    posed_rot /= np.linalg.norm(posed_rot, axis=1, keepdims=True)
    posed = cloud.with_fields(positions=posed_pos, rotations=posed_rot)
    return posed, GaussianTransforms(matrices=T, rotations=Rg, rot_quats=qg)


def canonical_view_dir(T_g: np.ndarray, view_dir_posed: np.ndarray) -> np.ndarray:
    """Map a posed-space view direction into canonical space.

    Directions are unaffected by translation, so only the inverse rotation
    applies; the result is renormalized (the blended rotation may not be
    exactly orthonormal before polar extraction).
    """
    T_g = np.asarray(T_g, dtype=np.float64)
    R = polar_rotation(T_g[:3, :3][None])[0] if T_g.shape == (4, 4) else T_g
    v = R.T @ np.asarray(view_dir_posed, dtype=np.float64)
    return v / np.linalg.norm(v)


def template_from_skeleton(
    skel, points_per_bone: int = 24, rigid: bool = True
) -> WeightedTemplate:
    """One-hot template sampled along each bone segment (synthetic helper).

    Gives each non-root bone evenly spaced points on its parent-to-head
    segment carrying that bone's weight; the root contributes its head.
    """
    heads = skel.rest_heads()
    pts, ws = [], []
    B = skel.num_bones
    for i, b in enumerate(skel.bones):
        w = np.zeros(B)
        w[i] = 1.0
        if b.parent is None:
            pts.append(heads[i][None])
            ws.append(w[None])
            continue
        t = (np.arange(points_per_bone) + 0.5) / points_per_bone
        seg = heads[b.parent][None] + t[:, None] * (heads[i] - heads[b.parent])[None]
        pts.append(seg)
        ws.append(np.tile(w, (points_per_bone, 1)))
    return WeightedTemplate(np.concatenate(pts), np.concatenate(ws))


def save_template(template: WeightedTemplate, path: str | Path) -> None:
    m, b = template.weights.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<ii", m, b))
        f.write(template.points.astype("<f4").tobytes())
        f.write(template.weights.astype("<f4").tobytes())


def load_template(path: str | Path) -> WeightedTemplate:
    raw = Path(path).read_bytes()
    m, b = struct.unpack_from("<ii", raw, 0)
    pts = np.frombuffer(raw, dtype="<f4", count=m * 3, offset=8).reshape(m, 3)
    w = np.frombuffer(raw, dtype="<f4", count=m * b, offset=8 + 12 * m).reshape(m, b)
    w = w.astype(np.float64)
    w /= w.sum(axis=1, keepdims=True)  # restore exact partition after f32
    return WeightedTemplate(pts.astype(np.float64), w)


def save_grid(grid: SkinningGrid, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<iiii", *grid.dims, grid.num_bones))
        f.write(np.concatenate([grid.bounds_min, grid.bounds_max]).astype("<f4").tobytes())
        f.write(grid.weights.astype("<f4").tobytes())


def load_grid(path: str | Path) -> SkinningGrid:
    raw = Path(path).read_bytes()
    dx, dy, dz, b = struct.unpack_from("<iiii", raw, 0)
    bounds = np.frombuffer(raw, dtype="<f4", count=6, offset=16).astype(np.float64)
    w = np.frombuffer(raw, dtype="<f4", count=dx * dy * dz * b, offset=40)
    w = w.reshape(dx, dy, dz, b).astype(np.float64)
    s = w.sum(axis=3, keepdims=True)
    w = np.divide(w, s, out=w, where=s > 0)
    return SkinningGrid((dx, dy, dz), bounds[:3], bounds[3:], w)
