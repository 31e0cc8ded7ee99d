"""3D Gaussian primitive sets: construction, covariance assembly, skeleton
initialization, pruning/culling, concatenation, and PLY persistence.

Covariances are stored factored: a unit quaternion (rotation) and per-axis
log scales, assembled as R diag(exp(s))^2 R^T. Opacities are stored as
logits (logistic activation), colors as spherical-harmonic coefficients.

PLY layout follows the splatting-community convention: binary little
endian, vertex properties x,y,z, nx,ny,nz (zeros), f_dc_0..2,
f_rest_0..(3C-4) channel-major, opacity (logit), scale_0..2 (log),
rot_0..3 (wxyz), plus an optional uint bone_id.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cameras import Camera
from .kinematics import SkeletonDef
from .rotations import quat_to_matrix


class PlyError(ValueError):
    """Raised for malformed PLY headers or missing attributes."""


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p: float | np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class GaussianCloud:
    positions: np.ndarray       # (N, 3) meters
    rotations: np.ndarray       # (N, 4) unit quaternions, wxyz
    log_scales: np.ndarray      # (N, 3) log meters
    opacity_logits: np.ndarray  # (N,)
    sh_coeffs: np.ndarray       # (N, C, 3), C = (sh_degree + 1)^2
    sh_degree: int = 0
    bone_ids: np.ndarray | None = None  # (N,) birth bone, diagnostics only
    boundary: int | None = None         # concat split index (not persisted)

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        rot = np.atleast_2d(np.asarray(self.rotations, dtype=np.float64))
        ls = np.atleast_2d(np.asarray(self.log_scales, dtype=np.float64))
        op = np.atleast_1d(np.asarray(self.opacity_logits, dtype=np.float64))
        sh = np.asarray(self.sh_coeffs, dtype=np.float64)
        n = pos.shape[0]
        if sh.ndim == 2:  # allow (C, 3) for single-gaussian construction
            sh = sh[None]
        if not (rot.shape == (n, 4) and ls.shape == (n, 3) and op.shape == (n,)):
            raise ValueError("gaussian field arrays disagree on N")
        C = (self.sh_degree + 1) ** 2
        if sh.shape != (n, C, 3):
            raise ValueError(
                f"sh_coeffs shape {sh.shape} does not match N={n}, degree {self.sh_degree}"
            )
        if n and np.abs(np.linalg.norm(rot, axis=1) - 1.0).max() > 1e-6:
            raise ValueError("rotations must be unit quaternions")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "log_scales", ls)
        object.__setattr__(self, "opacity_logits", op)
        object.__setattr__(self, "sh_coeffs", sh)
        if self.bone_ids is not None:
            bid = np.atleast_1d(np.asarray(self.bone_ids, dtype=np.int32))
            if bid.shape != (n,):
                raise ValueError("bone_ids length mismatch")
            object.__setattr__(self, "bone_ids", bid)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def opacities(self) -> np.ndarray:
        """Activated opacities in (0, 1)."""
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        """Activated scales in meters, strictly positive."""
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        """Assembled (N, 3, 3) covariances R S S^T R^T."""
        R = quat_to_matrix(self.rotations)
        S2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", R, S2, R)

    def select(self, mask_or_index: np.ndarray) -> "GaussianCloud":
        """Subset preserving relative order; drops the boundary marker."""
        return GaussianCloud(
            positions=self.positions[mask_or_index],
            rotations=self.rotations[mask_or_index],
            log_scales=self.log_scales[mask_or_index],
            opacity_logits=self.opacity_logits[mask_or_index],
            sh_coeffs=self.sh_coeffs[mask_or_index],
            sh_degree=self.sh_degree,
            bone_ids=None if self.bone_ids is None else self.bone_ids[mask_or_index],
        )

    def with_fields(self, **kw) -> "GaussianCloud":
        return replace(self, **kw)


@dataclass(frozen=True)
class ObjectMaskSet:
    masks: tuple[np.ndarray, ...]   # (H, W) bool or {0,1}
    cameras: tuple[Camera, ...]

    def __post_init__(self):
        if len(self.masks) != len(self.cameras):
            raise ValueError("one camera per mask required")
        masks = []
        for m, c in zip(self.masks, self.cameras):
            m = np.asarray(m)
            if m.shape != (c.height, c.width):
                raise ValueError(
                    f"mask shape {m.shape} does not match camera {c.width}x{c.height}"
                )
            masks.append(m.astype(bool))
        object.__setattr__(self, "masks", tuple(masks))

    def __len__(self) -> int:
        return len(self.masks)


def covariance(rotation: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Single-gaussian covariance R diag(exp(s))^2 R^T; symmetric PD."""
    R = quat_to_matrix(np.asarray(rotation, dtype=np.float64))
    S2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    return R @ np.diag(S2) @ R.T


def _mean_nn_distance(points: np.ndarray) -> float:
    from scipy.spatial import cKDTree

    if points.shape[0] < 2:
        return 1e-3
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.mean(d[:, 1]))


def init_from_skeleton(
    skel: SkeletonDef,
    n_per_bone: int,
    seed: int,
    sh_degree: int = 0,
    midpoint_sigma_factor: float = 0.25,
) -> GaussianCloud:
    """Seed Gaussians from the canonical skeleton.

    Each bone receives n_per_bone positions from an isotropic normal at the
    midpoint of its parent-to-head segment with sigma = factor x segment
    length. The root has no segment; its Gaussians sit at its head with
    sigma from the mean child segment. Scales start at half the mean
    nearest-neighbor spacing of the bone's own samples, opacities at 0.1,
    colors at mid-gray (zero SH).
    """
    rng = np.random.default_rng(seed)
    heads = skel.rest_heads()
    lengths = skel.bone_lengths()

    positions, bone_ids, sigmas = [], [], []
    for i, b in enumerate(skel.bones):
        if b.parent is None:
            mid = heads[i]
            child_lens = [lengths[c] for c in skel.children(i)]
            seg = float(np.mean(child_lens)) if child_lens else 1e-2
        else:
            mid = 0.5 * (heads[b.parent] + heads[i])
            seg = lengths[i]
        sigma = max(midpoint_sigma_factor * seg, 1e-6)
        pts = rng.normal(loc=mid, scale=sigma, size=(n_per_bone, 3))
        positions.append(pts)
        bone_ids.append(np.full(n_per_bone, i, dtype=np.int32))
        sigmas.append(np.full(n_per_bone, sigma))

    n_total = n_per_bone * skel.num_bones
    if n_total == 0:
        return empty_cloud(sh_degree)
    positions = np.concatenate(positions)
    bone_ids = np.concatenate(bone_ids)

    log_scales = np.empty((n_total, 3))
    for i in range(skel.num_bones):
        sel = bone_ids == i
        s0 = 0.5 * _mean_nn_distance(positions[sel])
        log_scales[sel] = np.log(max(s0, 1e-6))

    C = (sh_degree + 1) ** 2
    rotations = np.zeros((n_total, 4))
    rotations[:, 0] = 1.0
    return GaussianCloud(
        positions=positions,
        rotations=rotations,
        log_scales=log_scales,
        opacity_logits=np.full(n_total, float(logit(0.1))),
        sh_coeffs=np.zeros((n_total, C, 3)),
        sh_degree=sh_degree,
        bone_ids=bone_ids,
    )


def init_random_in_box(
    lo: np.ndarray, hi: np.ndarray, n: int, seed: int, sh_degree: int = 0
) -> GaussianCloud:
    """Uniform random seed cloud inside an axis-aligned box (object models)."""
    rng = np.random.default_rng(seed)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if n == 0:
        return empty_cloud(sh_degree)
    positions = rng.uniform(lo, hi, size=(n, 3))
    s0 = 0.5 * _mean_nn_distance(positions)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianCloud(
        positions=positions,
        rotations=rotations,
        log_scales=np.full((n, 3), np.log(max(s0, 1e-6))),
        opacity_logits=np.full(n, float(logit(0.1))),
        sh_coeffs=np.zeros((n, (sh_degree + 1) ** 2, 3)),
        sh_degree=sh_degree,
    )


def empty_cloud(sh_degree: int = 0) -> GaussianCloud:
    C = (sh_degree + 1) ** 2
    return GaussianCloud(
        positions=np.zeros((0, 3)),
        rotations=np.zeros((0, 4)),
        log_scales=np.zeros((0, 3)),
        opacity_logits=np.zeros(0),
        sh_coeffs=np.zeros((0, C, 3)),
        sh_degree=sh_degree,
    )


def prune_by_opacity(cloud: GaussianCloud, threshold: float) -> GaussianCloud:
    """Keep Gaussians with activated opacity >= threshold, order preserved."""
    if not (0 < threshold < 1):
        raise ValueError("threshold must be in (0, 1)")
    return cloud.select(cloud.opacities >= threshold)


def cull_outside_masks(
    cloud: GaussianCloud, masks: ObjectMaskSet, min_views: int = 1
) -> GaussianCloud:
    """Remove Gaussians whose center falls outside the mask (or image, or
    in front of/behind the camera) in at least `min_views` views."""
    if len(masks) < 1:
        raise ValueError("need at least one view")
    if min_views > len(masks):
        raise ValueError("min_views exceeds view count")
    n = len(cloud)
    outside_count = np.zeros(n, dtype=np.int64)
    for mask, cam in zip(masks.masks, masks.cameras):
        px, z = cam.project(cloud.positions)
        ix = np.floor(px[:, 0] + 0.5).astype(np.int64)
        iy = np.floor(px[:, 1] + 0.5).astype(np.int64)
        in_img = (z > 0) & (ix >= 0) & (ix < cam.width) & (iy >= 0) & (iy < cam.height)
        inside = np.zeros(n, dtype=bool)
        idx = np.nonzero(in_img)[0]
        inside[idx] = mask[iy[idx], ix[idx]]
        outside_count += ~inside
    return cloud.select(outside_count < min_views)


def concat(a: GaussianCloud, b: GaussianCloud) -> GaussianCloud:
    """Concatenate two clouds, a's primitives first; the boundary index
    (= len(a)) is retained so membership stays recoverable."""
    if a.sh_degree != b.sh_degree:
        raise ValueError(f"sh_degree mismatch: {a.sh_degree} vs {b.sh_degree}")
    if a.bone_ids is not None or b.bone_ids is not None:
        bid_a = a.bone_ids if a.bone_ids is not None else np.full(len(a), -1, np.int32)
        bid_b = b.bone_ids if b.bone_ids is not None else np.full(len(b), -1, np.int32)
        bone_ids = np.concatenate([bid_a, bid_b])
    else:
        bone_ids = None
    return GaussianCloud(
        positions=np.concatenate([a.positions, b.positions]),
        rotations=np.concatenate([a.rotations, b.rotations]),
        log_scales=np.concatenate([a.log_scales, b.log_scales]),
        opacity_logits=np.concatenate([a.opacity_logits, b.opacity_logits]),
        sh_coeffs=np.concatenate([a.sh_coeffs, b.sh_coeffs]),
        sh_degree=a.sh_degree,
        bone_ids=bone_ids,
        boundary=len(a),
    )


def save_ply(cloud: GaussianCloud, path: str | Path) -> None:
    n = len(cloud)
    C = (cloud.sh_degree + 1) ** 2
    n_rest = 3 * (C - 1)
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(n_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    fields = [(nm, "<f4") for nm in names]
    if cloud.bone_ids is not None:
        fields.append(("bone_id", "<u4"))
    rec = np.zeros(n, dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = cloud.positions.T.astype(np.float32)
    rec["f_dc_0"], rec["f_dc_1"], rec["f_dc_2"] = cloud.sh_coeffs[:, 0, :].T.astype(np.float32)
    if n_rest:
        # channel-major: all higher-order coeffs of R, then G, then B
        rest = cloud.sh_coeffs[:, 1:, :].transpose(0, 2, 1).reshape(n, n_rest)
        for i in range(n_rest):
            rec[f"f_rest_{i}"] = rest[:, i].astype(np.float32)
    rec["opacity"] = cloud.opacity_logits.astype(np.float32)
    for i in range(3):
        rec[f"scale_{i}"] = cloud.log_scales[:, i].astype(np.float32)
    for i in range(4):
        rec[f"rot_{i}"] = cloud.rotations[:, i].astype(np.float32)
    if cloud.bone_ids is not None:
        rec["bone_id"] = cloud.bone_ids.astype(np.uint32)

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    for nm, dt in fields:
        header.append(f"property {'float' if dt == '<f4' else 'uint'} {nm}")
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uint": "<u4", "uint32": "<u4", "int": "<i4", "int32": "<i4",
    "uchar": "u1", "uint8": "u1",
}


def load_ply(path: str | Path) -> GaussianCloud:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"ply":
            raise PlyError(f"{path}: not a PLY file")
        n = None
        fields: list[tuple[str, str]] = []
        fmt = None
        while True:
            line = f.readline()
            if not line:
                raise PlyError(f"{path}: truncated header")
            tok = line.decode("ascii", "replace").strip().split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                if tok[1] != "vertex":
                    raise PlyError(f"{path}: unsupported element {tok[1]!r}")
                n = int(tok[2])
            elif tok[0] == "property":
                if tok[1] not in _PLY_TYPES:
                    raise PlyError(f"{path}: unsupported property type {tok[1]!r}")
                fields.append((tok[2], _PLY_TYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise PlyError(f"{path}: expected binary_little_endian, got {fmt!r}")
        if n is None:
            raise PlyError(f"{path}: missing vertex element")
        names = [nm for nm, _ in fields]
        for required in ("x", "y", "z", "opacity", "scale_0", "rot_0", "f_dc_0"):
            if required not in names:
                raise PlyError(f"{path}: missing required attribute {required!r}")
        rec = np.frombuffer(f.read(), dtype=np.dtype(fields), count=n)
        if rec.shape[0] != n:
            raise PlyError(f"{path}: vertex data shorter than header count {n}")

    n_rest = sum(nm.startswith("f_rest_") for nm in names)
    if n_rest % 3 != 0:
        raise PlyError(f"{path}: f_rest attribute count {n_rest} not divisible by 3")
    C = n_rest // 3 + 1
    deg = int(round(np.sqrt(C))) - 1
    if (deg + 1) ** 2 != C:
        raise PlyError(f"{path}: f_rest count {n_rest} is not a valid SH layout")

    positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    sh = np.zeros((n, C, 3))
    sh[:, 0, :] = np.stack([rec["f_dc_0"], rec["f_dc_1"], rec["f_dc_2"]], axis=1)
    if n_rest:
        rest = np.stack([rec[f"f_rest_{i}"] for i in range(n_rest)], axis=1)
        sh[:, 1:, :] = rest.reshape(n, 3, C - 1).transpose(0, 2, 1)
    rot = np.stack([rec[f"rot_{i}"] for i in range(4)], axis=1).astype(np.float64)
    # foreign splatting PLYs store unnormalized quaternions; normalize only
    # when needed so our own files round-trip bit-exactly
    norms = np.linalg.norm(rot, axis=1, keepdims=True)
    off = np.abs(norms[:, 0] - 1.0) > 1e-6
    if np.any(off):
        bad = off & (norms[:, 0] < 1e-12)
        rot[off] /= norms[off]
        rot[bad] = (1.0, 0.0, 0.0, 0.0)
    return GaussianCloud(
        positions=positions,
        rotations=rot,
        log_scales=np.stack([rec[f"scale_{i}"] for i in range(3)], axis=1).astype(np.float64),
        opacity_logits=rec["opacity"].astype(np.float64),
        sh_coeffs=sh,
        sh_degree=deg,
        bone_ids=rec["bone_id"].astype(np.int32) if "bone_id" in names else None,
    )
