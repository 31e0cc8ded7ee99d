"""Pinhole camera model: intrinsics, rigid extrinsics, projection, JSON I/O.

Pixel convention: the center of pixel (row v, col u) sits at continuous
image coordinates (u, v), i.e. integer pixel centers. Camera JSON format:
{"fx","fy","cx","cy","w","h","w2c":[16 floats row-major],"near","far"}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    w2c: np.ndarray = field(default_factory=lambda: np.eye(4))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise CameraError("require 0 < near < far")
        w2c = np.asarray(self.w2c, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "w2c", w2c)

    @property
    def rotation(self) -> np.ndarray:
        return self.w2c[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.w2c[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        """World points (..., 3) into camera coordinates."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points -> pixel coordinates (..., 2) and depths (...,).

        Points at or behind the camera plane get non-finite pixels; callers
        must gate on depth.
        """
        cam = self.to_camera(pts)
        z = cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[..., 0] / z + self.cx
            v = self.fy * cam[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix K [R|t] mapping homogeneous world points to pixels."""
        K = np.array(
            [[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]]
        )
        return K @ self.w2c[:3, :]


def save_camera(camera: Camera, path: str | Path) -> None:
    doc = {
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
        "w": camera.width,
        "h": camera.height,
        "w2c": [float(x) for x in camera.w2c.reshape(-1)],
        "near": camera.near,
        "far": camera.far,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_camera(path: str | Path) -> Camera:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise CameraError(f"camera file {path} is not valid JSON: {e}") from e
    try:
        return Camera(
            fx=float(doc["fx"]),
            fy=float(doc["fy"]),
            cx=float(doc["cx"]),
            cy=float(doc["cy"]),
            width=int(doc["w"]),
            height=int(doc["h"]),
            w2c=np.array(doc["w2c"], dtype=np.float64).reshape(4, 4),
            near=float(doc.get("near", 0.01)),
            far=float(doc.get("far", 100.0)),
        )
    except KeyError as e:
        raise CameraError(f"camera file {path} missing key {e}") from e


def look_at(
    eye: np.ndarray,
    target: np.ndarray,
    up: np.ndarray = (0.0, 0.0, 1.0),
) -> np.ndarray:
    """World-to-camera matrix for a camera at `eye` looking at `target`.

    Camera axes: +x right, +y down, +z forward (into the scene).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ eye
    return w2c
