"""Quaternion and rotation-matrix helpers shared across the package.

Quaternions are scalar-first (w, x, y, z). All functions accept batched
inputs with the quaternion/matrix axes last.
"""

from __future__ import annotations

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, batched over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_left_matrix(q: np.ndarray) -> np.ndarray:
    """4x4 matrix L(q) with quat_multiply(q, p) == L(q) @ p."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, -z, y],
            [y, z, w, -x],
            [z, -y, x, w],
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion; batched (..., 4) -> (..., 3, 3).

    The input is normalized internally, so near-unit quaternions are safe.
    """
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion of a rotation matrix; batched (..., 3, 3) -> (..., 4).

    Uses the Shepperd branch selection for numerical stability; the result
    has w >= 0.
    """
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    Rf = R.reshape((-1, 3, 3))
    n = Rf.shape[0]
    q = np.empty((n, 4), dtype=np.float64)
    m00, m01, m02 = Rf[:, 0, 0], Rf[:, 0, 1], Rf[:, 0, 2]
    m10, m11, m12 = Rf[:, 1, 0], Rf[:, 1, 1], Rf[:, 1, 2]
    m20, m21, m22 = Rf[:, 2, 0], Rf[:, 2, 1], Rf[:, 2, 2]
    tr = m00 + m11 + m22

    c0 = tr > 0
    c1 = (~c0) & (m00 >= m11) & (m00 >= m22)
    c2 = (~c0) & (~c1) & (m11 >= m22)
    c3 = ~(c0 | c1 | c2)

    s = np.sqrt(np.maximum(tr[c0] + 1.0, 0.0)) * 2
    q[c0, 0] = 0.25 * s
    q[c0, 1] = (m21[c0] - m12[c0]) / s
    q[c0, 2] = (m02[c0] - m20[c0]) / s
    q[c0, 3] = (m10[c0] - m01[c0]) / s

    s = np.sqrt(np.maximum(1.0 + m00[c1] - m11[c1] - m22[c1], 0.0)) * 2
    q[c1, 0] = (m21[c1] - m12[c1]) / s
    q[c1, 1] = 0.25 * s
    q[c1, 2] = (m01[c1] + m10[c1]) / s
    q[c1, 3] = (m02[c1] + m20[c1]) / s

    s = np.sqrt(np.maximum(1.0 - m00[c2] + m11[c2] - m22[c2], 0.0)) * 2
    q[c2, 0] = (m02[c2] - m20[c2]) / s
    q[c2, 1] = (m01[c2] + m10[c2]) / s
    q[c2, 2] = 0.25 * s
    q[c2, 3] = (m12[c2] + m21[c2]) / s

    s = np.sqrt(np.maximum(1.0 - m00[c3] - m11[c3] + m22[c3], 0.0)) * 2
    q[c3, 0] = (m10[c3] - m01[c3]) / s
    q[c3, 1] = (m02[c3] + m20[c3]) / s
    q[c3, 2] = (m12[c3] + m21[c3]) / s
    q[c3, 3] = 0.25 * s

    neg = q[:, 0] < 0
    q[neg] *= -1.0
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(batch + (4,))


def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


def axis_angle_quat(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    h = 0.5 * angle
    return np.concatenate([[np.cos(h)], np.sin(h) * axis])


def rotvec_to_matrix(r: np.ndarray) -> np.ndarray:
    """Exponential map of a rotation vector."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        K = skew(r)
        return np.eye(3) + K + 0.5 * (K @ K)
    return axis_angle_matrix(r / theta, theta)


def rotvec_to_quat(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        return quat_normalize(np.concatenate([[1.0], 0.5 * r]))
    return axis_angle_quat(r / theta, theta)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])


def polar_rotation(M: np.ndarray) -> np.ndarray:
    """Nearest rotation (Frobenius) to each 3x3 block; batched (..., 3, 3).

    Uses SVD with a determinant fix so the result is always a proper
    rotation (det +1).
    """
    M = np.asarray(M, dtype=np.float64)
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    det = np.linalg.det(R)
    flip = det < 0
    if np.any(flip):
        U = U.copy()
        U[flip, :, -1] *= -1.0
        R = U @ Vt
    return R


def quat_rotation_jacobian(q: np.ndarray) -> np.ndarray:
    """dR/dq for a *unit* quaternion q: returns (4, 3, 3).

    Callers holding an unnormalized quaternion must chain through
    quat_normalize_jacobian first.
    """
    w, x, y, z = np.asarray(q, dtype=np.float64)
    dw = 2 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    dx = 2 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]], dtype=np.float64)
    dy = 2 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]], dtype=np.float64)
    dz = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]], dtype=np.float64)
    return np.stack([dw, dx, dy, dz])


def quat_normalize_jacobian(q: np.ndarray) -> np.ndarray:
    """d(q/|q|)/dq: (4, 4) = (I - qhat qhat^T) / |q|."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    qh = q / n
    return (np.eye(4) - np.outer(qh, qh)) / n
