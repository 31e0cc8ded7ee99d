"""Real spherical harmonics for view-dependent color, degrees 0..3.

Basis ordering and constants follow the splatting-community convention,
so coefficients round-trip through the common PLY layout. Colors are
  c(v) = 0.5 + sum_k phi_k Y_k(v)
with v a unit direction; the 0.5 offset makes zero coefficients mid-gray.
"""

from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Y_k at unit directions: (N, 3) -> (N, (degree+1)^2)."""
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    n = d.shape[0]
    out = np.empty((n, num_coeffs(degree)))
    out[:, 0] = C0
    if degree >= 1:
        out[:, 1] = -C1 * y
        out[:, 2] = C1 * z
        out[:, 3] = -C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = C2[0] * x * y
        out[:, 5] = C2[1] * y * z
        out[:, 6] = C2[2] * (2.0 * zz - xx - yy)
        out[:, 7] = C2[3] * x * z
        out[:, 8] = C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 9] = C3[0] * y * (3.0 * xx - yy)
        out[:, 10] = C3[1] * x * y * z
        out[:, 11] = C3[2] * y * (4.0 * zz - xx - yy)
        out[:, 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[:, 13] = C3[4] * x * (4.0 * zz - xx - yy)
        out[:, 14] = C3[5] * z * (xx - yy)
        out[:, 15] = C3[6] * x * (xx - 3.0 * yy)
    return out


def basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """dY_k/d(direction components): (N, (degree+1)^2, 3).

    Derivatives are of the raw polynomials; callers normalize directions
    and must chain through the normalization Jacobian themselves.
    """
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    n = d.shape[0]
    J = np.zeros((n, num_coeffs(degree), 3))
    if degree >= 1:
        J[:, 1, 1] = -C1
        J[:, 2, 2] = C1
        J[:, 3, 0] = -C1
    if degree >= 2:
        J[:, 4, 0] = C2[0] * y
        J[:, 4, 1] = C2[0] * x
        J[:, 5, 1] = C2[1] * z
        J[:, 5, 2] = C2[1] * y
        J[:, 6, 0] = C2[2] * (-2.0 * x)
        J[:, 6, 1] = C2[2] * (-2.0 * y)
        J[:, 6, 2] = C2[2] * (4.0 * z)
        J[:, 7, 0] = C2[3] * z
        J[:, 7, 2] = C2[3] * x
        J[:, 8, 0] = C2[4] * (2.0 * x)
        J[:, 8, 1] = C2[4] * (-2.0 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        J[:, 9, 0] = C3[0] * 6.0 * x * y
        J[:, 9, 1] = C3[0] * (3.0 * xx - 3.0 * yy)
        J[:, 10, 0] = C3[1] * y * z
        J[:, 10, 1] = C3[1] * x * z
        J[:, 10, 2] = C3[1] * x * y
        J[:, 11, 0] = C3[2] * (-2.0 * x * y)
        J[:, 11, 1] = C3[2] * (4.0 * zz - xx - 3.0 * yy)
        J[:, 11, 2] = C3[2] * 8.0 * y * z
        J[:, 12, 0] = C3[3] * (-6.0 * x * z)
        J[:, 12, 1] = C3[3] * (-6.0 * y * z)
        J[:, 12, 2] = C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        J[:, 13, 0] = C3[4] * (4.0 * zz - 3.0 * xx - yy)
        J[:, 13, 1] = C3[4] * (-2.0 * x * y)
        J[:, 13, 2] = C3[4] * 8.0 * x * z
        J[:, 14, 0] = C3[5] * 2.0 * x * z
        J[:, 14, 1] = C3[5] * (-2.0 * y * z)
        J[:, 14, 2] = C3[5] * (xx - yy)
        J[:, 15, 0] = C3[6] * (3.0 * xx - 3.0 * yy)
        J[:, 15, 1] = C3[6] * (-6.0 * x * y)
    return J


def evaluate(coeffs: np.ndarray, dirs: np.ndarray, degree: int) -> np.ndarray:
    """Colors (N, 3) from coefficients (N, C, 3) at unit directions (N, 3)."""
    Y = basis(dirs, degree)
    return 0.5 + np.einsum("nc,ncj->nj", Y, np.asarray(coeffs, dtype=np.float64))


def rgb_to_dc(rgb: np.ndarray) -> np.ndarray:
    """Degree-0 coefficient that reproduces a target color exactly."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / C0
