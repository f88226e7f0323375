"""SE(3) exponential map and right Jacobian for pose increments.

Twists are ordered ``xi = (rho, theta)``: translation part first, rotation
part second. A pose is ``T = T0 @ exp(xi^)`` where ``T0`` is fixed.
"""

from __future__ import annotations

import math

import numpy as np

# Below this angle every sin/cos ratio switches to its Taylor series.
SMALL_ANGLE = 1e-6


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    w = np.asarray(w, dtype=float)
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def vee(S: np.ndarray) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def _coefficients(theta: float) -> tuple[float, float, float]:
    """Return sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s = math.sin(theta)
    one_minus_c = 2.0 * math.sin(theta / 2.0) ** 2   # 1 - cos without cancellation
    return s / theta, one_minus_c / theta**2, (theta - s) / theta**3


def so3_exp(theta: np.ndarray) -> np.ndarray:
    """Rodrigues rotation for a rotation vector (radians)."""
    theta = np.asarray(theta, dtype=float)
    a, b, _ = _coefficients(float(np.linalg.norm(theta)))
    K = hat(theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix, angle in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_t)
    if theta < SMALL_ANGLE:
        return vee(R - R.T) / 2.0
    if math.pi - theta < 1e-6:
        # Near pi the antisymmetric part vanishes; read the axis off R + I.
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        return theta * axis
    return theta / (2.0 * math.sin(theta)) * vee(R - R.T)


def so3_right_jacobian(theta: np.ndarray) -> np.ndarray:
    """J_R(theta) = I - (1-cos)/t^2 K + (t-sin)/t^3 K^2."""
    theta = np.asarray(theta, dtype=float)
    _, b, c = _coefficients(float(np.linalg.norm(theta)))
    K = hat(theta)
    return np.eye(3) - b * K + c * (K @ K)


def se3_exp(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exponential of a twist ``(rho, theta)``.

    Returns the rotation ``exp(theta^)`` and the translation
    ``J_R(theta)^T rho``.
    """
    xi = np.asarray(xi, dtype=float)
    rho, theta = xi[:3], xi[3:]
    return so3_exp(theta), so3_right_jacobian(theta).T @ rho


def se3_log(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Inverse of :func:`se3_exp` for rotation angles below pi."""
    theta = so3_log(R)
    rho = np.linalg.solve(so3_right_jacobian(theta).T, np.asarray(t, dtype=float))
    return np.concatenate([rho, theta])


def _qr_coefficients(theta: float) -> tuple[float, float, float, float]:
    """Scalar factors of the L = R Q_R block.

    (cos t - 1)/t^2, (t - sin t)/t^3,
    sin t/t^3 + 2(cos t - 1)/t^4, (cos t - 1)/t^4 + 3(t - sin t)/t^5.
    """
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return (-0.5 + t2 / 24.0, 1.0 / 6.0 - t2 / 120.0,
                -1.0 / 12.0 + t2 / 180.0, 1.0 / 60.0 - t2 / 1260.0)
    s = math.sin(theta)
    c = -2.0 * math.sin(theta / 2.0) ** 2   # cos - 1 without cancellation
    return (c / theta**2,
            (theta - s) / theta**3,
            s / theta**3 + 2.0 * c / theta**4,
            c / theta**4 + 3.0 * (theta - s) / theta**5)


def se3_right_jacobian(xi: np.ndarray) -> np.ndarray:
    """Right Jacobian [[J_R, Q_R], [0, J_R]] of SE(3) at ``xi``.

    Satisfies ``exp(xi + d) ~= exp(xi) exp((J d)^)`` to first order.
    """
    xi = np.asarray(xi, dtype=float)
    rho, theta = xi[:3], xi[3:]
    a1, a2, a3, a4 = _qr_coefficients(float(np.linalg.norm(theta)))
    tr = np.cross(theta, rho)
    L = (a1 * hat(rho)
         - a2 * (hat(tr) + np.outer(rho, theta) - float(theta @ rho) * np.eye(3))
         + a3 * np.outer(tr, theta)
         - a4 * np.outer(np.cross(theta, tr), theta))
    R = so3_exp(theta)
    J = so3_right_jacobian(theta)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[:3, 3:] = R.T @ L
    return out


def compose(R0: np.ndarray, c0: np.ndarray, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation of ``T0 exp(xi^)``."""
    dR, dt = se3_exp(xi)
    return R0 @ dR, R0 @ dt + c0


def backprop_pose(grad_R: np.ndarray, grad_c: np.ndarray, xi: np.ndarray,
                  R: np.ndarray | None = None) -> np.ndarray:
    """Gradient w.r.t. ``xi`` from gradients w.r.t. the composed pose.

    ``R`` is the composed rotation ``R0 exp(theta^)``. The local-frame
    gradient does not depend on ``T0``, so the same formula holds for any
    fixed base pose. ``R`` defaults to ``exp(theta^)`` (``T0 = I``).
    """
    if R is None:
        R = so3_exp(np.asarray(xi, dtype=float)[3:])
    W = R.T @ grad_R
    local = np.concatenate([
        R.T @ grad_c,
        [W[2, 1] - W[1, 2], W[0, 2] - W[2, 0], W[1, 0] - W[0, 1]],
    ])
    return se3_right_jacobian(xi).T @ local
