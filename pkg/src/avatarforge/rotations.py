"""Axis-angle rotations: Rodrigues formula and its reverse-mode derivative.

Everything is float64 and batched over arbitrary leading dimensions.
Below ``_SMALL_ANGLE`` both directions switch to the second-order Taylor
expansion, which removes the 0/0 singularity at the identity and keeps the
zero-pose case bit-exact (R(0) == I with no rounding).
"""

from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]x, batched: (..., 3) -> (..., 3, 3)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rodrigues(rotvec: np.ndarray) -> np.ndarray:
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3)."""
    v = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < _SMALL_ANGLE
    # Guard the divisions; the small branch overwrites these entries.
    theta_safe = np.where(small, 1.0, theta)
    k = skew(v)
    k2 = k @ k
    a = (np.sin(theta_safe) / theta_safe)[..., None, None]
    b = ((1.0 - np.cos(theta_safe)) / theta_safe**2)[..., None, None]
    eye = np.broadcast_to(np.eye(3), k.shape)
    big = eye + a * k + b * k2
    taylor = eye + k + 0.5 * k2
    return np.where(small[..., None, None], taylor, big)


def rodrigues_backward(rotvec: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. R back to the axis-angle vector.

    Uses the closed form dR/dv_i = (v_i [v]x + [v x ((I-R) e_i)]x) / |v|^2 R
    away from the origin, and the Taylor derivative of I + [v]x + 0.5 [v]x^2
    below the small-angle threshold.
    """
    v = np.asarray(rotvec, dtype=np.float64)
    grad_r = np.asarray(grad_r, dtype=np.float64)
    batch = v.shape[:-1]
    r = rodrigues(v)
    theta2 = np.sum(v * v, axis=-1)
    small = np.sqrt(theta2) < _SMALL_ANGLE

    grad = np.zeros_like(v)
    eye = np.eye(3)
    for i in range(3):
        e = eye[i]
        # (I - R) e_i, then v x (...)
        ime = eye[i] - r[..., :, i]
        cross = np.cross(np.broadcast_to(v, batch + (3,)), ime)
        num = v[..., i, None, None] * skew(v) + skew(cross)
        drdvi_big = (num / np.where(small, 1.0, theta2)[..., None, None]) @ r
        # Taylor: d/dv_i [ I + [v]x + 0.5(v v^T - |v|^2 I) ]
        drdvi_small = skew(np.broadcast_to(e, batch + (3,))).copy()
        drdvi_small += 0.5 * (
            e[:, None] * v[..., None, :] + v[..., :, None] * e[None, :]
        )
        drdvi_small -= v[..., i, None, None] * np.broadcast_to(eye, batch + (3, 3))
        drdvi = np.where(small[..., None, None], drdvi_small, drdvi_big)
        grad[..., i] = np.sum(grad_r * drdvi, axis=(-2, -1))
    return grad
