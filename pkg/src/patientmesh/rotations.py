"""Axis-angle rotations and their derivatives (all vectorized over leading axes)."""

import numpy as np

SMALL_ANGLE = 1e-7


def skew(v):
    """Cross-product matrices for (..., 3) vectors, shape (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=v.dtype)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def axis_angle_to_matrix(v):
    """Rodrigues' formula.

    Below ``SMALL_ANGLE`` the sin/cos coefficients are replaced by their
    second-order Taylor expansions, so ``v = 0`` maps to the identity exactly.
    """
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v, axis=-1)
    small = angle < SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    a = np.where(small, 1.0 - angle ** 2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - angle ** 2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)
    K = skew(v)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def axis_angle_jacobian(v):
    """Rotation matrices and their partials w.r.t. each axis-angle component.

    Returns ``R`` of shape (..., 3, 3) and ``dR`` of shape (..., 3, 3, 3) with
    ``dR[..., i, :, :] = dR / dv_i``.  Uses the closed form
    ``dR/dv_i = (v_i [v]x + [v x (I - R) e_i]x) R / |v|^2`` away from zero and
    the derivative of the Taylor expansion near it.
    """
    v = np.asarray(v, dtype=float)
    R = axis_angle_to_matrix(v)
    angle2 = np.sum(v * v, axis=-1)
    small = np.sqrt(angle2) < SMALL_ANGLE
    K = skew(v)
    eye = np.eye(3)
    E = skew(eye)  # E[i] = [e_i]x

    # generic branch
    safe2 = np.where(small, 1.0, angle2)
    I_minus_R = eye - R
    # columns of (I - R): (I - R) e_i
    cols = np.swapaxes(I_minus_R, -1, -2)  # (..., i, 3)
    cross = np.cross(v[..., None, :], cols)  # (..., i, 3)
    M = v[..., :, None, None] * K[..., None, :, :] + skew(cross)
    dR_gen = (M @ R[..., None, :, :]) / safe2[..., None, None, None]

    # near zero: d/dv_i (I + K + K^2/2) = E_i + (E_i K + K E_i)/2
    Kb = K[..., None, :, :]
    dR_small = E + 0.5 * (E @ Kb + Kb @ E)

    dR = np.where(small[..., None, None, None], dR_small, dR_gen)
    return R, dR


def matrix_to_axis_angle(R):
    """Inverse of Rodrigues for angles in [0, pi)."""
    from scipy.spatial.transform import Rotation

    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = Rotation.from_matrix(flat).as_rotvec()
    return out.reshape(R.shape[:-2] + (3,))
