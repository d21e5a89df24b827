"""SO(3) matrix helpers: hat/exp/log and the left/right Jacobians.

Rotation vectors are axis-angle 3-vectors; all functions accept float64
arrays. Small-angle branches switch below 1e-8 to Taylor expansions.
"""

import numpy as np

_SMALL = 1e-8


def skew(v):
    """3x3 cross-product matrix of v."""
    v = np.asarray(v, dtype=float)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def skew_batch(v):
    """Cross-product matrices for an array of vectors [..., 3] -> [..., 3, 3]."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def exp_matrix(rotvec):
    """Rodrigues formula: rotation vector -> rotation matrix."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec)
    W = skew(rotvec)
    if angle < _SMALL:
        return np.eye(3) + W + 0.5 * (W @ W)
    s = np.sin(angle) / angle
    c = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + s * W + c * (W @ W)


def log_matrix(R):
    """Rotation matrix -> rotation vector (inverse of exp_matrix)."""
    R = np.asarray(R, dtype=float)
    cos_angle = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    angle = np.arccos(cos_angle)
    axis_sin = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < _SMALL:
        return axis_sin * (1.0 + angle * angle / 6.0)
    if np.pi - angle < 1e-6:
        # Near pi the sine route is ill-conditioned; recover the axis from R + I.
        M = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(max(M[k, k], 1e-12))
        axis = axis / np.linalg.norm(axis)
        if np.dot(axis, axis_sin) < 0.0:
            axis = -axis
        return axis * angle
    return axis_sin * (angle / np.sin(angle))


def right_jacobian(rotvec):
    """Jr(theta): d Log(Exp(theta) Exp(d)) / d d at d=0."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec)
    W = skew(rotvec)
    if angle < _SMALL:
        return np.eye(3) - 0.5 * W + (W @ W) / 6.0
    a2 = angle * angle
    c1 = (1.0 - np.cos(angle)) / a2
    c2 = (angle - np.sin(angle)) / (a2 * angle)
    return np.eye(3) - c1 * W + c2 * (W @ W)


def left_jacobian(rotvec):
    return right_jacobian(-np.asarray(rotvec, dtype=float))


def right_jacobian_inv(rotvec):
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec)
    W = skew(rotvec)
    if angle < _SMALL:
        return np.eye(3) + 0.5 * W + (W @ W) / 12.0
    a2 = angle * angle
    c = 1.0 / a2 - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) + 0.5 * W + c * (W @ W)


def left_jacobian_inv(rotvec):
    return right_jacobian_inv(-np.asarray(rotvec, dtype=float))
