"""IMU preintegration between consecutive keyframes and its 15-dim residual.

Measurements between keyframes i and j are folded into relative rotation,
velocity, and position deltas with first-order bias-correction Jacobians
and a propagated 15x15 covariance (rot, vel, pos, gyro bias, accel bias).
The residual compares the bias-corrected deltas against the state pair,
whitened by the inverse Cholesky factor of the covariance.

Kinematic model (world gravity g, specific-force measurement a):
    R' = R Exp(w dt),  v' = v + (g + R a) dt,  p' = p + v dt + 0.5 (g + R a) dt^2
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .. import quaternions as quat
from .. import so3
from ..errors import EmptyWindow

# Residual/covariance block order: [rot, vel, pos, gyro_bias, accel_bias].
_ROT = slice(0, 3)
_VEL = slice(3, 6)
_POS = slice(6, 9)
_BG = slice(9, 12)
_BA = slice(12, 15)


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities (units per sqrt(Hz))."""

    gyro_noise: float = 1.7e-4
    accel_noise: float = 2e-3
    gyro_walk: float = 1e-5
    accel_walk: float = 1e-4

    def floored(self, floor: float = 1e-6) -> "ImuNoise":
        return ImuNoise(
            max(self.gyro_noise, floor),
            max(self.accel_noise, floor),
            max(self.gyro_walk, floor),
            max(self.accel_walk, floor),
        )


@dataclass
class PreintegratedImu:
    frame_i: int
    frame_j: int
    delta_rot: np.ndarray  # (4,) quaternion of the integrated rotation
    delta_vel: np.ndarray  # (3,)
    delta_pos: np.ndarray  # (3,)
    # First-order sensitivities of the deltas to the linearization biases.
    drot_dbg: np.ndarray
    dvel_dbg: np.ndarray
    dvel_dba: np.ndarray
    dpos_dbg: np.ndarray
    dpos_dba: np.ndarray
    covariance: np.ndarray  # (15, 15)
    gyro_bias_ref: np.ndarray
    accel_bias_ref: np.ndarray
    duration: float
    count: int
    sqrt_info: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.sqrt_info is None:
            L = np.linalg.cholesky(self.covariance)
            self.sqrt_info = scipy.linalg.solve_triangular(
                L, np.eye(15), lower=True, check_finite=False
            )


def preintegrate(samples, gyro_bias, accel_bias, noise: ImuNoise = ImuNoise(),
                 frame_i: int = 0, frame_j: int = 1) -> PreintegratedImu:
    """Integrate (gyro, accel, dt) samples at fixed bias linearization points.

    ``samples`` is an iterable of (gyro (3,), accel (3,), dt) or a tuple of
    arrays (gyro [N,3], accel [N,3], dt [N]).
    """
    if isinstance(samples, tuple) and len(samples) == 3:
        gyro_arr, accel_arr, dt_arr = (np.asarray(a, dtype=float) for a in samples)
    else:
        rows = list(samples)
        if not rows:
            raise EmptyWindow("preintegration needs at least one IMU sample")
        gyro_arr = np.array([r[0] for r in rows], dtype=float)
        accel_arr = np.array([r[1] for r in rows], dtype=float)
        dt_arr = np.array([r[2] for r in rows], dtype=float)
    if gyro_arr.shape[0] == 0:
        raise EmptyWindow("preintegration needs at least one IMU sample")
    if np.any(dt_arr <= 0.0):
        raise ValueError("IMU sample dt must be positive")

    noise = noise.floored()
    gyro_bias = np.asarray(gyro_bias, dtype=float)
    accel_bias = np.asarray(accel_bias, dtype=float)

    dq = quat.identity()
    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    drot_dbg = np.zeros((3, 3))
    dvel_dbg = np.zeros((3, 3))
    dvel_dba = np.zeros((3, 3))
    dpos_dbg = np.zeros((3, 3))
    dpos_dba = np.zeros((3, 3))
    P = np.zeros((15, 15))

    for w, a, dt in zip(gyro_arr - gyro_bias, accel_arr - accel_bias, dt_arr):
        wdt = w * dt
        step = so3.exp_matrix(wdt)
        Jr = so3.right_jacobian(wdt)
        a_skew = so3.skew(a)
        dR_a_skew = dR @ a_skew

        A = np.eye(15)
        A[_ROT, _ROT] = step.T
        A[_ROT, _BG] = -Jr * dt
        A[_VEL, _ROT] = -dR_a_skew * dt
        A[_VEL, _BA] = -dR * dt
        A[_POS, _ROT] = -0.5 * dR_a_skew * dt * dt
        A[_POS, _VEL] = np.eye(3) * dt
        A[_POS, _BA] = -0.5 * dR * dt * dt

        B = np.zeros((15, 12))
        B[_ROT, 0:3] = Jr * dt
        B[_VEL, 3:6] = dR * dt
        B[_POS, 3:6] = 0.5 * dR * dt * dt
        B[_BG, 6:9] = np.eye(3) * dt
        B[_BA, 9:12] = np.eye(3) * dt

        Q = np.diag(
            np.repeat(
                [
                    noise.gyro_noise**2,
                    noise.accel_noise**2,
                    noise.gyro_walk**2,
                    noise.accel_walk**2,
                ],
                3,
            )
            / dt
        )
        P = A @ P @ A.T + B @ Q @ B.T

        # Bias sensitivities propagate with the same recursion as the deltas.
        dpos_dbg = dpos_dbg + dvel_dbg * dt - 0.5 * dR_a_skew @ drot_dbg * dt * dt
        dpos_dba = dpos_dba + dvel_dba * dt - 0.5 * dR * dt * dt
        dvel_dbg = dvel_dbg - dR_a_skew @ drot_dbg * dt
        dvel_dba = dvel_dba - dR * dt
        drot_dbg = step.T @ drot_dbg - Jr * dt

        dp = dp + dv * dt + 0.5 * dR @ a * dt * dt
        dv = dv + dR @ a * dt
        dq = quat.multiply(dq, quat.from_rotvec(wdt))
        dq = quat.normalize(dq)
        dR = quat.to_matrix(dq)

    P = 0.5 * (P + P.T) + 1e-18 * np.eye(15)
    return PreintegratedImu(
        frame_i=frame_i,
        frame_j=frame_j,
        delta_rot=dq,
        delta_vel=dv,
        delta_pos=dp,
        drot_dbg=drot_dbg,
        dvel_dbg=dvel_dbg,
        dvel_dba=dvel_dba,
        dpos_dbg=dpos_dbg,
        dpos_dba=dpos_dba,
        covariance=P,
        gyro_bias_ref=gyro_bias.copy(),
        accel_bias_ref=accel_bias.copy(),
        duration=float(dt_arr.sum()),
        count=int(dt_arr.shape[0]),
    )


def eval_imu(factor: PreintegratedImu, states, whiten: bool = True):
    """Whitened residual (15,) and Jacobians (15,15) w.r.t. keyframes i and j.

    Column order per keyframe matches the state block layout
    [rot, trans, vel, gyro_bias, accel_bias].
    """
    i, j = factor.frame_i, factor.frame_j
    R_i = states.rotations()[i]
    R_j = states.rotations()[j]
    p_i, p_j = states.kf_trans[i], states.kf_trans[j]
    v_i, v_j = states.kf_vel[i], states.kf_vel[j]
    bg_i, bg_j = states.kf_gyro_bias[i], states.kf_gyro_bias[j]
    ba_i, ba_j = states.kf_accel_bias[i], states.kf_accel_bias[j]
    g = states.gravity
    dt = factor.duration

    dbg = bg_i - factor.gyro_bias_ref
    dba = ba_i - factor.accel_bias_ref

    # Bias-corrected deltas.
    rot_corr = factor.drot_dbg @ dbg
    dR_corr = quat.to_matrix(factor.delta_rot) @ so3.exp_matrix(rot_corr)
    dv_corr = factor.delta_vel + factor.dvel_dbg @ dbg + factor.dvel_dba @ dba
    dp_corr = factor.delta_pos + factor.dpos_dbg @ dbg + factor.dpos_dba @ dba

    E = dR_corr.T @ R_i.T @ R_j
    r_rot = so3.log_matrix(E)
    u_v = v_j - v_i - g * dt
    u_p = p_j - p_i - v_i * dt - 0.5 * g * dt * dt
    r = np.empty(15)
    r[_ROT] = r_rot
    r[_VEL] = R_i.T @ u_v - dv_corr
    r[_POS] = R_i.T @ u_p - dp_corr
    r[_BG] = bg_j - bg_i
    r[_BA] = ba_j - ba_i

    Jl_inv = so3.left_jacobian_inv(r_rot)
    M = dR_corr.T @ R_i.T  # rotation error pullback used by both pose columns
    Jr_corr = so3.right_jacobian(rot_corr)

    J_i = np.zeros((15, 15))
    J_j = np.zeros((15, 15))

    J_i[_ROT, 0:3] = -Jl_inv @ M
    J_j[_ROT, 0:3] = Jl_inv @ M
    J_i[_ROT, 9:12] = -Jl_inv @ Jr_corr @ factor.drot_dbg

    J_i[_VEL, 0:3] = R_i.T @ so3.skew(u_v)
    J_i[_VEL, 6:9] = -R_i.T
    J_j[_VEL, 6:9] = R_i.T
    J_i[_VEL, 9:12] = -factor.dvel_dbg
    J_i[_VEL, 12:15] = -factor.dvel_dba

    J_i[_POS, 0:3] = R_i.T @ so3.skew(u_p)
    J_i[_POS, 3:6] = -R_i.T
    J_j[_POS, 3:6] = R_i.T
    J_i[_POS, 6:9] = -R_i.T * dt
    J_i[_POS, 9:12] = -factor.dpos_dbg
    J_i[_POS, 12:15] = -factor.dpos_dba

    J_i[_BG, 9:12] = -np.eye(3)
    J_j[_BG, 9:12] = np.eye(3)
    J_i[_BA, 12:15] = -np.eye(3)
    J_j[_BA, 12:15] = np.eye(3)

    if whiten:
        W = factor.sqrt_info
        return W @ r, W @ J_i, W @ J_j
    return r, J_i, J_j
