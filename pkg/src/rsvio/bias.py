"""Constant accelerometer/gyroscope bias augmentation of the linear system.

An accelerometer bias enters the translation sums linearly, so it adds three
exact columns ``zeta_ij = (Z_i - Z_j) dt^2 / 2`` with
``Z_i = sum_{k<i} (2i - 2k - 1) R_k``. A gyroscope bias perturbs every
integrated rotation; to first order ``R_i(e) ~= R_i Exp(Phi_i e)`` with::

    Phi_i = sum_{k<i} R_{k+1->i} J_r(omega_k dt) dt

(``J_r`` the right Jacobian of SO(3)), which yields 3x3 derivative blocks for
the kappa terms and for the calibrated rays.

Sign convention: measurements are modeled as true value plus bias, so the
assembled columns carry the *negated* derivative blocks and the recovered
unknowns are the physical sensor biases.

Both biases are assumed constant over the short initialization window; ray
corrections are exposed as diagnostics but not folded into the linear system
(they multiply the unknown depths, which would break linearity).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    ImuStream,
    ScanlineGeometry,
    skew,
    so3_right_jacobian_batch,
)
from .validation import as_array


@dataclass(frozen=True)
class BiasConfig:
    """Which biases to add as unknowns; fixed values may be pre-corrected."""

    model_accel: bool = False
    model_gyro: bool = False
    e_a: np.ndarray | None = None   # known accelerometer bias, m/s^2
    e_w: np.ndarray | None = None   # known gyroscope bias, rad/s

    def __post_init__(self):
        if self.e_a is not None:
            object.__setattr__(self, "e_a", as_array(self.e_a, (3,), "e_a"))
        if self.e_w is not None:
            object.__setattr__(self, "e_w", as_array(self.e_w, (3,), "e_w"))

    @property
    def n_unknowns(self) -> int:
        return 3 * (int(self.model_accel) + int(self.model_gyro))


def corrected_stream(stream: ImuStream, cfg: BiasConfig) -> ImuStream:
    """Subtract known (fixed) biases from the measurements."""
    omega = stream.omega - (cfg.e_w if cfg.e_w is not None else 0.0)
    accel = stream.accel - (cfg.e_a if cfg.e_a is not None else 0.0)
    return ImuStream(omega, accel, stream.dt, stream.t0,
                     max_gyro=stream.max_gyro, max_accel=stream.max_accel)


# ---------------------------------------------------------------------------
# Accelerometer bias: exact linear columns
# ---------------------------------------------------------------------------

def _rotation_sums(geom: ScanlineGeometry):
    if geom._cum_R is None:
        n = geom.n
        w = 2.0 * np.arange(n) + 1.0
        zero = np.zeros((1, 3, 3))
        geom._cum_R = np.concatenate([zero, np.cumsum(geom.R[:n], axis=0)])
        geom._cum_R_w = np.concatenate(
            [zero, np.cumsum(w[:, None, None] * geom.R[:n], axis=0)])
    return geom._cum_R, geom._cum_R_w


def accel_bias_columns(geom: ScanlineGeometry, i: int, j: int) -> np.ndarray:
    """zeta_ij, the 3x3 coefficient of a constant accelerometer offset.

    Reduces to mu_ij * I when the rig does not rotate.
    """
    c1, c2 = _rotation_sums(geom)
    Z_i = 2.0 * i * c1[i] - c2[i]
    Z_j = 2.0 * j * c1[j] - c2[j]
    return (Z_i - Z_j) * geom.dt**2 / 2.0


# ---------------------------------------------------------------------------
# Gyroscope bias: first-order linearization
# ---------------------------------------------------------------------------

def _phi_table(geom: ScanlineGeometry) -> np.ndarray:
    """Phi_i for all scanline indices, via the right-to-left recurrence
    ``Phi_{k+1} = Omega_k^T Phi_k + J_r(omega_k dt) dt``."""
    if geom._phi is None:
        if geom._omega is None:
            raise ValueError("geometry was built without gyro samples; "
                             "gyro-bias Jacobians are unavailable")
        n = geom.n
        dt = geom.dt
        Jr = so3_right_jacobian_batch(geom._omega[:n] * dt)
        # Increments recovered from the prefix products keep Phi consistent
        # even when the stored rotations were externally perturbed.
        phi = np.empty((n + 1, 3, 3))
        phi[0] = 0.0
        acc = np.zeros((3, 3))
        R = geom.R
        for k in range(n):
            omega_k = R[k].T @ R[k + 1]
            acc = omega_k.T @ acc + Jr[k] * dt
            phi[k + 1] = acc
        geom._phi = phi
    return geom._phi


def _accel_cross_sums(geom: ScanlineGeometry):
    """Prefix sums of R_k [a_k]x Phi_k (plain and (2k+1)-weighted)."""
    if geom._cum_RaxPhi is None:
        if geom._accel is None:
            raise ValueError("geometry lacks accelerometer samples at scanline rate")
        phi = _phi_table(geom)
        n = geom.n
        a = geom._accel
        ax = np.zeros((n, 3, 3))
        ax[:, 0, 1] = -a[:, 2]
        ax[:, 0, 2] = a[:, 1]
        ax[:, 1, 0] = a[:, 2]
        ax[:, 1, 2] = -a[:, 0]
        ax[:, 2, 0] = -a[:, 1]
        ax[:, 2, 1] = a[:, 0]
        terms = geom.R[:n] @ ax @ phi[:n]
        w = 2.0 * np.arange(n) + 1.0
        zero = np.zeros((1, 3, 3))
        geom._cum_RaxPhi = np.concatenate([zero, np.cumsum(terms, axis=0)])
        geom._cum_RaxPhi_w = np.concatenate(
            [zero, np.cumsum(w[:, None, None] * terms, axis=0)])
    return geom._cum_RaxPhi, geom._cum_RaxPhi_w


def rotation_gyro_jacobian(geom: ScanlineGeometry, i: int) -> np.ndarray:
    """Phi_i: R_i(e) ~= R_i Exp(Phi_i e) for a small constant gyro offset e."""
    return _phi_table(geom)[i]


def lever_gyro_jacobian(geom: ScanlineGeometry, i: int, t_c) -> np.ndarray:
    """d(R_i t_c)/de: first-order change of a rotated extrinsic lever arm."""
    return -geom.R[i] @ skew(t_c) @ _phi_table(geom)[i]


def accel_sum_gyro_jacobian(geom: ScanlineGeometry, i: int) -> np.ndarray:
    """d(sum_k beta R_k a_k)/de, each term linearized at its own Phi_k."""
    g1, g2 = _accel_cross_sums(geom)
    return -(2.0 * i * g1[i] - g2[i])


def kappa_gyro_jacobian(geom: ScanlineGeometry, i: int, j: int,
                        t_ci, t_cj) -> np.ndarray:
    """d(kappa_ij)/de for a small constant gyro offset added to every sample."""
    d_lever = lever_gyro_jacobian(geom, i, t_ci) - lever_gyro_jacobian(geom, j, t_cj)
    d_accum = accel_sum_gyro_jacobian(geom, i) - accel_sum_gyro_jacobian(geom, j)
    return d_lever + d_accum * geom.dt**2 / 2.0


def ray_gyro_jacobian(geom: ScanlineGeometry, cam_id: int, i: int, u) -> np.ndarray:
    """d(p_{1:2})/de of the normalized calibrated ray at scanline i (2x3)."""
    u = np.asarray(u, dtype=np.float64)
    calib = geom.calib
    v = calib.R_cam_imu[cam_id] @ (calib.K_inv(cam_id) @ u)
    p, z, _ = geom.ray(cam_id, i, u)
    J_N = np.hstack([np.eye(2), -p[:2, None]]) / z
    return -J_N @ geom.R[i] @ skew(v) @ _phi_table(geom)[i]


@dataclass(frozen=True)
class GyroBiasJacobians:
    """First-order gyro-bias sensitivities at one scanline index."""

    phi: np.ndarray          # (3,3) rotation sensitivity
    d_lever: np.ndarray      # (3,3) d(R_i t_c)/de
    d_accel_sum: np.ndarray  # (3,3) d(sum beta R a)/de
    d_ray: np.ndarray        # (2,3) d p_{1:2}/de


def gyro_bias_jacobians(geom: ScanlineGeometry, cam_id: int, i: int, u) -> GyroBiasJacobians:
    """Bundle of the per-observation gyro-bias Jacobians (kappa terms and ray)."""
    t_c = geom.calib.t_cam_imu[cam_id]
    return GyroBiasJacobians(
        phi=rotation_gyro_jacobian(geom, i),
        d_lever=lever_gyro_jacobian(geom, i, t_c),
        d_accel_sum=accel_sum_gyro_jacobian(geom, i),
        d_ray=ray_gyro_jacobian(geom, cam_id, i, u),
    )


def assemble_with_bias(corrs, cfg: BiasConfig):
    """Assemble the linear system with bias columns appended to S.

    With both flags off this is identical to the plain assembly.
    """
    from .system import assemble

    return assemble(corrs, bias_cfg=cfg)
