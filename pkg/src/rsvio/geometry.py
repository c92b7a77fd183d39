"""Discrete IMU integration, per-scanline rolling-shutter poses, and calibrated rays.

Conventions used throughout the package:

* The origin frame ("frame 0") is the IMU frame at the first scanline of the
  first image; its pose is (I, 0) by construction.
* ``R_i`` denotes the rotation taking IMU-frame vectors at scanline index
  ``i`` into frame 0; it is the product of per-sample exponential maps of the
  gyroscope increments.
* The translation of the IMU at index ``i`` is linear in the unknown initial
  velocity ``v0`` and gravity ``g0``::

      t_i = i*dt*v0 + (A_i + i^2 * g0) * dt^2 / 2

  where ``A_i = sum_{k<i} (2i - 2k - 1) R_k a_k`` is the double-integration
  weight of the accelerometer samples.
* The scanline timestamp of image row ``r`` in frame ``f`` is
  ``f / fps + r * readout_per_line`` (exposure offsets ignored; camera and
  IMU are assumed time-synchronized).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .validation import (
    DegenerateRayError,
    as_array,
    check_intrinsics,
    check_rotation,
    readonly,
)

log = logging.getLogger(__name__)

# Physical plausibility caps for IMU samples (overridable per stream).
MAX_GYRO_RAD_S = 50.0
MAX_ACCEL_M_S2 = 200.0

_SMALL_ANGLE = 1e-8


# ---------------------------------------------------------------------------
# SO(3) helpers
# ---------------------------------------------------------------------------

def skew(v) -> np.ndarray:
    """Skew-symmetric (cross-product) matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi) -> np.ndarray:
    """Rotation matrix from a rotation vector (Rodrigues, Taylor near zero)."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    S = skew(phi)
    if theta < _SMALL_ANGLE:
        # 2nd-order Taylor keeps the result orthonormal to machine precision.
        return np.eye(3) + S + 0.5 * (S @ S)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * S + b * (S @ S)


def so3_exp_batch(phi: np.ndarray) -> np.ndarray:
    """Vectorized :func:`so3_exp` for an (n, 3) array of rotation vectors."""
    phi = np.asarray(phi, dtype=np.float64)
    n = phi.shape[0]
    theta = np.linalg.norm(phi, axis=1)
    S = np.zeros((n, 3, 3))
    S[:, 0, 1] = -phi[:, 2]
    S[:, 0, 2] = phi[:, 1]
    S[:, 1, 0] = phi[:, 2]
    S[:, 1, 2] = -phi[:, 0]
    S[:, 2, 0] = -phi[:, 1]
    S[:, 2, 1] = phi[:, 0]
    SS = S @ S
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(t) / t)
    b = np.where(small, 0.5, (1.0 - np.cos(t)) / t**2)
    return np.eye(3) + a[:, None, None] * S + b[:, None, None] * SS


def so3_right_jacobian(phi) -> np.ndarray:
    """Right Jacobian of SO(3): Exp(phi + d) ~= Exp(phi) Exp(J_r(phi) d)."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    S = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * S + (S @ S) / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) - a * S + b * (S @ S)


def so3_right_jacobian_batch(phi: np.ndarray) -> np.ndarray:
    """Vectorized :func:`so3_right_jacobian` for an (n, 3) array."""
    phi = np.asarray(phi, dtype=np.float64)
    n = phi.shape[0]
    theta = np.linalg.norm(phi, axis=1)
    S = np.zeros((n, 3, 3))
    S[:, 0, 1] = -phi[:, 2]
    S[:, 0, 2] = phi[:, 1]
    S[:, 1, 0] = phi[:, 2]
    S[:, 1, 2] = -phi[:, 0]
    S[:, 2, 0] = -phi[:, 1]
    S[:, 2, 1] = phi[:, 0]
    SS = S @ S
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    a = np.where(small, 0.5, (1.0 - np.cos(t)) / t**2)
    b = np.where(small, 1.0 / 6.0, (t - np.sin(t)) / t**3)
    return np.eye(3) - a[:, None, None] * S + b[:, None, None] * SS


def nearest_rotation(M) -> np.ndarray:
    """Orthogonal projection of a 3x3 matrix onto SO(3)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImuSample:
    """One gyro/accelerometer reading pair in the IMU body frame."""

    omega: np.ndarray  # rad/s
    accel: np.ndarray  # m/s^2

    def __post_init__(self):
        object.__setattr__(self, "omega", readonly(as_array(self.omega, (3,), "omega")))
        object.__setattr__(self, "accel", readonly(as_array(self.accel, (3,), "accel")))


@dataclass(frozen=True)
class ImuStream:
    """Uniformly sampled gyro/accelerometer sequence.

    ``omega`` and ``accel`` are (n, 3) arrays; sample ``k`` is taken at
    ``t0 + k * dt``.
    """

    omega: np.ndarray
    accel: np.ndarray
    dt: float
    t0: float = 0.0
    max_gyro: float = MAX_GYRO_RAD_S
    max_accel: float = MAX_ACCEL_M_S2

    def __post_init__(self):
        omega = as_array(self.omega, None, "omega")
        accel = as_array(self.accel, None, "accel")
        if omega.ndim != 2 or omega.shape[1] != 3 or omega.shape != accel.shape:
            raise ValueError("omega/accel must be matching (n, 3) arrays")
        if omega.shape[0] == 0:
            raise ValueError("ImuStream must contain at least one sample")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        wmax = np.abs(omega).max(initial=0.0)
        amax = np.abs(accel).max(initial=0.0)
        if wmax >= self.max_gyro:
            raise ValueError(f"|omega| = {wmax:.3g} exceeds cap {self.max_gyro}")
        if amax >= self.max_accel:
            raise ValueError(f"|accel| = {amax:.3g} exceeds cap {self.max_accel}")
        object.__setattr__(self, "omega", readonly(omega))
        object.__setattr__(self, "accel", readonly(accel))

    def __len__(self) -> int:
        return self.omega.shape[0]

    @property
    def duration(self) -> float:
        return (len(self) - 1) * self.dt

    def sample(self, k: int) -> ImuSample:
        return ImuSample(self.omega[k], self.accel[k])

    @staticmethod
    def from_samples(samples, dt: float, t0: float = 0.0) -> "ImuStream":
        omega = np.array([s.omega for s in samples])
        accel = np.array([s.accel for s in samples])
        return ImuStream(omega, accel, dt, t0)


@dataclass(frozen=True)
class RigCalibration:
    """Camera intrinsics, camera->IMU extrinsics, and shutter timing.

    Per-camera quantities are stacked along the leading axis; mono rigs use
    single-element stacks.
    """

    K: np.ndarray            # (ncam, 3, 3), pixels
    R_cam_imu: np.ndarray    # (ncam, 3, 3), camera->IMU rotation
    t_cam_imu: np.ndarray    # (ncam, 3), camera origin in the IMU frame, m
    readout_per_line: float  # s
    image_height: int        # rows
    fps: float               # Hz
    image_width: int = 0     # columns; informational (used for FOV checks)

    def __post_init__(self):
        K = np.atleast_3d(np.asarray(self.K, dtype=np.float64))
        if K.ndim != 3:
            raise ValueError("K must be (ncam, 3, 3)")
        R = as_array(self.R_cam_imu, (K.shape[0], 3, 3), "R_cam_imu")
        t = as_array(self.t_cam_imu, (K.shape[0], 3), "t_cam_imu")
        for c in range(K.shape[0]):
            check_intrinsics(K[c], f"K[{c}]")
            check_rotation(R[c], f"R_cam_imu[{c}]")
        if not self.readout_per_line > 0:
            raise ValueError("readout_per_line must be positive")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        if self.readout_per_line * self.image_height > 1.0 / self.fps + 1e-12:
            raise ValueError("readout_per_line * image_height exceeds the frame period")
        object.__setattr__(self, "K", readonly(K))
        object.__setattr__(self, "R_cam_imu", readonly(R))
        object.__setattr__(self, "t_cam_imu", readonly(t))

    @property
    def n_cameras(self) -> int:
        return self.K.shape[0]

    @property
    def baseline(self) -> float:
        """Distance between the first two camera centers (0 for mono rigs)."""
        if self.n_cameras < 2:
            return 0.0
        return float(np.linalg.norm(self.t_cam_imu[0] - self.t_cam_imu[1]))

    def K_inv(self, cam: int) -> np.ndarray:
        return np.linalg.inv(self.K[cam])


@dataclass(frozen=True)
class Pose:
    """Rigid transform taking IMU-frame vectors at some scanline into frame 0."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", readonly(check_rotation(self.R)))
        object.__setattr__(self, "t", readonly(as_array(self.t, (3,), "t")))


@dataclass(frozen=True)
class Observation:
    """An image measurement of a tracked point on a specific scanline.

    ``scanline_index`` is None for raw (file-loaded) measurements; it is
    bound when the observation is attached to scanline geometry.
    """

    cam_id: int
    frame: int
    row: float
    u: np.ndarray           # homogeneous pixel coordinates, u[2] == 1
    scanline_index: int | None = None

    def __post_init__(self):
        u = as_array(self.u, (3,), "u")
        if not np.isclose(u[2], 1.0):
            raise ValueError("observation u must be homogeneous with u[2] == 1")
        if self.row < 0:
            raise ValueError("row must be non-negative")
        object.__setattr__(self, "u", readonly(u))


# ---------------------------------------------------------------------------
# Operations on streams
# ---------------------------------------------------------------------------

def upsample_imu(stream: ImuStream, target_dt: float) -> ImuStream:
    """Linearly interpolate a stream to a finer sampling period.

    Endpoints are preserved; ``target_dt`` must not exceed the stream period
    (this is an upsampler, not a resampler).
    """
    if not target_dt > 0:
        raise ValueError("target_dt must be positive")
    if target_dt > stream.dt * (1 + 1e-9):
        raise ValueError("target_dt exceeds the stream period (upsampling only)")
    n_new = int(round(stream.duration / target_dt)) + 1
    t_old = np.arange(len(stream)) * stream.dt
    t_new = np.arange(n_new) * target_dt
    # Clamp rounding spill at the tail so interpolation stays inside the data.
    t_new = np.minimum(t_new, t_old[-1])
    omega = np.column_stack([np.interp(t_new, t_old, stream.omega[:, k]) for k in range(3)])
    accel = np.column_stack([np.interp(t_new, t_old, stream.accel[:, k]) for k in range(3)])
    return ImuStream(omega, accel, target_dt, stream.t0,
                     max_gyro=stream.max_gyro, max_accel=stream.max_accel)


def integrate_rotations(stream: ImuStream, renorm_every: int = 1000) -> np.ndarray:
    """Prefix products of gyro exponential maps: (n+1, 3, 3) with R[0] = I.

    Products are re-projected onto SO(3) every ``renorm_every`` compositions
    to bound drift over long scanline-rate sequences.
    """
    n = len(stream)
    incs = so3_exp_batch(stream.omega * stream.dt)
    R = np.empty((n + 1, 3, 3))
    R[0] = np.eye(3)
    acc = np.eye(3)
    for k in range(n):
        acc = acc @ incs[k]
        if renorm_every and (k + 1) % renorm_every == 0:
            acc = nearest_rotation(acc)
        R[k + 1] = acc
    return R


def integrate_rotation(stream: ImuStream, i: int) -> np.ndarray:
    """Rotation from the IMU frame at sample index ``i`` to frame 0."""
    if not 0 <= i <= len(stream):
        raise IndexError(f"rotation index {i} outside [0, {len(stream)}]")
    R = np.eye(3)
    for k in range(i):
        R = R @ so3_exp(stream.omega[k] * stream.dt)
        if (k + 1) % 1000 == 0:
            R = nearest_rotation(R)
    return R


def integrate_translation(stream: ImuStream, rotations: np.ndarray,
                          v0, g0, i: int) -> np.ndarray:
    """IMU translation at sample index ``i`` for given initial conditions.

    ``rotations`` must hold the prefix rotations for all k < i (as produced
    by :func:`integrate_rotations`). The origin convention fixes t_0 = 0.
    """
    if not 0 <= i <= len(stream):
        raise IndexError(f"translation index {i} outside [0, {len(stream)}]")
    v0 = as_array(v0, (3,), "v0")
    g0 = as_array(g0, (3,), "g0")
    dt = stream.dt
    if i == 0:
        return np.zeros(3)
    k = np.arange(i)
    beta = 2.0 * i - 2.0 * k - 1.0
    Ra = np.einsum("kij,kj->ki", rotations[:i], stream.accel[:i])
    acc_term = (beta[:, None] * Ra).sum(axis=0)
    return i * dt * v0 + (acc_term + i**2 * g0) * dt**2 / 2.0


# ---------------------------------------------------------------------------
# Scanline geometry
# ---------------------------------------------------------------------------

class ScanlineGeometry:
    """Per-scanline pose machinery for one capture window.

    Stores the integrated prefix rotations and the accelerometer prefix sums
    at scanline rate, so poses at any scanline index are O(1):

    * ``accel_term(i) = 2 i * cum_Ra[i] - cum_Ra_w[i]`` reproduces the exact
      discrete double sum with ``beta`` weights.
    * ``translation(i, v0, g0)`` is linear in both unknowns.

    ``shutter`` is ``"rs"`` (one pose per scanline) or ``"gs-on-rs"`` (every
    row of a frame is assigned the middle-row pose, the global-shutter
    approximation used for model-error studies).
    """

    def __init__(self, dt: float, rotations: np.ndarray, accel: np.ndarray | None,
                 calib: RigCalibration, shutter: str = "rs",
                 A_override: np.ndarray | None = None,
                 omega: np.ndarray | None = None):
        if shutter not in ("rs", "gs-on-rs"):
            raise ValueError(f"unknown shutter mode {shutter!r}")
        n = rotations.shape[0] - 1
        self.dt = float(dt)
        self.calib = calib
        self.shutter = shutter
        self.n = n
        self.R = rotations
        self._accel = accel
        self._A_override = A_override
        if accel is not None:
            if accel.shape != (n, 3):
                raise ValueError("accel must be (n, 3) for (n+1, 3, 3) rotations")
            Ra = np.einsum("kij,kj->ki", rotations[:n], accel)
            w = 2.0 * np.arange(n) + 1.0
            self.cum_Ra = np.vstack([np.zeros(3), np.cumsum(Ra, axis=0)])
            self.cum_Ra_w = np.vstack([np.zeros(3), np.cumsum(w[:, None] * Ra, axis=0)])
        elif A_override is None:
            raise ValueError("either accel samples or a precomputed A table is required")
        self._omega = omega
        self._Kinv = np.stack([calib.K_inv(c) for c in range(calib.n_cameras)])
        # Lazy caches for the gyro-bias linearization (see bias module).
        self._phi = None
        self._cum_RaxPhi = None
        self._cum_RaxPhi_w = None
        self._cum_R = None
        self._cum_R_w = None

    # -- construction -----------------------------------------------------

    @classmethod
    def build(cls, stream: ImuStream, calib: RigCalibration, shutter: str = "rs",
              mode: str = "interpolate-then-integrate",
              renorm_every: int = 1000) -> "ScanlineGeometry":
        """Build scanline-rate geometry from a native-rate IMU stream.

        ``mode`` selects the default interpolate-then-integrate pipeline or
        the integrate-then-interpolate alternative (integration at native
        rate, poses interpolated to scanline times).
        """
        target = calib.readout_per_line
        if mode == "interpolate-then-integrate":
            up = stream if abs(stream.dt - target) < 1e-15 else upsample_imu(stream, target)
            R = integrate_rotations(up, renorm_every)
            return cls(up.dt, R, up.accel, calib, shutter, omega=up.omega)
        if mode != "integrate-then-interpolate":
            raise ValueError(f"unknown integration mode {mode!r}")

        R_nat = integrate_rotations(stream, renorm_every)
        n_nat = len(stream)
        Ra = np.einsum("kij,kj->ki", R_nat[:n_nat], stream.accel)
        w = 2.0 * np.arange(n_nat) + 1.0
        c1 = np.vstack([np.zeros(3), np.cumsum(Ra, axis=0)])
        c2 = np.vstack([np.zeros(3), np.cumsum(w[:, None] * Ra, axis=0)])
        idx = np.arange(n_nat + 1)
        A_nat = 2.0 * idx[:, None] * c1 - c2

        n_new = int(round(stream.duration / target))
        t_new = np.arange(n_new + 1) * target
        x = np.minimum(t_new / stream.dt, n_nat)
        k0 = np.minimum(x.astype(int), n_nat - 1)
        frac = x - k0
        from scipy.spatial.transform import Rotation, Slerp
        rot = Rotation.from_matrix(R_nat)
        R_new = Slerp(idx.astype(float), rot)(x).as_matrix()
        # Rescale the interpolated accel weight to the scanline-rate formula:
        # translation code evaluates A * dt_scan^2 / 2, while A_nat carries
        # the native-rate weights, hence the (dt_nat/dt_scan)^2 factor.
        A_new = (A_nat[k0] * (1 - frac[:, None]) + A_nat[np.minimum(k0 + 1, n_nat)] * frac[:, None])
        A_new = A_new * (stream.dt / target) ** 2
        return cls(target, R_new, None, calib, shutter, A_override=A_new)

    # -- pose evaluation ---------------------------------------------------

    @property
    def frame_stride(self) -> float:
        """Scanline indices between consecutive frame starts."""
        return (1.0 / self.calib.fps) / self.dt

    def scanline_index(self, frame: int, row: float):
        """Global scanline-time index of (frame, row) under the shutter model."""
        if self.shutter == "gs-on-rs":
            row = self.calib.image_height // 2
        i = np.rint(np.asarray(frame) * self.frame_stride
                    + np.asarray(row) * self.calib.readout_per_line / self.dt).astype(int)
        if np.any(i < 0) or np.any(i > self.n):
            raise ValueError(
                f"scanline of frame {frame} row {row} outside IMU coverage [0, {self.n}]")
        return i if i.ndim else int(i)

    def rotation(self, i) -> np.ndarray:
        return self.R[i]

    def accel_term(self, i) -> np.ndarray:
        """A_i = sum_{k<i} (2i - 2k - 1) R_k a_k, via the two prefix sums."""
        if self._A_override is not None:
            return self._A_override[i]
        i_arr = np.asarray(i, dtype=np.float64)
        return 2.0 * i_arr[..., None] * self.cum_Ra[i] - self.cum_Ra_w[i]

    def translation(self, i, v0, g0) -> np.ndarray:
        i_arr = np.asarray(i, dtype=np.float64)
        v0 = np.asarray(v0, dtype=np.float64)
        g0 = np.asarray(g0, dtype=np.float64)
        return (i_arr[..., None] * self.dt * v0
                + (self.accel_term(i) + i_arr[..., None] ** 2 * g0) * self.dt**2 / 2.0)

    def pose(self, frame: int, row: float, v0, g0) -> Pose:
        i = self.scanline_index(frame, row)
        return Pose(self.R[i], self.translation(i, v0, g0))

    # -- rays ---------------------------------------------------------------

    def ray(self, cam_id: int, i: int, u):
        """Calibrated homogeneous ray of a pixel at scanline index ``i``.

        Returns ``(p, ptilde_z, Rtilde)`` with ``p`` normalized to its third
        coordinate, ``ptilde_z`` the pre-normalization third component, and
        ``Rtilde = R_i @ R_cam_imu`` (needed by the noise propagation).
        """
        u = np.asarray(u, dtype=np.float64)
        Rtilde = self.R[i] @ self.calib.R_cam_imu[cam_id]
        ptilde = Rtilde @ (self._Kinv[cam_id] @ u)
        z = ptilde[2]
        if abs(z) < 1e-9 * np.linalg.norm(ptilde):
            raise DegenerateRayError(
                f"ray of cam {cam_id} at scanline {i} is parallel to the normalization plane")
        return ptilde / z, z, Rtilde


def scanline_pose(stream: ImuStream, calib: RigCalibration, frame: int, row: float,
                  v0, g0, shutter: str = "rs") -> Pose:
    """Pose of (frame, row) via interpolate-then-integrate at scanline rate."""
    geom = ScanlineGeometry.build(stream, calib, shutter)
    return geom.pose(frame, row, v0, g0)


def calibrated_ray(obs: Observation, calib: RigCalibration, R_i0) -> np.ndarray:
    """Normalized ray N(R_i @ R_cam_imu @ K^-1 @ u) of one observation."""
    R_i0 = check_rotation(R_i0, "R_i0")
    ptilde = R_i0 @ calib.R_cam_imu[obs.cam_id] @ (calib.K_inv(obs.cam_id) @ obs.u)
    z = ptilde[2]
    if abs(z) < 1e-9 * np.linalg.norm(ptilde):
        raise DegenerateRayError("ray parallel to the normalization plane")
    return ptilde / z


def make_observation(geom: ScanlineGeometry, cam_id: int, frame: int, row: float,
                     u) -> Observation:
    """Construct an observation with its scanline index bound to ``geom``."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape == (2,):
        u = np.array([u[0], u[1], 1.0])
    return Observation(cam_id=cam_id, frame=frame, row=float(row), u=u,
                       scanline_index=geom.scanline_index(frame, row))
