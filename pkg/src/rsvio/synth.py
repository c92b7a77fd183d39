"""Synthetic ground truth, noise injection, RANSAC pruning, and the
Monte-Carlo benchmark driver.

World conventions: the world frame coincides with the IMU frame at each
window's first scanline (x right, y down, z forward); gravity is
``(0, +9.81, 0)``. Trajectories are quintic splines (positions and rotation
vectors with first and second derivatives pinned at the knots), so the ideal
gyro/accelerometer signals are exact spline derivatives:

    omega(t) = J_r(phi(t)) phi_dot(t),      a(t) = R(t)^T (p_ddot(t) - g).

Observations are produced by the same discrete integrator the solvers use,
which makes noiseless scenarios exactly consistent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import BPoly, CubicSpline

from .geometry import (
    ImuStream,
    Observation,
    RigCalibration,
    ScanlineGeometry,
    so3_exp,
    so3_exp_batch,
    so3_right_jacobian_batch,
)
from .system import (
    CorrespondenceSet,
    Track,
    assemble,
    make_pairing,
    reduce_system,
)
from . import estimators as est_mod
from . import ba as ba_mod
from .noise import propagate_all
from .validation import InsufficientDataError, SolutionAtInfinityError

log = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 9.81, 0.0])  # m/s^2, +y is down

METHODS = ("ls", "iter-reweight", "taubin", "renorm", "ba")
_COV_METHODS = {"iter-reweight", "taubin", "renorm"}


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectorySpec:
    """Parametric rig trajectory; ``length``/``mean_speed`` set the duration."""

    kind: str = "forward"    # forward | loop | shake | forward-back | custom-spline
    length: float = 9.0      # m
    mean_speed: float = 0.7  # m/s
    yaw_amplitude_deg: float = 8.0
    yaw_frequency_hz: float = 0.5
    waypoints: dict | None = None   # custom-spline: {"t", "pos", "rotvec"}

    def __post_init__(self):
        if self.kind != "custom-spline" and (self.length <= 0 or self.mean_speed <= 0):
            raise ValueError("length and mean_speed must be positive")


class Trajectory:
    """Quintic-spline pose trajectory with exact analytic derivatives."""

    def __init__(self, pos: BPoly, rvec: BPoly, duration: float):
        self.pos = pos
        self.vel = pos.derivative()
        self.acc = pos.derivative(2)
        self.rvec = rvec
        self.rvec_rate = rvec.derivative()
        self.duration = duration

    def rotation(self, t: float) -> np.ndarray:
        return so3_exp(self.rvec(t))

    def imu_signals(self, times: np.ndarray):
        """Ideal body-frame (omega, accel) at the given timestamps."""
        phi = np.atleast_2d(self.rvec(times))
        phid = np.atleast_2d(self.rvec_rate(times))
        omega = np.einsum("nij,nj->ni", so3_right_jacobian_batch(phi), phid)
        R = so3_exp_batch(phi)
        acc_w = np.atleast_2d(self.acc(times)) - GRAVITY
        accel = np.einsum("nji,nj->ni", R, acc_w)
        return omega, accel


def _quintic(knots_t, values, d1, d2) -> BPoly:
    y = np.stack([values, d1, d2], axis=1)  # (n, 3 derivs, 3 dims)
    return BPoly.from_derivatives(knots_t, y)


def build_trajectory(spec: TrajectorySpec, knot_dt: float = 0.05) -> Trajectory:
    """Materialize a spec into splines (closed forms only seed the knots)."""
    if spec.kind == "custom-spline":
        wp = spec.waypoints
        if not wp:
            raise ValueError("custom-spline requires waypoints")
        t = np.asarray(wp["t"], dtype=float)
        pos_cs = CubicSpline(t, np.asarray(wp["pos"], dtype=float), axis=0)
        rv_cs = CubicSpline(t, np.asarray(wp["rotvec"], dtype=float), axis=0)
        tq = np.linspace(t[0], t[-1], max(len(t) * 4, 8))
        pos = _quintic(tq, pos_cs(tq), pos_cs(tq, 1), pos_cs(tq, 2))
        rv = _quintic(tq, rv_cs(tq), rv_cs(tq, 1), rv_cs(tq, 2))
        return Trajectory(pos, rv, float(t[-1] - t[0]))

    T = spec.length / spec.mean_speed
    t = np.arange(0.0, T + knot_dt, knot_dt)
    yaw_a = np.deg2rad(spec.yaw_amplitude_deg)
    yaw_w = 2 * np.pi * spec.yaw_frequency_hz
    pitch_a, pitch_w, pitch_p = np.deg2rad(2.0), 2 * np.pi * 0.8, 0.7
    roll_a, roll_w, roll_p = np.deg2rad(1.5), 2 * np.pi * 1.1, 1.3

    def osc(a, w, p=0.0):
        return (a * np.sin(w * t + p), a * w * np.cos(w * t + p),
                -a * w**2 * np.sin(w * t + p))

    if spec.kind == "forward":
        sx, vx, ax = osc(0.03, 2 * np.pi * 0.9)
        sy, vy, ay = osc(0.02, 2 * np.pi * 1.8, 0.4)
        sz, vz, az = osc(0.05, 2 * np.pi * 0.45)
        pos = np.column_stack([sx, sy, spec.mean_speed * t + sz])
        vel = np.column_stack([vx, vy, spec.mean_speed + vz])
        acc = np.column_stack([ax, ay, az])
    elif spec.kind == "loop":
        radius = spec.length / (2 * np.pi)
        th = spec.mean_speed / radius * t
        thd = spec.mean_speed / radius
        pos = np.column_stack([radius * (1 - np.cos(th)),
                               0.02 * np.sin(2 * np.pi * 1.8 * t),
                               radius * np.sin(th)])
        vel = np.column_stack([radius * thd * np.sin(th),
                               0.02 * 2 * np.pi * 1.8 * np.cos(2 * np.pi * 1.8 * t),
                               radius * thd * np.cos(th)])
        acc = np.column_stack([radius * thd**2 * np.cos(th),
                               -0.02 * (2 * np.pi * 1.8)**2 * np.sin(2 * np.pi * 1.8 * t),
                               -radius * thd**2 * np.sin(th)])
    elif spec.kind == "shake":
        f = max(spec.mean_speed / 1.0, 0.5)   # ~0.5 m wide lateral shaking
        sx, vx, ax = osc(0.25, 2 * np.pi * f)
        drift = 0.15
        pos = np.column_stack([sx, np.zeros_like(t), drift * t])
        vel = np.column_stack([vx, np.zeros_like(t), np.full_like(t, drift)])
        acc = np.column_stack([ax, np.zeros_like(t), np.zeros_like(t)])
    elif spec.kind == "forward-back":
        tau = 0.75
        tm = T / 2.0
        s = 0.5 * (1 + np.tanh((t - tm) / tau))
        sd = 0.5 / (tau * np.cosh((t - tm) / tau) ** 2)
        yaw_turn = np.pi * s
        speed = spec.mean_speed * (1 - 0.8 * np.exp(-((t - tm) / (2 * tau)) ** 2))
        heading = np.column_stack([np.sin(yaw_turn), np.zeros_like(t), np.cos(yaw_turn)])
        vel = speed[:, None] * heading
        dspeed = spec.mean_speed * 0.8 * (t - tm) / (2 * tau**2) * np.exp(-((t - tm) / (2 * tau)) ** 2)
        dheading = (np.pi * sd)[:, None] * np.column_stack(
            [np.cos(yaw_turn), np.zeros_like(t), -np.sin(yaw_turn)])
        acc = dspeed[:, None] * heading + speed[:, None] * dheading
        # Knot positions by fine trapezoidal integration of the closed-form
        # velocity; the spline is the trajectory, so this is self-consistent.
        tf = np.arange(0.0, T + 1e-4, 1e-3)
        sf = 0.5 * (1 + np.tanh((tf - tm) / tau))
        speed_f = spec.mean_speed * (1 - 0.8 * np.exp(-((tf - tm) / (2 * tau)) ** 2))
        vf = speed_f[:, None] * np.column_stack(
            [np.sin(np.pi * sf), np.zeros_like(tf), np.cos(np.pi * sf)])
        cum = np.vstack([np.zeros(3),
                         np.cumsum(0.5 * (vf[1:] + vf[:-1]) * np.diff(tf)[:, None], axis=0)])
        pos = np.column_stack([np.interp(t, tf, cum[:, k]) for k in range(3)])
        yaw_turn_spline = yaw_turn
    else:
        raise ValueError(f"unknown trajectory kind {spec.kind!r}")

    yaw, yawd, yawdd = osc(yaw_a, yaw_w)
    pitch = pitch_a * np.sin(pitch_w * t + pitch_p) - pitch_a * np.sin(pitch_p)
    pitchd = pitch_a * pitch_w * np.cos(pitch_w * t + pitch_p)
    pitchdd = -pitch_a * pitch_w**2 * np.sin(pitch_w * t + pitch_p)
    roll = roll_a * np.sin(roll_w * t + roll_p) - roll_a * np.sin(roll_p)
    rolld = roll_a * roll_w * np.cos(roll_w * t + roll_p)
    rolldd = -roll_a * roll_w**2 * np.sin(roll_w * t + roll_p)
    if spec.kind == "loop":
        yaw = yaw + spec.mean_speed / (spec.length / (2 * np.pi)) * t
        yawd = yawd + spec.mean_speed / (spec.length / (2 * np.pi))
    if spec.kind == "forward-back":
        yaw = yaw + yaw_turn_spline
        yawd = yawd + np.pi * sd
        yawdd = yawdd + np.pi * (-np.tanh((t - tm) / tau) / (tau**2 * np.cosh((t - tm) / tau) ** 2))

    rvec = np.column_stack([pitch, yaw, roll])
    rvecd = np.column_stack([pitchd, yawd, rolld])
    rvecdd = np.column_stack([pitchdd, yawdd, rolldd])
    return Trajectory(_quintic(t, pos, vel, acc), _quintic(t, rvec, rvecd, rvecdd), T)


# ---------------------------------------------------------------------------
# Scenario configuration and generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    """Benchmark configuration (defaults follow the synthetic protocol)."""

    sigma_px: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    accel_noise: float = 0.005        # m/s^2, per native-rate sample
    rot_noise_deg: float = 0.02       # one small rotation per realization
    n_points: int = 50
    depth_range: tuple = (1.0, 15.0)  # m
    n_trials: int = 100
    frames: int = 5
    pairing: str = "stereo-dense"
    shutter: str = "rs"
    baseline: float = 0.14            # m
    seed: int = 0
    n_windows: int = 1
    window_stride: int = 1            # frames
    fps: float = 10.0
    imu_rate: float = 800.0
    image_width: int = 640
    image_height: int = 480
    focal_px: float = 460.0
    readout_time: float = 0.010       # full-frame readout, s
    fov_margin_px: float = 8.0

    def __post_init__(self):
        if any(s < 0 for s in self.sigma_px) or self.accel_noise < 0 or self.rot_noise_deg < 0:
            raise ValueError("noise levels must be non-negative")
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise ValueError("depth_range must be positive and ordered")

    @property
    def n_cameras(self) -> int:
        return 1 if self.pairing == "mono" else 2


def make_calibration(cfg: ScenarioConfig) -> RigCalibration:
    f, w, h = cfg.focal_px, cfg.image_width, cfg.image_height
    K = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
    if cfg.n_cameras == 1:
        t = np.zeros((1, 3))
    else:
        t = np.array([[-cfg.baseline / 2.0, 0.0, 0.0],
                      [cfg.baseline / 2.0, 0.0, 0.0]])
    n = t.shape[0]
    return RigCalibration(
        K=np.stack([K] * n), R_cam_imu=np.stack([np.eye(3)] * n), t_cam_imu=t,
        readout_per_line=cfg.readout_time / cfg.image_height,
        image_height=h, image_width=w, fps=cfg.fps)


@dataclass
class Scenario:
    """One noiseless capture window: IMU, geometry, ground truth, tracks."""

    cfg: ScenarioConfig
    calib: RigCalibration
    stream: ImuStream               # ideal native-rate IMU for the window
    geom: ScanlineGeometry          # rolling-shutter, noiseless
    gt_v0: np.ndarray
    gt_g0: np.ndarray
    tracks: tuple
    image_pairs: tuple
    window: int = 0


def project_point_rs(geom: ScanlineGeometry, X, cam_id: int, frame: int,
                     v0, g0, max_iter: int = 40):
    """Rolling-shutter projection: solve row = image-y(pose(row)) by fixed point.

    Returns (u (2,), scanline index) or None when the point leaves the image,
    falls behind the camera, or the row iteration does not settle.
    """
    calib = geom.calib
    h = calib.image_height
    t_cam = calib.t_cam_imu[cam_id]
    K = calib.K[cam_id]
    row = (h - 1) / 2.0
    for _ in range(max_iter):
        i = geom.scanline_index(frame, row)
        Rt = geom.rotation(i) @ calib.R_cam_imu[cam_id]
        x_c = Rt.T @ (np.asarray(X) - geom.translation(i, v0, g0)
                      - geom.rotation(i) @ t_cam)
        if x_c[2] <= 1e-6:
            return None
        uvw = K @ x_c
        u = uvw[:2] / uvw[2]
        if not (0.0 <= u[1] <= h - 1):
            return None
        if geom.scanline_index(frame, u[1]) == i:
            return u, i
        row = u[1]
    return None


def generate_scenario(traj: Trajectory | TrajectorySpec, cfg: ScenarioConfig,
                      window: int = 0) -> Scenario:
    """Build one noiseless window: ideal IMU, tracks visible in all used views.

    Points are seeded in the first left image with uniform pixel positions and
    depths, backprojected through the discrete scanline poses, and projected
    into every image referenced by the pairing; points falling outside any
    view are re-sampled (bounded retries).
    """
    if isinstance(traj, TrajectorySpec):
        traj = build_trajectory(traj)
    calib = make_calibration(cfg)
    image_pairs = make_pairing(cfg.frames, cfg.pairing)
    images = sorted({im for pair in image_pairs for im in pair} | {(0, 0)})

    t_anchor = window * cfg.window_stride / cfg.fps
    duration = (cfg.frames - 1) / cfg.fps + cfg.readout_time + 2.0 / cfg.imu_rate
    if t_anchor + duration > traj.duration + 1e-9:
        raise ValueError(f"window {window} extends past the trajectory end")
    n800 = int(np.ceil(duration * cfg.imu_rate)) + 1
    times = t_anchor + np.arange(n800) / cfg.imu_rate
    omega, accel = traj.imu_signals(times)
    stream = ImuStream(omega, accel, 1.0 / cfg.imu_rate)

    R_anchor = traj.rotation(t_anchor)
    gt_v0 = R_anchor.T @ np.atleast_1d(traj.vel(t_anchor))
    gt_g0 = R_anchor.T @ GRAVITY

    geom = ScanlineGeometry.build(stream, calib, shutter="rs")

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, window, 0xC0FFEE]))
    m = cfg.fov_margin_px
    w_px, h_px = cfg.image_width, cfg.image_height
    tracks = []
    attempts_left = 200 * cfg.n_points
    for tid in range(cfg.n_points):
        while True:
            if attempts_left <= 0:
                raise RuntimeError("could not place points inside all views; "
                                   "trajectory leaves too little shared field of view")
            attempts_left -= 1
            u_seed = rng.uniform([m, m], [w_px - 1 - m, h_px - 1 - m])
            depth = rng.uniform(*cfg.depth_range)
            i0 = geom.scanline_index(0, u_seed[1])
            p, _, _ = geom.ray(0, i0, np.array([u_seed[0], u_seed[1], 1.0]))
            X = (depth * p + geom.translation(i0, gt_v0, gt_g0)
                 + geom.rotation(i0) @ calib.t_cam_imu[0])
            obs = []
            for cam, frame in images:
                res = project_point_rs(geom, X, cam, frame, gt_v0, gt_g0)
                if res is None:
                    break
                u, i = res
                if not (m <= u[0] <= w_px - 1 - m and m <= u[1] <= h_px - 1 - m):
                    break
                obs.append(Observation(cam_id=cam, frame=frame, row=float(u[1]),
                                       u=np.array([u[0], u[1], 1.0]), scanline_index=int(i)))
            else:
                tracks.append(Track(track_id=tid, observations=tuple(obs)))
                break
    return Scenario(cfg=cfg, calib=calib, stream=stream, geom=geom,
                    gt_v0=gt_v0, gt_g0=gt_g0, tracks=tuple(tracks),
                    image_pairs=image_pairs, window=window)


@dataclass
class Realization:
    """One noisy draw of a scenario: perturbed IMU/rotations and tracks."""

    stream: ImuStream           # noisy native-rate IMU
    geom: ScanlineGeometry      # geometry under the realization's shutter model
    tracks: tuple


def perturb(scenario: Scenario, sigma_px: float, rng: np.random.Generator,
            accel_noise: float | None = None, rot_noise_deg: float | None = None,
            shutter: str | None = None) -> Realization:
    """Apply the benchmark noise model to one scenario.

    Pixel noise is i.i.d. Gaussian per observation; accelerometer noise is
    i.i.d. per native-rate sample; the rotation perturbation is one small
    random rotation (uniform axis, Gaussian angle) applied to every
    integrated R_i of the realization.
    """
    cfg = scenario.cfg
    accel_noise = cfg.accel_noise if accel_noise is None else accel_noise
    rot_noise_deg = cfg.rot_noise_deg if rot_noise_deg is None else rot_noise_deg
    shutter = cfg.shutter if shutter is None else shutter

    base = scenario.stream
    accel = base.accel
    if accel_noise > 0:
        accel = accel + rng.normal(0.0, accel_noise, size=base.accel.shape)
    stream = ImuStream(base.omega, accel, base.dt)

    rotations = scenario.geom.R
    if rot_noise_deg > 0:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.normal(0.0, np.deg2rad(rot_noise_deg))
        dR = so3_exp(axis * angle)
        rotations = np.einsum("ij,njk->nik", dR, rotations)

    # Scanline-rate accel of the realization, matching the library upsampler.
    base_geom = scenario.geom
    t_old = np.arange(len(stream)) * stream.dt
    t_new = np.minimum(np.arange(base_geom.n) * base_geom.dt, t_old[-1])
    accel_up = np.column_stack([np.interp(t_new, t_old, accel[:, k]) for k in range(3)])
    geom = ScanlineGeometry(base_geom.dt, rotations, accel_up,
                            scenario.calib, shutter=shutter,
                            omega=base_geom._omega)

    tracks = scenario.tracks
    if sigma_px > 0:
        h, w = cfg.image_height, cfg.image_width
        noisy = []
        for tr in tracks:
            obs = []
            for o in tr.observations:
                du = rng.normal(0.0, sigma_px, size=2)
                ux = min(max(o.u[0] + du[0], 0.0), w - 1.0)
                uy = min(max(o.u[1] + du[1], 0.0), h - 1.0)
                obs.append(Observation(cam_id=o.cam_id, frame=o.frame, row=uy,
                                       u=np.array([ux, uy, 1.0]),
                                       scanline_index=geom.scanline_index(o.frame, uy)))
            noisy.append(Track(track_id=tr.track_id, observations=tuple(obs)))
        tracks = tuple(noisy)
    return Realization(stream=stream, geom=geom, tracks=tracks)


def error_metrics(estimate, gt_v0, gt_g0):
    """(velocity error norm in m/s, gravity direction error in degrees)."""
    v0 = getattr(estimate, "v0", estimate[0] if isinstance(estimate, tuple) else None)
    g0 = getattr(estimate, "g0", estimate[1] if isinstance(estimate, tuple) else None)
    gt_v0 = np.asarray(gt_v0, dtype=float)
    gt_g0 = np.asarray(gt_g0, dtype=float)
    ng = np.linalg.norm(g0) * np.linalg.norm(gt_g0)
    if ng < 1e-15:
        raise ValueError("zero-length gravity vector")
    eps_v = float(np.linalg.norm(v0 - gt_v0))
    cosang = np.clip(np.dot(g0, gt_g0) / ng, -1.0, 1.0)
    return eps_v, float(np.degrees(np.arccos(cosang)))


# ---------------------------------------------------------------------------
# RANSAC pruning
# ---------------------------------------------------------------------------

class _RansacScorer:
    """Vectorized two-ray distance residuals in effective pixels.

    The distance residual is one-dimensional: the component of the row
    residual along the common normal of the two rays, ``|n . d(y)|``.
    Dividing by its per-pair noise gain (from the pixel->ray Jacobians and
    the recovered depths, clipped to a sane range) expresses it as a
    multiple of one pixel of image noise, so a fixed pixel threshold applies
    to near and far points alike.
    """

    def __init__(self, full):
        from .noise import _ray_chain

        rays = full.corrs.rays
        calib = full.geom.calib
        chains = {k: _ray_chain(ri, calib) for k, ri in rays.items()}
        self.S3 = full.S.reshape(full.N, 3, full.L)
        self.Pa = np.stack([rays[ka].p for _, ka, _ in full.pair_records])
        self.Pb = np.stack([rays[kb].p for _, _, kb in full.pair_records])
        nrm = np.cross(self.Pa, self.Pb)
        nn = np.linalg.norm(nrm, axis=1)
        self.degenerate = nn < 1e-12
        nrm[~self.degenerate] /= nn[~self.degenerate, None]
        self.normal = nrm
        GA = np.stack([chains[ka] for _, ka, _ in full.pair_records])  # (N,2,2)
        GB = np.stack([chains[kb] for _, _, kb in full.pair_records])
        self.ga = np.einsum("nij,ni->nj", GA, nrm[:, :2]) ** 2
        self.gb = np.einsum("nij,ni->nj", GB, nrm[:, :2]) ** 2
        # 2x2 normal equations of [p_a, -p_b] lambda = -d, batched
        aa = np.einsum("ni,ni->n", self.Pa, self.Pa)
        ab = np.einsum("ni,ni->n", self.Pa, self.Pb)
        bb = np.einsum("ni,ni->n", self.Pb, self.Pb)
        det = np.maximum(aa * bb - ab * ab, 1e-300)
        self.inv = np.stack([np.stack([bb / det, ab / det], axis=1),
                             np.stack([ab / det, aa / det], axis=1)], axis=1)

    def __call__(self, y) -> np.ndarray:
        d = np.einsum("nal,l->na", self.S3, y)
        r = np.abs(np.einsum("na,na->n", self.normal, d))
        rhs = np.stack([-np.einsum("ni,ni->n", self.Pa, d),
                        np.einsum("ni,ni->n", self.Pb, d)], axis=1)
        lam = np.einsum("nij,nj->ni", self.inv, rhs)
        depth2 = np.clip(np.abs(lam), 0.2, 50.0) ** 2
        gain = depth2[:, 0] * self.ga.sum(axis=1) + depth2[:, 1] * self.gb.sum(axis=1)
        out = r / np.sqrt(np.maximum(gain, 1e-18))
        out[self.degenerate] = np.inf
        return out


def _pair_residuals_px(full, y):
    return _RansacScorer(full)(np.asarray(y, dtype=float))


def _minimal_solve(full, reduced, sample) -> np.ndarray:
    """Least-squares fit on a 6-correspondence subset, from cached blocks."""
    rows = []
    by_track: dict = {}
    for alpha in sample:
        by_track.setdefault(full.pair_records[alpha][0], []).append(alpha)
    for tid, alphas in by_track.items():
        blk = reduced.blocks[tid]
        local = [blk.pair_indices.index(a) for a in alphas]
        keys = sorted({k for a in alphas for k in full.pair_records[a][1:]})
        col = {k: c for c, k in enumerate(keys)}
        P = np.zeros((3 * len(alphas), len(keys)))
        S = np.zeros((3 * len(alphas), full.L))
        for r, (a, lp) in enumerate(zip(alphas, local)):
            _, ka, kb = full.pair_records[a]
            P[3 * r:3 * r + 3, col[ka]] = full.corrs.rays[ka].p
            P[3 * r:3 * r + 3, col[kb]] = -full.corrs.rays[kb].p
            S[3 * r:3 * r + 3] = blk.S_rows[3 * lp:3 * lp + 3]
        lam = np.linalg.lstsq(P, -S, rcond=None)[0]
        rows.append(S + P @ lam)
    B = np.vstack(rows)
    return est_mod.solve_ls(B).y


def ransac_prune(corrs: CorrespondenceSet, sigma_assumed: float = 0.3,
                 n_iters: int = 200, seed: int = 0):
    """Vanilla RANSAC over correspondences with 6-pair minimal solves.

    Consensus is scored on the per-correspondence two-ray distance residual,
    expressed in pixels through the focal length and recovered depths; the
    inlier threshold is ``3 * sigma_assumed`` (floored for noise-free input).
    Returns (inlier CorrespondenceSet, info dict).
    """
    n = len(corrs)
    if n < 6:
        raise InsufficientDataError(f"RANSAC needs >= 6 correspondences, got {n}")
    full = assemble(corrs)
    reduced = reduce_system(full)
    scorer = _RansacScorer(full)
    thresh = 3.0 * max(sigma_assumed, 0.05)
    rng = np.random.default_rng(seed)
    best_mask = None
    best_res = None
    best_score = np.inf
    for _ in range(n_iters):
        sample = rng.choice(n, size=6, replace=False)
        try:
            y = _minimal_solve(full, reduced, sample)
        except (ValueError, np.linalg.LinAlgError, SolutionAtInfinityError):
            continue
        res = scorer(y / y[-1])
        # Truncated-loss model selection: a plain inlier count lets slightly
        # tilted models win by absorbing near-threshold outliers, which the
        # non-robust estimators downstream cannot tolerate.
        score = float(np.sum(np.minimum(res, thresh) ** 2))
        if score < best_score:
            best_score = score
            best_mask = res < thresh
            best_res = res
    if best_mask is None or int(best_mask.sum()) < 6:
        raise RuntimeError("RANSAC found no model with >= 6 inliers")
    # Final consensus under a model refit on the conservative core (pairs
    # well inside the band, where contamination is negligible). The refit
    # removes the minimal-sample model error, so the admitted band is the
    # actual 3-sigma band rather than model error plus threshold.
    core = np.flatnonzero(best_res < 0.5 * thresh)
    if core.size >= 12:
        try:
            y = _minimal_solve(full, reduced, core)
            refined = scorer(y / y[-1]) < thresh
            if refined.sum() >= 6:
                best_mask = refined
        except (ValueError, np.linalg.LinAlgError, SolutionAtInfinityError):
            pass
    inliers = np.flatnonzero(best_mask)
    info = {"n_inliers": int(best_mask.sum()), "n_input": n, "inlier_mask": best_mask,
            "threshold_px": thresh}
    return corrs.subset(inliers), info


# ---------------------------------------------------------------------------
# Monte-Carlo driver
# ---------------------------------------------------------------------------

@dataclass
class TrialResult:
    """Per-trial, per-method outcome."""

    window: int
    sigma: float
    trial: int
    method: str
    eps_v: float
    eps_g: float
    iterations: int
    sigma_hat: float | None
    converged: bool
    v0_err: np.ndarray | None = None     # (3,) estimate - truth
    g0_err: np.ndarray | None = None     # (3,)
    pred_var: np.ndarray | None = None   # (6,) diag of the estimate covariance
    failed: bool = False


def _pred_std(cov, half) -> float:
    if cov is None:
        return float("nan")
    d = np.diag(cov)
    return float(np.sqrt(np.mean(d[half])))


def solve_methods(realization: Realization, image_pairs, methods,
                  gt_v0=None, gt_g0=None, ba_init: str = "ls"):
    """Assemble once and run the requested estimators on one realization."""
    corrs = CorrespondenceSet.build(realization.tracks, image_pairs, realization.geom)
    full = assemble(corrs)
    reduced = reduce_system(full)
    covs = propagate_all(reduced) if (_COV_METHODS & set(methods)) else None
    out = {}
    ls_seed = None
    for name in methods:
        if name == "ls":
            out[name] = est_mod.solve_ls(reduced)
            ls_seed = out[name]
        elif name == "taubin":
            out[name] = est_mod.solve_taubin(reduced, covs)
        elif name == "iter-reweight":
            out[name] = est_mod.solve_iter_reweight(reduced, covs)
        elif name == "renorm":
            out[name] = est_mod.solve_renorm(reduced, covs)
        elif name == "ba":
            if ba_init == "renorm":
                seed = out.get("renorm") or est_mod.solve_renorm(
                    reduced, covs if covs is not None else propagate_all(reduced))
            else:
                seed = ls_seed or est_mod.solve_ls(reduced)
            out[name] = ba_mod.refine(reduced, seed)
        else:
            raise ValueError(f"unknown method {name!r}")
    return out


def _trial_rows(scenario: Scenario, sigma: float, trial: int, methods,
                rng: np.random.Generator, ba_init: str = "ls"):
    rows = []
    realization = perturb(scenario, sigma, rng)
    try:
        results = solve_methods(realization, scenario.image_pairs, methods,
                                ba_init=ba_init)
    except Exception as exc:  # solver failures are recorded, not fatal
        log.warning("trial failed (window %d sigma %.2f trial %d): %s",
                    scenario.window, sigma, trial, exc)
        return [TrialResult(scenario.window, sigma, trial, m, float("nan"),
                            float("nan"), 0, None, False, failed=True)
                for m in methods]
    for name, est in results.items():
        eps_v, eps_g = error_metrics(est, scenario.gt_v0, scenario.gt_g0)
        rows.append(TrialResult(
            window=scenario.window, sigma=sigma, trial=trial, method=name,
            eps_v=eps_v, eps_g=eps_g, iterations=est.iterations,
            sigma_hat=est.sigma_hat, converged=est.converged,
            v0_err=est.v0 - scenario.gt_v0, g0_err=est.g0 - scenario.gt_g0,
            pred_var=None if est.cov is None else np.diag(est.cov).copy()))
    return rows


def _run_block(traj_spec: TrajectorySpec, cfg: ScenarioConfig, window: int,
               sigma_index: int, methods, ba_init: str = "ls"):
    scenario = _scenario_cached(traj_spec, cfg, window)
    sigma = cfg.sigma_px[sigma_index]
    rows = []
    for trial in range(cfg.n_trials):
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, window, sigma_index, trial]))
        rows.extend(_trial_rows(scenario, sigma, trial, methods, rng, ba_init))
    return rows


_SCENARIO_CACHE: dict = {}


def _scenario_cached(traj_spec, cfg, window):
    key = (repr(traj_spec), repr(cfg), window)
    if key not in _SCENARIO_CACHE:
        _SCENARIO_CACHE[key] = generate_scenario(traj_spec, cfg, window)
    return _SCENARIO_CACHE[key]


@dataclass
class McResult:
    """Full per-trial table plus aggregation helpers."""

    rows: list
    cfg: ScenarioConfig

    def aggregate(self) -> dict:
        """(sigma, method) -> summary statistics over non-failed trials."""
        groups: dict = {}
        for r in self.rows:
            groups.setdefault((r.sigma, r.method), []).append(r)
        out = {}
        for key, rows in sorted(groups.items()):
            ok = [r for r in rows if not r.failed and np.isfinite(r.eps_v)]
            if not ok:
                out[key] = {"n": 0, "n_failed": len(rows)}
                continue
            eps_v = np.array([r.eps_v for r in ok])
            eps_g = np.array([r.eps_g for r in ok])
            sig = np.array([r.sigma_hat for r in ok if r.sigma_hat is not None])
            it = np.array([r.iterations for r in ok])
            verr = np.stack([r.v0_err for r in ok])
            gerr = np.stack([r.g0_err for r in ok])
            pv = [r.pred_var for r in ok if r.pred_var is not None]
            out[key] = {
                "n": len(ok),
                "n_failed": len(rows) - len(ok),
                "mean_eps_v": float(eps_v.mean()),
                "std_eps_v": float(eps_v.std()),
                "mean_eps_g": float(eps_g.mean()),
                "std_eps_g": float(eps_g.std()),
                "median_sigma_hat": float(np.median(sig)) if sig.size else float("nan"),
                "mean_iterations": float(it.mean()),
                "median_iterations": float(np.median(it)),
                "frac_converged": float(np.mean([r.converged for r in ok])),
                "emp_std": np.concatenate([verr.std(axis=0), gerr.std(axis=0)]),
                "pred_std": (np.sqrt(np.mean(np.stack(pv), axis=0))
                             if pv else np.full(6, np.nan)),
            }
        return out


def run_monte_carlo(traj_spec: TrajectorySpec, cfg: ScenarioConfig, methods=METHODS,
                    jobs: int = 1, ba_init: str = "ls") -> McResult:
    """Sweep (window, sigma, trial) and solve with every requested method.

    Deterministic for a fixed config/seed regardless of ``jobs``: every trial
    draws from its own seed sequence and rows are collected in task order.
    """
    methods = tuple(methods)
    blocks = [(w, si) for w in range(cfg.n_windows) for si in range(len(cfg.sigma_px))]
    rows: list = []
    if jobs and jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_block, traj_spec, cfg, w, si, methods, ba_init)
                       for w, si in blocks]
            for fut in futures:
                rows.extend(fut.result())
    else:
        for w, si in blocks:
            rows.extend(_run_block(traj_spec, cfg, w, si, methods, ba_init))
    return McResult(rows=rows, cfg=cfg)


# ---------------------------------------------------------------------------
# Presets mirroring the comparative noise studies
# ---------------------------------------------------------------------------

def preset(name: str, trials: int | None = None, seed: int | None = None):
    """Named benchmark presets: (trajectory, [(label, cfg, methods)...])."""
    traj = TrajectorySpec(kind="forward", length=9.0, mean_speed=0.7)
    base = ScenarioConfig()
    if trials is not None:
        base = replace(base, n_trials=trials)
    if seed is not None:
        base = replace(base, seed=seed)
    if name == "paper-fig3":
        return traj, [("stereo-rs", base, ("ls", "renorm", "ba"))]
    if name == "paper-fig4":
        return traj, [("ls-variants", base, ("ls", "iter-reweight", "taubin", "renorm"))]
    if name == "paper-fig5":
        return traj, [("rs", base, ("ls", "renorm", "ba")),
                      ("gs-on-rs", replace(base, shutter="gs-on-rs"),
                       ("ls", "renorm", "ba"))]
    if name == "paper-fig6":
        return traj, [("stereo", base, ("ls", "renorm", "ba")),
                      ("mono", replace(base, pairing="mono"), ("ls", "renorm", "ba"))]
    if name == "paper-fig7":
        return traj, [("dense", base, ("ls", "renorm", "ba")),
                      ("first-anchor", replace(base, pairing="stereo-first-anchor"),
                       ("ls", "renorm", "ba"))]
    if name == "forward":
        return traj, [("forward", base, ("ls", "renorm", "ba"))]
    raise ValueError(f"unknown preset {name!r}")
