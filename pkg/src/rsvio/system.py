"""Assembly of the velocity/gravity linear system and its depth-eliminated form.

Every correspondence (one tracked point seen on two scanlines ``i`` and ``j``)
contributes a row triplet::

    xi_ij * v0 + mu_ij * g0 + kappa_ij * 1 + lambda_i * p_i - lambda_j * p_j = 0

with ``xi_ij = (i - j) dt``, ``mu_ij = (i^2 - j^2) dt^2 / 2`` and ``kappa_ij``
collecting the extrinsic lever arms and the integrated accelerometer terms.
Stacking the triplets gives ``[S P] x = 0`` over the unknown vector
``x = [v0, g0, (biases), 1, lambda...]``; eliminating the depth columns with
the projector ``G = P (P^T P)^-1 P^T`` leaves the fixed-size system
``B y = 0`` with ``B = (I - G) S``.

Depth columns are shared between correspondences that reference the same
observation, so ``P^T P`` is block-diagonal by track and all reduction
and derivative work happens in small per-track blocks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .geometry import Observation, RigCalibration, ScanlineGeometry
from .validation import (
    DegenerateTrackError,
    InsufficientDataError,
    as_array,
)

log = logging.getLogger(__name__)

LEFT, RIGHT = 0, 1

#: Minimum correspondences for rank(B) = 6.
MIN_CORRESPONDENCES = 6

# Unknown layout: [v0 (3) | g0 (3) | accel bias (3)? | gyro bias (3)? | 1]
SLICE_V0 = slice(0, 3)
SLICE_G0 = slice(3, 6)


@dataclass(frozen=True)
class Correspondence:
    """A tracked point observed on two different scanlines."""

    a: Observation
    b: Observation
    track_id: int

    def __post_init__(self):
        if self.a.scanline_index == self.b.scanline_index:
            raise ValueError("correspondence requires two distinct scanline indices")


@dataclass(frozen=True)
class RayInfo:
    """Calibrated ray of one observation plus terms reused downstream."""

    p: np.ndarray         # normalized ray, p[2] == 1
    ptilde_z: float       # third component before normalization
    Rtilde: np.ndarray    # R_i @ R_cam_imu
    obs: Observation


def obs_key(track_id: int, obs: Observation) -> tuple:
    return (track_id, obs.cam_id, obs.frame)


def make_pairing(frames: int, mode: str):
    """Image pairs fed to the solver, as ((cam, frame), (cam, frame)) tuples.

    ``stereo-dense`` links every earlier left camera to every later right
    camera; ``stereo-first-anchor`` keeps only the pairs anchored at the first
    left camera; ``mono`` links left cameras across frames.
    """
    if mode == "stereo-dense":
        if frames < 2:
            raise InsufficientDataError("stereo pairing requires >= 2 frames")
        return tuple(((LEFT, a), (RIGHT, b))
                     for a in range(frames - 1) for b in range(a + 1, frames))
    if mode == "stereo-first-anchor":
        if frames < 2:
            raise InsufficientDataError("stereo pairing requires >= 2 frames")
        return tuple(((LEFT, 0), (RIGHT, b)) for b in range(1, frames))
    if mode == "mono":
        if frames < 5:
            raise InsufficientDataError("mono pairing requires >= 5 frames")
        return tuple(((LEFT, a), (LEFT, b))
                     for a in range(frames - 1) for b in range(a + 1, frames))
    raise ValueError(f"unknown pairing mode {mode!r}")


@dataclass(frozen=True)
class Track:
    """One tracked 3D point: raw per-image measurements, geometry-free."""

    track_id: int
    observations: tuple

    def find(self, cam_id: int, frame: int) -> Observation | None:
        for o in self.observations:
            if o.cam_id == cam_id and o.frame == frame:
                return o
        return None


class CorrespondenceSet:
    """Correspondences bound to scanline geometry, with shared depth columns.

    ``lambda_index`` maps observation keys ``(track_id, cam_id, frame)`` to
    columns of the ray matrix ``P``; two correspondences referencing the same
    observation share its column.
    """

    def __init__(self, pairs, rays, lambda_index, geom, tracks):
        self.pairs = tuple(pairs)
        self.rays = dict(rays)
        self.lambda_index = dict(lambda_index)
        self.geom = geom
        self.tracks = tuple(tracks)
        for c in self.pairs:
            for o in (c.a, c.b):
                key = obs_key(c.track_id, o)
                if key not in self.rays or key not in self.lambda_index:
                    raise ValueError(f"observation {key} lacks a ray or depth column")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def n_observations(self) -> int:
        return len(self.lambda_index)

    @classmethod
    def build(cls, tracks, image_pairs, geom: ScanlineGeometry,
              min_scanline_gap: float | None = None) -> "CorrespondenceSet":
        """Bind raw tracks to geometry for the given image pairs.

        Tracks with fewer than two usable observations are dropped.
        Correspondences whose scanline gap is below ``min_scanline_gap``
        (default: half a frame) are rejected as ill-conditioned.
        """
        if min_scanline_gap is None:
            min_scanline_gap = 0.5 * geom.frame_stride
        pairs = []
        rays: dict = {}
        used_tracks = []
        bound: dict = {}

        def bind(track_id, o: Observation):
            key = (track_id, o.cam_id, o.frame)
            if key not in bound:
                i = geom.scanline_index(o.frame, o.row)
                ob = Observation(o.cam_id, o.frame, o.row, o.u, i)
                p, z, Rt = geom.ray(o.cam_id, i, o.u)
                bound[key] = ob
                rays[key] = RayInfo(p=p, ptilde_z=z, Rtilde=Rt, obs=ob)
            return bound[key]

        for tr in tracks:
            if len(tr.observations) < 2:
                log.debug("track %s rejected: fewer than 2 observations", tr.track_id)
                continue
            n_before = len(pairs)
            for (cam_a, fr_a), (cam_b, fr_b) in image_pairs:
                oa = tr.find(cam_a, fr_a)
                ob = tr.find(cam_b, fr_b)
                if oa is None or ob is None:
                    continue
                a = bind(tr.track_id, oa)
                b = bind(tr.track_id, ob)
                if abs(a.scanline_index - b.scanline_index) < min_scanline_gap:
                    log.debug("pair (%s,%s)-(%s,%s) of track %s rejected: scanline gap %d",
                              cam_a, fr_a, cam_b, fr_b, tr.track_id,
                              abs(a.scanline_index - b.scanline_index))
                    continue
                pairs.append(Correspondence(a=a, b=b, track_id=tr.track_id))
            if len(pairs) > n_before:
                used_tracks.append(tr)

        # Depth columns only for observations actually referenced by a pair.
        referenced = []
        for c in pairs:
            for o in (c.a, c.b):
                key = obs_key(c.track_id, o)
                if key not in referenced:
                    referenced.append(key)
        lambda_index = {key: col for col, key in enumerate(sorted(referenced))}
        rays = {k: v for k, v in rays.items() if k in lambda_index}
        return cls(pairs, rays, lambda_index, geom, used_tracks)

    def subset(self, pair_indices) -> "CorrespondenceSet":
        """New set from a subset of correspondences (columns recomputed)."""
        chosen = [self.pairs[i] for i in pair_indices]
        referenced = []
        for c in chosen:
            for o in (c.a, c.b):
                key = obs_key(c.track_id, o)
                if key not in referenced:
                    referenced.append(key)
        lam = {key: col for col, key in enumerate(sorted(referenced))}
        rays = {k: self.rays[k] for k in lam}
        kept_ids = {c.track_id for c in chosen}
        tracks = [t for t in self.tracks if t.track_id in kept_ids]
        return CorrespondenceSet(chosen, rays, lam, self.geom, tracks)


def pair_coefficients(geom: ScanlineGeometry, i: int, j: int,
                      cam_i: int, cam_j: int):
    """Coefficients (xi, mu, kappa) of the row triplet for scanlines i, j."""
    if i == j:
        raise ValueError("degenerate pair: identical scanline indices")
    dt = geom.dt
    xi = (i - j) * dt
    mu = (i**2 - j**2) * dt**2 / 2.0
    t_ci = geom.calib.t_cam_imu[cam_i]
    t_cj = geom.calib.t_cam_imu[cam_j]
    kappa = (geom.rotation(i) @ t_ci - geom.rotation(j) @ t_cj
             + (geom.accel_term(i) - geom.accel_term(j)) * dt**2 / 2.0)
    return xi, mu, kappa


@dataclass
class TrackBlock:
    """Per-track slice of the system: its pairs, depth columns and ray matrix."""

    track_id: int
    pair_indices: list          # global row-triplet indices alpha
    obs_keys: list              # depth-column keys, local order
    P: np.ndarray               # (3 n_q, m_q)
    appearances: dict = field(default_factory=dict)  # key -> [(local pair, sign)]


class FullSystem:
    """The stacked system [S P] x = 0 plus per-track bookkeeping."""

    def __init__(self, S, blocks, pair_records, corrs, n_cols_S, bias_layout):
        self.S = S
        self.blocks = blocks          # dict track_id -> TrackBlock
        self.pair_records = pair_records
        self.corrs = corrs
        self.geom = corrs.geom
        self.L = n_cols_S
        self.bias_layout = bias_layout  # dict name -> column slice, or {}
        self.N = len(pair_records)
        self.M = corrs.n_observations

    @property
    def idx_kappa(self) -> int:
        return self.L - 1

    def P_matrix(self) -> np.ndarray:
        """Dense (3N, M) ray matrix (test/diagnostic use)."""
        P = np.zeros((3 * self.N, self.M))
        col_of = self.corrs.lambda_index
        for blk in self.blocks.values():
            for local, alpha in enumerate(blk.pair_indices):
                rows = slice(3 * alpha, 3 * alpha + 3)
                seg = blk.P[3 * local:3 * local + 3]
                for lc, key in enumerate(blk.obs_keys):
                    P[rows, col_of[key]] += seg[:, lc]
        return P

    def full_matrix(self) -> np.ndarray:
        """Dense [S | P] over x = [v0, g0, (biases), 1, lambda...]."""
        return np.hstack([self.S, self.P_matrix()])


def assemble(corrs: CorrespondenceSet, bias_cfg=None) -> FullSystem:
    """Build S and the per-track ray blocks from bound correspondences.

    ``bias_cfg`` optionally appends accelerometer/gyroscope bias columns
    between g0 and the homogeneous column (see the bias module).
    """
    if len(corrs) < MIN_CORRESPONDENCES:
        raise InsufficientDataError(
            f"need >= {MIN_CORRESPONDENCES} correspondences, got {len(corrs)}")
    geom = corrs.geom
    n_bias = 0
    bias_layout = {}
    if bias_cfg is not None and bias_cfg.model_accel:
        bias_layout["accel"] = slice(6, 9)
        n_bias += 1
    if bias_cfg is not None and bias_cfg.model_gyro:
        start = 6 + 3 * (1 if "accel" in bias_layout else 0)
        bias_layout["gyro"] = slice(start, start + 3)
        n_bias += 1
    L = 7 + 3 * n_bias

    N = len(corrs.pairs)
    S = np.zeros((3 * N, L))
    pair_records = []
    blocks: dict = {}
    eye = np.eye(3)

    if n_bias:
        from . import bias as bias_mod

    for alpha, c in enumerate(corrs.pairs):
        i, j = c.a.scanline_index, c.b.scanline_index
        xi, mu, kappa = pair_coefficients(geom, i, j, c.a.cam_id, c.b.cam_id)
        rows = slice(3 * alpha, 3 * alpha + 3)
        S[rows, SLICE_V0] = xi * eye
        S[rows, SLICE_G0] = mu * eye
        if "accel" in bias_layout:
            # Measured-equals-true-plus-bias convention: the bias column
            # carries -zeta so the recovered unknown is the physical bias.
            S[rows, bias_layout["accel"]] = -bias_mod.accel_bias_columns(geom, i, j)
        if "gyro" in bias_layout:
            t_ci = geom.calib.t_cam_imu[c.a.cam_id]
            t_cj = geom.calib.t_cam_imu[c.b.cam_id]
            S[rows, bias_layout["gyro"]] = -bias_mod.kappa_gyro_jacobian(geom, i, j, t_ci, t_cj)
        S[rows, L - 1] = kappa
        pair_records.append((c.track_id, obs_key(c.track_id, c.a), obs_key(c.track_id, c.b)))

        blk = blocks.get(c.track_id)
        if blk is None:
            blk = blocks[c.track_id] = TrackBlock(c.track_id, [], [], None)
        blk.pair_indices.append(alpha)

    # Ray blocks: +p for the first observation of a pair, -p for the second.
    for blk in blocks.values():
        keys = sorted({k for alpha in blk.pair_indices
                       for k in pair_records[alpha][1:]})
        col = {k: c for c, k in enumerate(keys)}
        P = np.zeros((3 * len(blk.pair_indices), len(keys)))
        appearances = {k: [] for k in keys}
        for local, alpha in enumerate(blk.pair_indices):
            _, ka, kb = pair_records[alpha]
            P[3 * local:3 * local + 3, col[ka]] += corrs.rays[ka].p
            P[3 * local:3 * local + 3, col[kb]] -= corrs.rays[kb].p
            appearances[ka].append((local, +1.0))
            appearances[kb].append((local, -1.0))
        blk.obs_keys = keys
        blk.P = P
        blk.appearances = appearances

    referenced = {k for rec in pair_records for k in rec[1:]}
    if referenced != set(corrs.lambda_index):
        raise AssertionError("assembly bug: depth column not referenced by any pair")
    return FullSystem(S, blocks, pair_records, corrs, L, bias_layout)


@dataclass
class ReducedBlock:
    """Cached per-track reduction factors.

    ``F1 = (P^T P)^-1 P^T S_q`` gives the depths as ``lambda = -F1 y``;
    ``U = (P^T P)^-1 P^T`` is reused by the covariance Jacobians.
    """

    track_id: int
    pair_indices: list
    obs_keys: list
    P: np.ndarray
    S_rows: np.ndarray
    Ptilde: np.ndarray
    F1: np.ndarray
    U: np.ndarray
    appearances: dict


class ReducedSystem:
    """B = (I - G) S with cached per-track projector factors."""

    def __init__(self, B, blocks, full: FullSystem):
        self.B = B
        self.blocks = blocks
        self.full = full
        self.L = full.L
        self.N = full.N

    def G_matrix(self) -> np.ndarray:
        """Dense projector G = P (P^T P)^-1 P^T (test/diagnostic use)."""
        G = np.zeros((3 * self.N, 3 * self.N))
        for blk in self.blocks.values():
            rows = np.concatenate([np.arange(3 * a, 3 * a + 3) for a in blk.pair_indices])
            G[np.ix_(rows, rows)] = blk.P @ blk.U
        return G


def reduce_system(full: FullSystem) -> ReducedSystem:
    """Eliminate the depth columns track by track."""
    B = full.S.copy()
    blocks = {}
    for tid, blk in full.blocks.items():
        rows = np.concatenate([np.arange(3 * a, 3 * a + 3) for a in blk.pair_indices])
        S_rows = full.S[rows]
        PtP = blk.P.T @ blk.P
        try:
            cho = scipy.linalg.cho_factor(PtP)
            Ptilde = scipy.linalg.cho_solve(cho, np.eye(PtP.shape[0]))
        except scipy.linalg.LinAlgError as exc:
            w, V = np.linalg.eigh(PtP)
            worst = blk.obs_keys[int(np.argmax(np.abs(V[:, 0])))]
            raise DegenerateTrackError(
                f"track {tid}: singular depth normal block "
                f"(offending column {worst})") from exc
        U = Ptilde @ blk.P.T
        F1 = U @ S_rows
        B[rows] = S_rows - blk.P @ F1
        blocks[tid] = ReducedBlock(
            track_id=tid, pair_indices=blk.pair_indices, obs_keys=blk.obs_keys,
            P=blk.P, S_rows=S_rows, Ptilde=Ptilde, F1=F1, U=U,
            appearances=blk.appearances)
    return ReducedSystem(B, blocks, full)


def recover_depths(system, y) -> dict:
    """Least-squares depths for a fixed dehomogenized solution vector.

    Returns ``{observation key: lambda}``. Negative depths are flagged with a
    warning (cheirality), not raised.
    """
    reduced = system if isinstance(system, ReducedSystem) else reduce_system(system)
    y = as_array(y, (reduced.L,), "y")
    if abs(y[-1]) < 1e-12:
        raise ValueError("y must be dehomogenizable (last component nonzero)")
    y = y / y[-1]
    depths = {}
    bad = []
    for blk in reduced.blocks.values():
        lam = -blk.F1 @ y
        for key, val in zip(blk.obs_keys, lam):
            depths[key] = float(val)
            if val < -1e-6:
                bad.append(key)
    if bad:
        log.warning("cheirality: %d observations with negative depth (e.g. %s)",
                    len(bad), bad[0])
    return depths


def full_least_squares(full: FullSystem) -> np.ndarray:
    """Minimizer of ||[S P] x|| with the homogeneous component pinned to 1.

    Returns the full solution vector x = [v0, g0, (biases), 1, lambda...].
    """
    A = full.full_matrix()
    k = full.idx_kappa
    cols = np.delete(np.arange(A.shape[1]), k)
    sol, *_ = np.linalg.lstsq(A[:, cols], -A[:, k], rcond=None)
    return np.concatenate([sol[:k], [1.0], sol[k:]])


def reduced_least_squares(reduced: ReducedSystem) -> np.ndarray:
    """Minimizer of ||B y|| with the homogeneous component pinned to 1."""
    B = reduced.B
    k = reduced.L - 1
    sol, *_ = np.linalg.lstsq(B[:, :k], -B[:, k], rcond=None)
    return np.concatenate([sol, [1.0]])
