"""First-order propagation of image-point noise into the reduced system rows.

The covariance of a row triplet ``b_alpha`` w.r.t. the two pixel measurements
of its correspondence is evaluated through a chain of four Jacobians:

1. pixel -> calibrated coordinates (top-left 2x2 block of K^-1 per camera),
2. calibrated 2-vector -> unnormalized ray (first two columns of
   ``Rtilde = R_i R_cam_imu``),
3. unnormalized ray -> normalized ray, ``(1/ptilde_z) [I2 | -p_{1:2}]``
   (working on the two free ray components avoids derivatives w.r.t. the
   third coordinate),
4. normalized ray components -> rows of B through the depth-elimination
   projector; only the observation's few appearances in the ray matrix
   contribute, so this is evaluated per track block.

All covariances are stored sigma-free; the scalar noise level multiplies them
wherever it is known or estimated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .system import ReducedSystem, obs_key
from .validation import check_covariance

_COMPONENTS = ("p_i_x", "p_i_y", "p_j_x", "p_j_y")


@dataclass(frozen=True)
class PointNoiseModel:
    """Pixel-noise model: per-observation normalized 2x2 covariances.

    The absolute noise level (pixels) is unknown a priori and tracked
    separately; these matrices describe relative/directional uncertainty
    only. Default: identity for every observation.
    """

    sigma: float | None = None
    per_obs: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, V in self.per_obs.items():
            check_covariance(V, 2, f"V0_u[{key}]")

    def V0_u(self, key) -> np.ndarray:
        V = self.per_obs.get(key)
        return np.eye(2) if V is None else np.asarray(V, dtype=np.float64)


@dataclass(frozen=True)
class RayJacobian:
    """Per-observation factors of the ray-from-pixel map."""

    J1: np.ndarray  # (2, 2) pixel -> calibrated
    J2: np.ndarray  # (3, 2) calibrated -> unnormalized ray
    J3: np.ndarray  # (2, 3) unnormalized -> normalized ray components

    @property
    def composite(self) -> np.ndarray:
        """d p_{1:2} / d u_{1:2}, the full 2x2 per-observation chain."""
        return self.J3 @ self.J2 @ self.J1


@dataclass(frozen=True)
class RowCovariances:
    """Sigma-free covariances V0^(st)[b_alpha] for every row triplet.

    ``array`` has shape (N, 3, 3, L, L); entry [alpha, s, t] is the L x L
    block for rows s, t of correspondence alpha.
    """

    array: np.ndarray

    @property
    def n_pairs(self) -> int:
        return self.array.shape[0]


def jacobian_ray(obs, calib, R_i0) -> RayJacobian:
    """Factors of the pixel->normalized-ray map for one observation."""
    Kinv = calib.K_inv(obs.cam_id)
    Rtilde = np.asarray(R_i0, dtype=np.float64) @ calib.R_cam_imu[obs.cam_id]
    ptilde = Rtilde @ (Kinv @ obs.u)
    z = ptilde[2]
    p12 = ptilde[:2] / z
    J1 = Kinv[:2, :2]
    J2 = Rtilde[:, :2]
    J3 = np.hstack([np.eye(2), -p12[:, None]]) / z
    return RayJacobian(J1=J1, J2=J2, J3=J3)


def _ray_chain(rayinfo, calib) -> np.ndarray:
    """2x2 composite d p_{1:2} / d u_{1:2} from cached ray terms."""
    Kinv2 = calib.K_inv(rayinfo.obs.cam_id)[:2, :2]
    J2 = rayinfo.Rtilde[:, :2]
    J3 = np.hstack([np.eye(2), -rayinfo.p[:2, None]]) / rayinfo.ptilde_z
    return J3 @ J2 @ Kinv2


def _track_gammas(blk, L: int) -> dict:
    """(local column, axis) -> dG/dc . S restricted to the track rows.

    ``dP/dc`` has one signed unit entry per appearance of the observation, so
    each table costs a handful of outer products plus one small matmul.
    """
    n3, m = blk.P.shape
    F1, U, S, P = blk.F1, blk.U, blk.S_rows, blk.P
    Ut = U.T
    out = {}
    for lc, key in enumerate(blk.obs_keys):
        app = blk.appearances[key]
        locals_ = np.array([lp for lp, _ in app], dtype=int)
        signs = np.array([s for _, s in app])
        for axis in (0, 1):
            rows = 3 * locals_ + axis
            DF1 = np.zeros((n3, L))
            DF1[rows] = signs[:, None] * F1[lc]
            DtS = signs @ S[rows]            # single nonzero row of D^T S
            w = signs @ P[rows]              # row lc of E = D^T P
            EF1 = np.outer(w, F1[lc])
            EF1[lc] += w @ F1
            out[(lc, axis)] = DF1 + np.outer(Ut[:, lc], DtS) - Ut @ EF1
    return out


def _gammas_for(reduced: ReducedSystem, track_id: int) -> dict:
    cache = getattr(reduced, "_gamma_cache", None)
    if cache is None:
        cache = {}
        reduced._gamma_cache = cache
    if track_id not in cache:
        cache[track_id] = _track_gammas(reduced.blocks[track_id], reduced.L)
    return cache[track_id]


def jacobian_schur(reduced: ReducedSystem, alpha: int, component: str | None = None):
    """Derivative of the rows of correspondence ``alpha`` w.r.t. ray components.

    Returns an (3, L, 4) tensor over the components
    ``(p_i_x, p_i_y, p_j_x, p_j_y)``; pass ``component`` to get one
    (3, L) slice.
    """
    full = reduced.full
    tid, ka, kb = full.pair_records[alpha]
    blk = reduced.blocks[tid]
    gam = _gammas_for(reduced, tid)
    col = {k: c for c, k in enumerate(blk.obs_keys)}
    local = blk.pair_indices.index(alpha)
    rows = slice(3 * local, 3 * local + 3)
    comps = [(col[ka], 0), (col[ka], 1), (col[kb], 0), (col[kb], 1)]
    J4 = np.zeros((3, reduced.L, 4))
    for ci, (lc, ax) in enumerate(comps):
        J4[:, :, ci] = -gam[(lc, ax)][rows]
    if component is None:
        return J4
    return J4[:, :, _COMPONENTS.index(component)]


def full_jacobian(reduced: ReducedSystem, alpha: int) -> np.ndarray:
    """End-to-end (3, L, 4) Jacobian of b_alpha w.r.t. the pair's pixels."""
    full = reduced.full
    _, ka, kb = full.pair_records[alpha]
    rays = full.corrs.rays
    calib = full.geom.calib
    C = np.zeros((4, 4))
    C[:2, :2] = _ray_chain(rays[ka], calib)
    C[2:, 2:] = _ray_chain(rays[kb], calib)
    return np.einsum("slc,cd->sld", jacobian_schur(reduced, alpha), C)


def propagate(reduced: ReducedSystem, noise: PointNoiseModel, alpha: int) -> np.ndarray:
    """Nine L x L sigma-free covariance blocks of one row triplet."""
    full = reduced.full
    _, ka, kb = full.pair_records[alpha]
    J = full_jacobian(reduced, alpha)                       # (3, L, 4)
    Vu = np.zeros((4, 4))
    Vu[:2, :2] = noise.V0_u(ka)
    Vu[2:, 2:] = noise.V0_u(kb)
    JV = np.einsum("sld,de->sle", J, Vu)
    return np.einsum("sle,tme->stlm", JV, J)                # (3, 3, L, L)


def propagate_all(reduced: ReducedSystem, noise: PointNoiseModel | None = None) -> RowCovariances:
    """Covariance blocks for all correspondences (vectorized over pairs)."""
    if noise is None:
        noise = PointNoiseModel()
    full = reduced.full
    N, L = full.N, full.L
    rays = full.corrs.rays
    calib = full.geom.calib
    J4 = np.zeros((N, 3, L, 4))
    C = np.zeros((N, 4, 4))
    Vu = np.zeros((N, 4, 4))
    chains = {key: _ray_chain(ri, calib) for key, ri in rays.items()}
    for tid, blk in reduced.blocks.items():
        gam = _gammas_for(reduced, tid)
        col = {k: c for c, k in enumerate(blk.obs_keys)}
        for local, alpha in enumerate(blk.pair_indices):
            _, ka, kb = full.pair_records[alpha]
            rows = slice(3 * local, 3 * local + 3)
            comps = [(col[ka], 0), (col[ka], 1), (col[kb], 0), (col[kb], 1)]
            for ci, (lc, ax) in enumerate(comps):
                J4[alpha, :, :, ci] = -gam[(lc, ax)][rows]
            C[alpha, :2, :2] = chains[ka]
            C[alpha, 2:, 2:] = chains[kb]
            Vu[alpha, :2, :2] = noise.V0_u(ka)
            Vu[alpha, 2:, 2:] = noise.V0_u(kb)
    E = np.einsum("aslc,acd->asld", J4, C)
    EV = np.einsum("asld,ade->asle", E, Vu)
    V0 = np.einsum("asle,atme->astlm", EV, E)
    return RowCovariances(array=V0)


def dump_jacobians(reduced: ReducedSystem, path) -> None:
    """Write per-pair end-to-end Jacobians as CSV (debugging aid)."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "s"]
                        + [f"d_b{l}_d_{c}" for l in range(reduced.L) for c in _COMPONENTS])
        for alpha in range(reduced.N):
            J = full_jacobian(reduced, alpha)
            for s in range(3):
                writer.writerow([alpha, s] + [f"{v:.17g}" for v in J[s].ravel()])
