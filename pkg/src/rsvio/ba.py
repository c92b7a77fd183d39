"""Bundle-adjustment baseline: reprojection-error minimization over
(v0, g0, 3D points) with Levenberg-Marquardt.

Scanline poses enter the projection through the observation's own row; their
rotation and accelerometer terms are fixed by the IMU data, so only the
linear-in-(v0, g0) translation part changes between iterations and all
per-observation geometry is precomputed exactly once. The point blocks of
the normal equations are eliminated per track by a Schur complement, leaving
a 6x6 solve per iteration.
"""

from __future__ import annotations

import csv
import logging

import numpy as np

from .estimators import InitEstimate, _InitializerBase, dehomogenize
from .system import FullSystem, ReducedSystem, recover_depths
from .validation import as_array

log = logging.getLogger(__name__)


class CheiralityError(ValueError):
    """A reconstructed point lies behind its camera."""


DEFAULT_LM_OPTS = dict(max_iter=50, damping0=1e-4, damping_max=1e8,
                       cost_rtol=1e-10)


def init_points(system, y) -> dict:
    """Initial 3D points: per track, the mean of the per-ray reconstructions
    ``lambda * p + t_i + R_i t_c`` over the track's observations."""
    full = system.full if isinstance(system, ReducedSystem) else system
    depths = recover_depths(system, y)
    y = np.asarray(y, dtype=np.float64)
    y = y / y[-1]
    v0, g0 = y[0:3], y[3:6]
    geom = full.geom
    calib = geom.calib
    rays = full.corrs.rays
    points: dict = {}
    for key, lam in depths.items():
        track_id, cam, _ = key
        info = rays[key]
        i = info.obs.scanline_index
        X = (lam * info.p + geom.translation(i, v0, g0)
             + geom.rotation(i) @ calib.t_cam_imu[cam])
        points.setdefault(track_id, []).append(X)
    return {tid: np.mean(np.stack(xs), axis=0) for tid, xs in points.items()}


def reproject(X, v0, g0, obs, geom, calib) -> np.ndarray:
    """Predicted pixel of a 3D point through the observation's scanline pose."""
    X = as_array(X, (3,), "X")
    i = obs.scanline_index
    Rtilde = geom.rotation(i) @ calib.R_cam_imu[obs.cam_id]
    center = geom.translation(i, v0, g0) + geom.rotation(i) @ calib.t_cam_imu[obs.cam_id]
    x_c = Rtilde.T @ (X - center)
    if x_c[2] <= 1e-9:
        raise CheiralityError(f"point behind camera {obs.cam_id} frame {obs.frame}")
    uvw = calib.K[obs.cam_id] @ x_c
    return uvw[:2] / uvw[2]


class BaProblem:
    """Observation table and parameter state for one refinement run."""

    def __init__(self, full: FullSystem, y0):
        y0 = np.asarray(y0, dtype=np.float64)
        y0 = y0 / y0[-1]
        geom = full.geom
        calib = geom.calib
        corrs = full.corrs
        keys = sorted(corrs.lambda_index)
        track_ids = sorted({k[0] for k in keys})
        tid_to_local = {t: n for n, t in enumerate(track_ids)}

        n_obs = len(keys)
        self.track_ids = track_ids
        self.tid = np.array([tid_to_local[k[0]] for k in keys])
        self.u = np.zeros((n_obs, 2))
        self.RtT = np.zeros((n_obs, 3, 3))       # Rtilde^T per observation
        self.center_rot = np.zeros((n_obs, 3))   # R_i t_cam per observation
        self.A_half = np.zeros((n_obs, 3))       # A_i dt^2/2
        self.c_v = np.zeros(n_obs)               # i dt
        self.c_g = np.zeros(n_obs)               # i^2 dt^2/2
        self.Krow = np.zeros((n_obs, 5))         # fx, skew, cx, fy, cy
        for n, key in enumerate(keys):
            info = corrs.rays[key]
            obs = info.obs
            i = obs.scanline_index
            self.u[n] = obs.u[:2]
            self.RtT[n] = info.Rtilde.T
            self.center_rot[n] = geom.rotation(i) @ calib.t_cam_imu[obs.cam_id]
            self.A_half[n] = geom.accel_term(i) * geom.dt**2 / 2.0
            self.c_v[n] = i * geom.dt
            self.c_g[n] = i**2 * geom.dt**2 / 2.0
            K = calib.K[obs.cam_id]
            self.Krow[n] = (K[0, 0], K[0, 1], K[0, 2], K[1, 1], K[1, 2])

        v0, g0, _ = dehomogenize(y0)
        pts = init_points(full, y0)
        self.params = np.concatenate([v0, g0])
        self.X = np.stack([pts[t] for t in track_ids])
        self.n_tracks = len(track_ids)
        self.n_obs = n_obs
        self.damping = DEFAULT_LM_OPTS["damping0"]
        if 2 * n_obs < 6 + 3 * self.n_tracks:
            raise ValueError("fewer residuals than unknowns; refinement is underdetermined")

    # -- vectorized residuals/Jacobians ------------------------------------

    def _predict(self, params, X):
        v0, g0 = params[:3], params[3:6]
        t_i = self.c_v[:, None] * v0 + self.c_g[:, None] * g0 + self.A_half
        centers = t_i + self.center_rot
        x_c = np.einsum("nij,nj->ni", self.RtT, X[self.tid] - centers)
        return x_c

    def residuals(self, params=None, X=None) -> np.ndarray:
        params = self.params if params is None else params
        X = self.X if X is None else X
        x_c = self._predict(params, X)
        z = x_c[:, 2]
        if np.any(z <= 1e-9):
            raise CheiralityError("point behind camera during refinement")
        fx, sk, cx, fy, cy = self.Krow.T
        ux = (fx * x_c[:, 0] + sk * x_c[:, 1] + cx * z) / z
        uy = (fy * x_c[:, 1] + cy * z) / z
        return self.u - np.column_stack([ux, uy])

    def cost(self, params=None, X=None) -> float:
        try:
            r = self.residuals(params, X)
        except CheiralityError:
            return np.inf
        return float(np.sum(r * r))

    def jacobians(self):
        """(residual, J_y (n,2,6), J_X (n,2,3)) at the current state."""
        x_c = self._predict(self.params, self.X)
        z = x_c[:, 2]
        fx, sk, cx, fy, cy = self.Krow.T
        ux = (fx * x_c[:, 0] + sk * x_c[:, 1] + cx * z) / z
        uy = (fy * x_c[:, 1] + cy * z) / z
        r = self.u - np.column_stack([ux, uy])
        # d(u_hat)/d(x_c); residual Jacobians carry the opposite sign.
        Jproj = np.zeros((self.n_obs, 2, 3))
        Jproj[:, 0, 0] = fx / z
        Jproj[:, 0, 1] = sk / z
        Jproj[:, 0, 2] = (cx - ux) / z
        Jproj[:, 1, 1] = fy / z
        Jproj[:, 1, 2] = (cy - uy) / z
        P3 = np.einsum("nab,nbc->nac", Jproj, self.RtT)
        J_y = np.empty((self.n_obs, 2, 6))
        J_y[:, :, 0:3] = P3 * self.c_v[:, None, None]
        J_y[:, :, 3:6] = P3 * self.c_g[:, None, None]
        J_X = -P3
        return r, J_y, J_X


def _normal_equations(problem: BaProblem):
    r, J_y, J_X = problem.jacobians()
    Hyy = np.einsum("nai,naj->ij", J_y, J_y)
    b_y = np.einsum("nai,na->i", J_y, r)
    m = problem.n_tracks
    HXX = np.zeros((m, 3, 3))
    HyX = np.zeros((m, 6, 3))
    b_X = np.zeros((m, 3))
    np.add.at(HXX, problem.tid, np.einsum("nai,naj->nij", J_X, J_X))
    np.add.at(HyX, problem.tid, np.einsum("nai,naj->nij", J_y, J_X))
    np.add.at(b_X, problem.tid, np.einsum("nai,na->ni", J_X, r))
    return Hyy, HyX, HXX, b_y, b_X


def _schur_step(Hyy, HyX, HXX, b_y, b_X, damping):
    """Solve the damped normal equations with the point blocks eliminated."""
    Hyy_d = Hyy + damping * np.diag(np.diag(Hyy))
    HXX_d = HXX.copy()
    idx = np.arange(3)
    HXX_d[:, idx, idx] += damping * np.einsum("mii->mi", HXX)
    HXX_inv = np.linalg.inv(HXX_d)
    HyX_HXXinv = np.einsum("mij,mjk->mik", HyX, HXX_inv)
    Hred = Hyy_d - np.einsum("mik,mjk->ij", HyX_HXXinv, HyX)
    bred = b_y - np.einsum("mik,mk->i", HyX_HXXinv, b_X)
    dy = -np.linalg.solve(Hred, bred)
    dX = -np.einsum("mij,mj->mi", HXX_inv,
                    b_X + np.einsum("mji,j->mi", HyX, dy))
    return dy, dX, Hred


def refine_lm(problem: BaProblem, init: InitEstimate | None = None,
              max_iter: int = DEFAULT_LM_OPTS["max_iter"],
              damping0: float | None = None,
              damping_max: float = DEFAULT_LM_OPTS["damping_max"],
              cost_rtol: float = DEFAULT_LM_OPTS["cost_rtol"],
              trace_path=None) -> InitEstimate:
    """Levenberg-Marquardt refinement of (v0, g0, X).

    Damping is multiplied by 10 on rejected steps and divided by 10 on
    accepted ones; on divergence (damping cap hit) the best iterate is
    returned flagged, never raised.
    """
    if init is not None:
        problem.params = np.concatenate([init.v0, init.g0])
    problem.damping = DEFAULT_LM_OPTS["damping0"] if damping0 is None else damping0
    cost = problem.cost()
    best = (cost, problem.params.copy(), problem.X.copy())
    trace = [(0, cost, problem.damping, True)]
    converged = False
    iterations = 0
    Hred = None
    for iterations in range(1, max_iter + 1):
        Hyy, HyX, HXX, b_y, b_X = _normal_equations(problem)
        try:
            dy, dX, Hred = _schur_step(Hyy, HyX, HXX, b_y, b_X, problem.damping)
            new_cost = problem.cost(problem.params + dy, problem.X + dX)
        except np.linalg.LinAlgError:
            new_cost = np.inf
        accepted = new_cost < cost
        if accepted:
            problem.params = problem.params + dy
            problem.X = problem.X + dX
            rel = (cost - new_cost) / max(cost, np.finfo(float).tiny)
            cost = new_cost
            if cost < best[0]:
                best = (cost, problem.params.copy(), problem.X.copy())
            problem.damping = max(problem.damping / 10.0, 1e-12)
            if rel < cost_rtol:
                converged = True
        else:
            problem.damping *= 10.0
            if problem.damping > damping_max:
                log.warning("refinement diverged (damping cap); returning best iterate")
                break
        trace.append((iterations, cost, problem.damping, accepted))
        if converged:
            break
    if not converged:
        _, problem.params, problem.X = best
        cost = best[0]

    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "cost", "damping", "accepted"])
            w.writerows(trace)

    # Covariance of [v0; g0] from the undamped reduced Hessian, scaled by the
    # residual-based noise-variance estimate.
    Hyy, HyX, HXX, _, _ = _normal_equations(problem)
    try:
        HXX_inv = np.linalg.inv(HXX)
        Hred0 = Hyy - np.einsum("mij,mjk,mlk->il", HyX, HXX_inv, HyX)
        dof = 2 * problem.n_obs - (6 + 3 * problem.n_tracks)
        sigma2 = cost / max(dof, 1)
        cov = sigma2 * np.linalg.inv(Hred0)
        cov = 0.5 * (cov + cov.T)
        sigma_hat = float(np.sqrt(sigma2))
    except np.linalg.LinAlgError:
        cov, sigma_hat = None, None
    v0, g0 = problem.params[:3], problem.params[3:6]
    return InitEstimate(method="ba", v0=v0, g0=g0, iterations=max(iterations, 1),
                        converged=converged, cov=cov, sigma_hat=sigma_hat,
                        y=np.concatenate([v0, g0, [1.0]]))


def refine(system, init: InitEstimate, **opts) -> InitEstimate:
    """Build a refinement problem from an assembled system and run LM."""
    full = system.full if isinstance(system, ReducedSystem) else system
    y0 = init.y
    if y0 is None or abs(y0[-1]) < 1e-12:
        y0 = np.concatenate([init.v0, init.g0, [1.0]])
    problem = BaProblem(full, y0)
    return refine_lm(problem, init=init, **opts)


class BundleAdjustmentInitializer(_InitializerBase):
    """scikit-learn style wrapper: linear initialization followed by LM."""

    def __init__(self, init_method: str = "ls", max_iter: int = 50):
        self.init_method = init_method
        self.max_iter = max_iter

    def fit_estimate(self, system, covariances=None) -> InitEstimate:
        from . import estimators

        if self.init_method == "ls":
            seed = estimators.solve_ls(system)
        elif self.init_method == "renorm":
            seed = estimators.solve_renorm(system, covariances)
        else:
            raise ValueError(f"unknown init method {self.init_method!r}")
        return refine(system, seed, max_iter=self.max_iter)
