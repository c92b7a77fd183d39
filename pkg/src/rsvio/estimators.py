"""Eigenvalue-fit estimators on the reduced system.

All four linear estimators share the same structure: build a weighted moment
matrix ``M`` from the row triplets of B, optionally a bias-compensation
matrix ``N`` from the propagated row covariances, and take the generalized
eigenvector ``M y = gamma N y`` for the smallest-magnitude eigenvalue.

* least squares: ``M = B^T B / N``, plain eigenfit (no bias correction);
* Taubin: one generalized eigenfit with unit weights;
* iterative reweight: the weight-update loop with ``N`` pinned to identity;
* renormalization: the full loop, which also yields the noise level and the
  covariance of the estimate.

Estimator classes at the bottom wrap the functional solvers with a
scikit-learn style ``fit``/``get_params`` surface.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator

from .validation import SolutionAtInfinityError, as_array, check_covariance

log = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 30
DEFAULT_TOL = 1e-8
#: Keep rank 2 in the weight pseudo-inverse iff sigma_2/sigma_1 exceeds this.
DEFAULT_RANK_RATIO = 0.1
#: Relative eigenvalue cutoff for the covariance pseudo-inverse.
PINV_RCOND = 1e-12
#: Relative y^T M y below which the residual is considered exactly zero.
_ZERO_RESIDUAL = 1e-14


@dataclass(frozen=True)
class InitEstimate:
    """Estimated initial velocity and gravity with diagnostics."""

    method: str
    v0: np.ndarray
    g0: np.ndarray
    iterations: int
    converged: bool
    cov: np.ndarray | None = None        # 6x6 covariance of [v0; g0]
    sigma_hat: float | None = None       # estimated pixel noise level
    y: np.ndarray | None = None          # unit homogeneous solution vector
    cov_full: np.ndarray | None = None   # covariance incl. bias unknowns
    accel_bias: np.ndarray | None = None
    gyro_bias: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "v0", as_array(self.v0, (3,), "v0"))
        object.__setattr__(self, "g0", as_array(self.g0, (3,), "g0"))
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.cov is not None:
            check_covariance(self.cov, 6, "cov", atol=1e-6)


@dataclass(frozen=True)
class WeightMatrix:
    """Per-correspondence 3x3 weight with its truncation rank."""

    W: np.ndarray
    rank_used: int

    def __post_init__(self):
        if self.rank_used not in (1, 2):
            raise ValueError("rank_used must be 1 or 2")
        check_covariance(self.W, 3, "W", atol=1e-9)


def dehomogenize(y):
    """Split a homogeneous solution vector into (v0, g0, J_H).

    ``J_H`` is the Jacobian of the homogeneous->Euclidean map,
    ``(1/y_L^2) [y_L I | -y_{1:L-1}]``; it annihilates ``y`` itself.
    """
    y = np.asarray(y, dtype=np.float64)
    L = y.shape[0]
    scale = y[-1]
    if abs(scale) < 1e-12 * np.linalg.norm(y):
        raise SolutionAtInfinityError("homogeneous component of the solution is ~0")
    J_H = np.hstack([scale * np.eye(L - 1), -y[:-1, None]]) / scale**2
    e = y[:-1] / scale
    return e[0:3], e[3:6], J_H


def _canonical_sign(y: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(y)))
    return -y if y[k] < 0 else y


def _smallest_gep(M: np.ndarray, Nmat: np.ndarray | None):
    """Unit eigenvector for the smallest-|eigenvalue| of M y = gamma N y.

    Uses the symmetric-definite solver when N admits a Cholesky factor and
    falls back to a QZ-style general solve for semi-definite N.
    """
    if Nmat is None:
        w, V = np.linalg.eigh(M)
        k = int(np.argmin(np.abs(w)))
        return _canonical_sign(V[:, k]), float(w[k])
    try:
        w, V = scipy.linalg.eigh(M, Nmat)
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
        w, V = scipy.linalg.eig(M, Nmat)
        finite = np.isfinite(w)
        if not np.any(finite):
            raise np.linalg.LinAlgError(
                "bias-compensation matrix numerically indefinite (no finite eigenvalue)")
        mag = np.where(finite, np.abs(w), np.inf)
        k = int(np.argmin(mag))
        y = np.real(V[:, k])
        y = y / np.linalg.norm(y)
        return _canonical_sign(y), float(np.real(w[k]))
    k = int(np.argmin(np.abs(w)))
    y = V[:, k]
    y = y / np.linalg.norm(y)
    return _canonical_sign(y), float(w[k])


def _rows(system) -> np.ndarray:
    """Row triplets of B as an (N, 3, L) array from a system or raw matrix."""
    B = getattr(system, "B", system)
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2 or B.shape[0] % 3:
        raise ValueError("B must be a (3N, L) matrix")
    return B.reshape(-1, 3, B.shape[1])


def _cov_array(covariances) -> np.ndarray:
    arr = getattr(covariances, "array", covariances)
    return np.asarray(arr, dtype=np.float64)


def _check_rank(B3: np.ndarray):
    N, _, L = B3.shape
    if N < 6:
        raise ValueError(f"need >= 6 correspondences, got {N}")
    s = np.linalg.svd(B3.reshape(-1, L), compute_uv=False)
    if s[L - 2] <= 1e-12 * s[0]:
        raise ValueError("rank-deficient system (< 6 effective correspondences)")


def _moment(B3: np.ndarray, W: np.ndarray) -> np.ndarray:
    return np.einsum("ast,asl,atm->lm", W, B3, B3) / B3.shape[0]


def _bias_matrix(V0: np.ndarray, W: np.ndarray) -> np.ndarray:
    return np.einsum("ast,astlm->lm", W, V0) / V0.shape[0]


#: Per-pair weights are clipped to this multiple of the median weight trace.
#: Legitimate depth/lever-arm heterogeneity spans well under 100x; anything
#: far beyond that is a collapsed covariance (typically corrupted geometry)
#: that would otherwise act as a hard constraint and drag the fit.
WEIGHT_CAP_RATIO = 300.0


def update_weights(V0: np.ndarray, y: np.ndarray, rank_ratio: float = DEFAULT_RANK_RATIO,
                   cap_ratio: float = WEIGHT_CAP_RATIO):
    """Rank-truncated pseudo-inverse weights [ (y, V0^(st) y) ]^-.

    Truncation keeps rank 2 iff the second singular value exceeds
    ``rank_ratio`` times the first, else rank 1 (both guard near-dependent
    row triplets from blowing up the weights); the overall scale per pair is
    capped at ``cap_ratio`` times the median.
    """
    U = np.einsum("astlm,l,m->ast", V0, y, y)
    U = 0.5 * (U + np.transpose(U, (0, 2, 1)))
    w, V = np.linalg.eigh(U)              # ascending eigenvalues
    s1 = w[:, 2]
    s2 = w[:, 1]
    rank2 = s2 > rank_ratio * s1
    inv = np.zeros_like(w)
    ok1 = s1 > 0
    inv[ok1, 2] = 1.0 / w[ok1, 2]
    ok2 = rank2 & (s2 > 0)
    inv[ok2, 1] = 1.0 / w[ok2, 1]
    W = np.einsum("ask,ak,atk->ast", V, inv, V)
    # Degenerate all-zero blocks fall back to unit weights.
    W[~ok1] = np.eye(3)
    if cap_ratio:
        tr = np.einsum("ass->a", W)
        cap = cap_ratio * np.median(tr)
        heavy = tr > cap
        if np.any(heavy):
            W[heavy] *= (cap / tr[heavy])[:, None, None]
    ranks = np.where(rank2, 2, 1)
    return W, ranks


def _pinv_truncated(M: np.ndarray, rcond: float = PINV_RCOND) -> np.ndarray:
    """Pseudo-inverse of the moment matrix with its null direction removed.

    The smallest eigenpair is always dropped (it is the solution direction,
    annihilated by J_H anyway but numerically explosive), plus anything
    below the relative cutoff.
    """
    w, V = np.linalg.eigh(M)
    keep = w > rcond * w[-1]
    keep[0] = False
    return (V[:, keep] / w[keep]) @ V[:, keep].T


def _finalize(method, y, M=None, n_pairs=None, iterations=1, converged=True,
              with_cov=False, bias_layout=None):
    v0, g0, J_H = dehomogenize(y)
    cov6 = cov_full = None
    sigma_hat = None
    accel_bias = gyro_bias = None
    L = y.shape[0]
    if bias_layout:
        e = y[:-1] / y[-1]
        if "accel" in bias_layout:
            accel_bias = e[bias_layout["accel"]]
        if "gyro" in bias_layout:
            gyro_bias = e[bias_layout["gyro"]]
    if with_cov:
        dof = 2.0 - (L - 1.0) / n_pairs
        if dof <= 0:
            log.warning("too few correspondences (%d) to estimate the noise level", n_pairs)
        else:
            sigma2 = max(float(y @ M @ y), 0.0) / dof
            cov_full = sigma2 / n_pairs * (J_H @ _pinv_truncated(M) @ J_H.T)
            cov_full = 0.5 * (cov_full + cov_full.T)
            cov6 = cov_full[:6, :6]
            sigma_hat = float(np.sqrt(sigma2))
    return InitEstimate(method=method, v0=v0, g0=g0, iterations=iterations,
                        converged=converged, cov=cov6, sigma_hat=sigma_hat,
                        y=y, cov_full=cov_full if with_cov else None,
                        accel_bias=accel_bias, gyro_bias=gyro_bias)


def _layout(system) -> dict:
    full = getattr(system, "full", None)
    return getattr(full, "bias_layout", {}) if full is not None else {}


def solve_ls(system) -> InitEstimate:
    """Plain least squares: eigenfit of B^T B / N (no bias correction)."""
    B3 = _rows(system)
    _check_rank(B3)
    W = np.broadcast_to(np.eye(3), (B3.shape[0], 3, 3))
    y, _ = _smallest_gep(_moment(B3, W), None)
    return _finalize("ls", y, bias_layout=_layout(system))


def solve_taubin(system, covariances) -> InitEstimate:
    """Taubin fit: one generalized eigenfit with unit weights."""
    B3 = _rows(system)
    _check_rank(B3)
    V0 = _cov_array(covariances)
    W = np.broadcast_to(np.eye(3), (B3.shape[0], 3, 3))
    y, _ = _smallest_gep(_moment(B3, W), _bias_matrix(V0, W))
    return _finalize("taubin", y, bias_layout=_layout(system))


def _reweight_loop(system, covariances, *, use_bias_matrix: bool, method: str,
                   max_iter: int, tol: float, rank_ratio: float) -> InitEstimate:
    B3 = _rows(system)
    _check_rank(B3)
    V0 = _cov_array(covariances)
    n_pairs = B3.shape[0]
    W = np.broadcast_to(np.eye(3), (n_pairs, 3, 3)).copy()
    y_prev = None
    best = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        M = _moment(B3, W)
        Nmat = _bias_matrix(V0, W) if use_bias_matrix else None
        y, _ = _smallest_gep(M, Nmat)
        resid = float(y @ M @ y)
        if best is None or resid < best[0]:
            best = (resid, y, M)
        if resid <= _ZERO_RESIDUAL * max(np.trace(M), np.finfo(float).tiny):
            converged = True
            break
        if y_prev is not None and min(np.max(np.abs(y - y_prev)),
                                      np.max(np.abs(y + y_prev))) < tol:
            converged = True
            break
        W, _ = update_weights(V0, y, rank_ratio)
        y_prev = y
    if not converged:
        _, y, M = best
        log.warning("%s did not converge in %d iterations; returning best iterate",
                    method, max_iter)
    return _finalize(method, y, M=M, n_pairs=n_pairs, iterations=it,
                     converged=converged, with_cov=(method == "renorm"),
                     bias_layout=_layout(system))


def solve_iter_reweight(system, covariances, max_iter: int = DEFAULT_MAX_ITER,
                        tol: float = DEFAULT_TOL,
                        rank_ratio: float = DEFAULT_RANK_RATIO) -> InitEstimate:
    """Iteratively reweighted least squares (bias matrix pinned to identity)."""
    return _reweight_loop(system, covariances, use_bias_matrix=False,
                          method="iter-reweight", max_iter=max_iter, tol=tol,
                          rank_ratio=rank_ratio)


def solve_renorm(system, covariances, max_iter: int = DEFAULT_MAX_ITER,
                 tol: float = DEFAULT_TOL,
                 rank_ratio: float = DEFAULT_RANK_RATIO) -> InitEstimate:
    """Renormalization: iterated generalized eigenfit with weight updates.

    On top of (v0, g0) this also returns the estimated pixel noise level
    ``sigma_hat`` and the covariance of the estimate,
    ``sigma^2/N * J_H M^- J_H^T``.
    """
    return _reweight_loop(system, covariances, use_bias_matrix=True,
                          method="renorm", max_iter=max_iter, tol=tol,
                          rank_ratio=rank_ratio)


# ---------------------------------------------------------------------------
# scikit-learn style wrappers
# ---------------------------------------------------------------------------

class _InitializerBase(BaseEstimator):
    """Shared fit surface: estimators consume a reduced system (+covariances)."""

    def fit(self, system, covariances=None):
        est = self.fit_estimate(system, covariances)
        self.estimate_ = est
        self.v0_ = est.v0
        self.g0_ = est.g0
        self.cov_ = est.cov
        self.sigma_ = est.sigma_hat
        self.n_iter_ = est.iterations
        self.converged_ = est.converged
        return self

    def fit_estimate(self, system, covariances=None) -> InitEstimate:
        raise NotImplementedError


class LeastSquaresInitializer(_InitializerBase):
    """Eigenfit of the unweighted moment matrix."""

    def fit_estimate(self, system, covariances=None) -> InitEstimate:
        return solve_ls(system)


class TaubinInitializer(_InitializerBase):
    """Single generalized eigenfit with unit weights."""

    def fit_estimate(self, system, covariances=None) -> InitEstimate:
        if covariances is None:
            raise ValueError("Taubin requires propagated row covariances")
        return solve_taubin(system, covariances)


class IterativeReweightInitializer(_InitializerBase):
    def __init__(self, max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL,
                 rank_ratio: float = DEFAULT_RANK_RATIO):
        self.max_iter = max_iter
        self.tol = tol
        self.rank_ratio = rank_ratio

    def fit_estimate(self, system, covariances=None) -> InitEstimate:
        if covariances is None:
            raise ValueError("iterative reweighting requires row covariances")
        return solve_iter_reweight(system, covariances, self.max_iter, self.tol,
                                   self.rank_ratio)


class RenormalizationInitializer(_InitializerBase):
    def __init__(self, max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL,
                 rank_ratio: float = DEFAULT_RANK_RATIO):
        self.max_iter = max_iter
        self.tol = tol
        self.rank_ratio = rank_ratio

    def fit_estimate(self, system, covariances=None) -> InitEstimate:
        if covariances is None:
            raise ValueError("renormalization requires row covariances")
        return solve_renorm(system, covariances, self.max_iter, self.tol,
                            self.rank_ratio)
