"""Closed-form weighted rigid alignment and the point-to-point ICP baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, ValidationError
from .geometry import NeighborIndex, PointCloud, RigidTransform, compose

RANK_TOL = 1e-12


def jacobi_svd3(A, tol: float = 1e-15, max_sweeps: int = 60):
    """One-sided Jacobi SVD of a 3x3 matrix: ``A = U @ diag(s) @ V.T``.

    Singular values are returned in descending order.  ``U`` is completed to
    an orthonormal basis when ``A`` is rank deficient.
    """
    W = np.array(A, dtype=np.float64)
    if W.shape != (3, 3):
        raise ValidationError(f"jacobi_svd3 needs a 3x3 matrix, got {W.shape}")
    V = np.eye(3)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in ((0, 1), (0, 2), (1, 2)):
            alpha = W[:, p] @ W[:, p]
            beta = W[:, q] @ W[:, q]
            gamma = W[:, p] @ W[:, q]
            if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                continue
            rotated = True
            zeta = (beta - alpha) / (2.0 * gamma)
            t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wp = W[:, p].copy()
            W[:, p] = c * wp - s * W[:, q]
            W[:, q] = s * wp + c * W[:, q]
            vp = V[:, p].copy()
            V[:, p] = c * vp - s * V[:, q]
            V[:, q] = s * vp + c * V[:, q]
        if not rotated:
            break
    sigma = np.sqrt(np.sum(W * W, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma, W, V = sigma[order], W[:, order], V[:, order]

    U = np.zeros((3, 3))
    scale = sigma[0] if sigma[0] > 0 else 1.0
    rank = int(np.sum(sigma > RANK_TOL * scale)) if sigma[0] > 0 else 0
    for k in range(rank):
        U[:, k] = W[:, k] / sigma[k]
    if rank == 0:
        U = np.eye(3)
    elif rank == 1:
        u0 = U[:, 0]
        helper = np.eye(3)[int(np.argmin(np.abs(u0)))]
        u1 = helper - (helper @ u0) * u0
        U[:, 1] = u1 / np.linalg.norm(u1)
        U[:, 2] = np.cross(U[:, 0], U[:, 1])
    elif rank == 2:
        U[:, 2] = np.cross(U[:, 0], U[:, 1])
    return U, sigma, V


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Source points paired row-by-row with target points and weights."""

    source: np.ndarray
    target: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        src = np.asarray(self.source, dtype=np.float64)
        tgt = np.asarray(self.target, dtype=np.float64)
        if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
            raise ValidationError(f"source {src.shape} and target {tgt.shape} must both be (K, 3)")
        w = self.weights
        w = np.full(len(src), 1.0 / len(src)) if w is None else np.asarray(w, dtype=np.float64)
        if w.shape != (len(src),):
            raise ValidationError(f"weights shape {w.shape} does not match {len(src)} rows")
        if np.any(w < 0) or abs(np.sum(w) - 1.0) > 1e-9:
            raise ValidationError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", tgt)
        object.__setattr__(self, "weights", w)


def weighted_kabsch(corr: CorrespondenceSet) -> RigidTransform:
    """Rigid transform minimising ``sum_i w_i ||R s_i + t - d_i||^2``."""
    keep = corr.weights > 0
    # dropping zero-weight rows keeps the result bit-identical to never having them
    src, tgt, w = corr.source[keep], corr.target[keep], corr.weights[keep]
    if len(w) < 3:
        raise DegenerateError(f"need >= 3 weighted correspondences, got {len(w)}")
    mu_s = w @ src
    mu_t = w @ tgt
    H = (src - mu_s).T @ ((tgt - mu_t) * w[:, None])
    U, sigma, V = jacobi_svd3(H)
    if sigma[0] <= 0.0 or sigma[1] <= RANK_TOL * sigma[0]:
        raise DegenerateError(
            f"cross-covariance has rank < 2 (singular values {sigma.tolist()}); "
            "correspondences are collinear or coincident"
        )
    d = 1.0 if np.linalg.det(V @ U.T) >= 0.0 else -1.0
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, mu_t - R @ mu_s)


def kabsch_objective(T: RigidTransform, corr: CorrespondenceSet) -> float:
    r = T.apply(corr.source) - corr.target
    return float(corr.weights @ np.sum(r * r, axis=1))


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    iterations: int
    converged: bool
    residuals: tuple[float, ...]


def icp(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform | None = None,
    max_iter: int = 2000,
    tol: float = 1e-8,
) -> IcpResult:
    """Point-to-point ICP.

    Stops once the mean squared nearest-neighbour distance changes by less
    than ``tol``.  ``residuals[0]`` is measured at ``init``.
    """
    index = NeighborIndex(target.points)
    tgt = target.points
    src = source.points
    T = RigidTransform.identity() if init is None else init
    moved = T.apply(src)
    idx, dist = index.query(moved, 1)
    residual = float(np.mean(dist[:, 0] ** 2))
    residuals = [residual]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        try:
            step = weighted_kabsch(CorrespondenceSet(moved, tgt[idx[:, 0]]))
        except DegenerateError:
            break
        T = compose(step, T)
        moved = T.apply(src)
        idx, dist = index.query(moved, 1)
        new = float(np.mean(dist[:, 0] ** 2))
        residuals.append(new)
        if abs(residual - new) < tol:
            converged = True
            break
        residual = new
    return IcpResult(T, it, converged, tuple(residuals))
