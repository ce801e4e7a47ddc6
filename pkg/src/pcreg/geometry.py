"""Core 3D types, SE(3) operations, nearest-neighbour search and error metrics.

Rotations use the intrinsic x-y-z Euler convention throughout: a triple
``(ax, ay, az)`` in degrees maps to ``Rx(ax) @ Ry(ay) @ Rz(az)``.  The same
convention drives :func:`random_transform` and :func:`rotation_error_deg`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParameterError, ValidationError

ORTHO_TOL = 1e-9


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of 3D points stored as an ``(N, 3)`` float64 array."""

    points: np.ndarray

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValidationError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValidationError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.points[np.asarray(idx)])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation ``R`` in SO(3) plus translation ``t``; maps ``x`` to ``R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValidationError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValidationError("transform entries must be finite")
        check_rotation(R, ORTHO_TOL)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=np.float64)
        if T.shape != (4, 4):
            raise ValidationError(f"expected a 4x4 matrix, got {T.shape}")
        if not np.array_equal(T[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValidationError("last row of a homogeneous transform must be 0 0 0 1")
        return cls(T[:3, :3], T[:3, 3])

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> None:
    """Raise :class:`ValidationError` unless ``R`` is a proper rotation."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValidationError(f"rotation must be 3x3, got {R.shape}")
    ortho = np.max(np.abs(R.T @ R - np.eye(3)))
    det = np.linalg.det(R)
    if ortho > tol or abs(det - 1.0) > tol:
        raise ValidationError(
            f"not a rotation: max|R^T R - I| = {ortho:.3e}, det = {det:.12f}"
        )


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    return PointCloud(T.apply(cloud.points))


def compose(outer: RigidTransform, inner: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``inner`` first, then ``outer``."""
    R = outer.rotation @ inner.rotation
    t = outer.rotation @ inner.translation + outer.translation
    return RigidTransform(R, t)


def invert(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def euler_to_matrix(angles_deg: Sequence[float]) -> np.ndarray:
    """``Rx(ax) @ Ry(ay) @ Rz(az)`` for angles in degrees."""
    ax, ay, az = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    Ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    Rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return Rx @ Ry @ Rz


def matrix_to_euler(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_to_matrix`; returns degrees, ``ay`` in [-90, 90].

    At gimbal lock (``|ay| = 90``) the x angle is set to zero and the whole
    residual twist is assigned to z.
    """
    R = np.asarray(R, dtype=np.float64)
    sy = np.clip(R[0, 2], -1.0, 1.0)
    ay = np.arcsin(sy)
    if abs(sy) < 1.0 - 1e-12:
        ax = np.arctan2(-R[1, 2], R[2, 2])
        az = np.arctan2(-R[0, 1], R[0, 0])
    else:
        ax = 0.0
        az = np.arctan2(R[1, 0], R[1, 1])
    return np.rad2deg(np.array([ax, ay, az]))


def random_transform(rot_max_deg: float, trans_max: float, seed) -> RigidTransform:
    """Euler angles uniform in ``[0, rot_max_deg]``, translation in ``[-trans_max, trans_max]``.

    ``seed`` may be an int, a ``SeedSequence`` or a ``numpy.random.Generator``.
    """
    if not 0.0 <= rot_max_deg < 180.0:
        raise ParameterError(f"rot_max_deg must lie in [0, 180), got {rot_max_deg}")
    if trans_max < 0.0:
        raise ParameterError(f"trans_max must be >= 0, got {trans_max}")
    rng = np.random.default_rng(seed)
    angles = rng.uniform(0.0, rot_max_deg, size=3)
    t = rng.uniform(-trans_max, trans_max, size=3)
    return RigidTransform(euler_to_matrix(angles), t)


class NeighborIndex:
    """k-d tree over a point cloud answering exact k-nearest queries.

    Results are sorted by ascending distance with ties resolved towards the
    lower point index.
    """

    def __init__(self, points):
        if isinstance(points, PointCloud):
            points = points.points
        self.points = _frozen(points)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise ValidationError("NeighborIndex needs a non-empty (N, d) array")
        self._tree = cKDTree(self.points, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(indices, distances)``, each of shape ``(M, k)``."""
        n = len(self)
        if not 1 <= k <= n:
            raise ParameterError(f"k must lie in [1, {n}], got {k}")
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        probe = min(k + 1, n)
        dist, idx = self._tree.query(q, k=probe)
        dist = dist.reshape(len(q), probe)
        idx = idx.reshape(len(q), probe)
        # re-sort each row by (distance, index)
        order = np.lexsort((idx, dist), axis=-1)
        dist = np.take_along_axis(dist, order, axis=-1)
        idx = np.take_along_axis(idx, order, axis=-1)
        if probe > k:
            # a tie straddling the k-th slot may hide lower indices further out
            for r in np.nonzero(dist[:, k] == dist[:, k - 1])[0]:
                idx[r, :k], dist[r, :k] = self._resolve_tie(q[r], k, dist[r, k - 1])
        return idx[:, :k].copy(), dist[:, :k].copy()

    def _resolve_tie(self, q, k, radius):
        cand = np.asarray(self._tree.query_ball_point(q, radius * (1 + 1e-12) + 1e-300))
        d = np.linalg.norm(self.points[cand] - q, axis=1)
        order = np.lexsort((cand, d))[:k]
        return cand[order], d[order]


def knn(index: NeighborIndex, query, k: int) -> list[tuple[int, float]]:
    """The ``k`` closest points to a single query as ``(index, distance)`` pairs."""
    idx, dist = index.query(np.asarray(query, dtype=np.float64)[None, :], k)
    return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]


def rotation_error_deg(R_est, R_gt) -> np.ndarray:
    """Per-axis absolute Euler-angle differences in degrees.

    Differences are wrapped into [-180, 180) before taking magnitudes, so a
    result never exceeds 180.
    """
    tol = 1e-6
    check_rotation(R_est, tol)
    check_rotation(R_gt, tol)
    diff = matrix_to_euler(R_est) - matrix_to_euler(R_gt)
    diff = (diff + 180.0) % 360.0 - 180.0
    return np.abs(diff)


@dataclass(frozen=True)
class ErrorReport:
    """Rotation errors in degrees, translation errors in model units."""

    rmse_rot_deg: float
    mae_rot_deg: float
    rmse_trans: float
    mae_trans: float
    n_pairs: int = 0

    def as_row(self) -> list[float]:
        return [self.rmse_rot_deg, self.mae_rot_deg, self.rmse_trans, self.mae_trans]


def transform_errors(T_est: RigidTransform, T_gt: RigidTransform):
    """``(rotation error triple, translation error 3-vector)`` for one pair."""
    rot = rotation_error_deg(T_est.rotation, T_gt.rotation)
    trans = np.abs(T_est.translation - T_gt.translation)
    return rot, trans


def aggregate_errors(per_pair) -> ErrorReport:
    """RMSE and MAE over every scalar component of the per-pair errors."""
    per_pair = list(per_pair)
    if not per_pair:
        raise ParameterError("aggregate_errors needs at least one pair")
    rot = np.array([np.asarray(r, dtype=np.float64).reshape(3) for r, _ in per_pair])
    trans = np.array([np.asarray(t, dtype=np.float64).reshape(3) for _, t in per_pair])
    return ErrorReport(
        rmse_rot_deg=float(np.sqrt(np.mean(rot**2))),
        mae_rot_deg=float(np.mean(np.abs(rot))),
        rmse_trans=float(np.sqrt(np.mean(trans**2))),
        mae_trans=float(np.mean(np.abs(trans))),
        n_pairs=len(per_pair),
    )
