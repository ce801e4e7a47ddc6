"""Ground-truth labels and the keypoint, matching and credibility losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError
from .geometry import RigidTransform

PROB_FLOOR = 1e-12
CRED_CLAMP = 1e-7
KEYPOINT_TARGETS = ("literal", "normalized")


@dataclass(frozen=True, eq=False)
class GroundTruthLabels:
    j_star: np.ndarray
    y_hat: np.ndarray
    m_hat: np.ndarray
    distance: np.ndarray
    th: float

    @property
    def positives(self) -> np.ndarray:
        return np.nonzero(self.m_hat > 0.5)[0]

    @property
    def negatives(self) -> np.ndarray:
        return np.nonzero(self.m_hat < 0.5)[0]


def _points(x) -> np.ndarray:
    return np.asarray(getattr(x, "points", x), dtype=np.float64)


def ground_truth_labels(src_kpts, tgt_kpts, gt_residual: RigidTransform, th: float) -> GroundTruthLabels:
    """Nearest target keypoint to each mapped source keypoint, thresholded at ``th``."""
    if th <= 0:
        raise ParameterError(f"distance threshold must be > 0, got {th}")
    mapped = gt_residual.apply(_points(src_kpts))
    tgt = _points(tgt_kpts)
    diff = mapped[:, None, :] - tgt[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    j_star = np.argmin(dist, axis=1)
    d = dist[np.arange(len(mapped)), j_star]
    y = (d < th).astype(np.float64)
    return GroundTruthLabels(j_star=j_star, y_hat=y, m_hat=y.copy(), distance=d, th=th)


def row_entropy_term(M) -> Tensor:
    """``sum_j M_ij log M_ij`` per row, with ``0 log 0 = 0``."""
    M = ad.as_tensor(M)
    return ad.sum(M * ad.log(ad.clamp(M, 1e-300, 1.0)), axis=1)


def keypoint_loss(s, M, target: str = "literal") -> Tensor:
    """Mean squared gap between significance scores and matching-row confidence.

    ``literal`` regresses ``s_i`` onto ``sum_j M_ij log M_ij``; ``normalized``
    regresses onto ``1 - H_i / log K`` (``H_i`` the row entropy).
    """
    s, M = ad.as_tensor(s), ad.as_tensor(M)
    plogp = row_entropy_term(M)
    if target == "literal":
        gap = s - plogp
    elif target == "normalized":
        k = M.shape[1]
        scale = 1.0 / np.log(k) if k > 1 else 0.0
        gap = s - (plogp * scale + 1.0)
    else:
        raise ParameterError(f"unknown keypoint target {target!r}")
    return ad.mean(ad.square(gap))


def matching_loss(M, labels: GroundTruthLabels) -> Tensor:
    """Masked cross-entropy of each row at its ground-truth column."""
    M = ad.as_tensor(M)
    k1, k2 = M.shape
    flat = ad.reshape(M, (k1 * k2,))
    picked = ad.gather_rows(flat, np.arange(k1) * k2 + labels.j_star)
    nll = -ad.log(ad.clamp(picked, PROB_FLOOR, 1.0))
    return ad.mean(nll * Tensor(labels.y_hat))


def sample_balanced(
    labels: GroundTruthLabels, rng: np.random.Generator, n_pos: int = 64, n_neg: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Draw positive and negative keypoints; with replacement only on shortage."""

    def draw(pool, n):
        if len(pool) == 0 or n == 0:
            return np.zeros(0, dtype=np.intp)
        return rng.choice(pool, size=n, replace=len(pool) < n)

    return draw(labels.positives, n_pos), draw(labels.negatives, n_neg)


def credibility_loss(c, labels: GroundTruthLabels, pos_idx=None, neg_idx=None) -> Tensor:
    """Mean binary cross-entropy over the sampled (or, by default, all) keypoints."""
    c = ad.as_tensor(c)
    if pos_idx is None and neg_idx is None:
        idx = np.arange(c.shape[0])
    else:
        parts = [np.asarray(p, dtype=np.intp) for p in (pos_idx, neg_idx) if p is not None]
        idx = np.concatenate(parts)
    if idx.size == 0:
        raise ParameterError("credibility loss needs at least one sampled keypoint")
    target = labels.m_hat[idx]
    cc = ad.clamp(ad.gather_rows(c, idx), CRED_CLAMP, 1.0 - CRED_CLAMP)
    bce = -(Tensor(target) * ad.log(cc) + Tensor(1.0 - target) * ad.log(1.0 - cc))
    return ad.mean(bce)


def keypoint_gate(n: int) -> float:
    """Weight of the keypoint loss at (1-based) iteration ``n``."""
    return 1.0 if n == 1 else 0.0


def weighted_total(components: Sequence[tuple]):
    """Sum over iterations of ``gate(n) * keypoint + matching + credibility``.

    Works on floats and on tensors; ``None`` terms are skipped.
    """
    total = None
    for n, (kp, match, cred) in enumerate(components, start=1):
        terms = []
        if kp is not None and keypoint_gate(n) != 0.0:
            terms.append(kp * keypoint_gate(n))
        terms.extend(t for t in (match, cred) if t is not None)
        for t in terms:
            total = t if total is None else total + t
    return 0.0 if total is None else total


@dataclass(frozen=True)
class LossReport:
    keypoint: float
    matching: tuple[float, ...]
    credibility: tuple[float, ...]
    total: float
    gates: tuple[float, ...]

    @property
    def matching_sum(self) -> float:
        return float(np.sum(self.matching))

    @property
    def credibility_sum(self) -> float:
        return float(np.sum(self.credibility))


def _num(x) -> float:
    if x is None:
        return 0.0
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(components: Sequence[tuple], n_iterations: int | None = None) -> LossReport:
    """Build a :class:`LossReport` from per-iteration ``(keypoint, matching, credibility)``."""
    components = list(components)
    if n_iterations is not None and len(components) != n_iterations:
        raise ParameterError(f"expected {n_iterations} iterations, got {len(components)}")
    floats = [(_num(k), _num(m), _num(c)) for k, m, c in components]
    return LossReport(
        keypoint=floats[0][0] if floats else 0.0,
        matching=tuple(m for _, m, _ in floats),
        credibility=tuple(c for _, _, c in floats),
        total=float(weighted_total(floats)),
        gates=tuple(keypoint_gate(n) for n in range(1, len(floats) + 1)),
    )
