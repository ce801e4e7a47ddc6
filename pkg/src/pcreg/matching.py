"""Pairwise feature/coordinate tensors, the two matching heads, and their fusion.

Pair tensors are materialised densely as ``(K1, K2, C)``:

* feature pairs: ``[||f_s - f_t|| ; (f_s - f_t) / ||f_s - f_t||]``
* coordinate pairs: ``[||p_s - p_t|| ; (p_s - p_t) / ||p_s - p_t|| ; p_s]``

Directions use the guarded normalisation from :mod:`pcreg.autodiff`, so a
zero difference yields the zero direction.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .nn import Mlp, Module

FUSION_MODES = ("pre_softmax", "post_softmax")


def _pair_rows(k1: int, k2: int) -> tuple[np.ndarray, np.ndarray]:
    return np.repeat(np.arange(k1), k2), np.tile(np.arange(k2), k1)


def _distance_direction(a: Tensor, b: Tensor, k1: int, k2: int):
    ii, jj = _pair_rows(k1, k2)
    diff = ad.gather_rows(a, ii) - ad.gather_rows(b, jj)
    dist = ad.reshape(ad.norm_last(diff), (k1 * k2, 1))
    return dist, ad.safe_normalize(diff), ii


def feature_pair_tensor(F_S, F_T) -> Tensor:
    F_S, F_T = ad.as_tensor(F_S), ad.as_tensor(F_T)
    if F_S.ndim != 2 or F_T.ndim != 2 or F_S.shape[1] != F_T.shape[1]:
        raise ShapeError(f"feature tensors {F_S.shape} and {F_T.shape} are incompatible")
    k1, k2, d = F_S.shape[0], F_T.shape[0], F_S.shape[1]
    dist, direction, _ = _distance_direction(F_S, F_T, k1, k2)
    return ad.reshape(ad.concat([dist, direction]), (k1, k2, d + 1))


def coord_pair_tensor(P_S, P_T) -> Tensor:
    P_S, P_T = ad.as_tensor(P_S), ad.as_tensor(P_T)
    if P_S.ndim != 2 or P_T.ndim != 2 or P_S.shape[1] != 3 or P_T.shape[1] != 3:
        raise ShapeError(f"coordinate tensors {P_S.shape} and {P_T.shape} must be (K, 3)")
    k1, k2 = P_S.shape[0], P_T.shape[0]
    dist, direction, ii = _distance_direction(P_S, P_T, k1, k2)
    source = ad.gather_rows(P_S, ii)
    return ad.reshape(ad.concat([dist, direction, source]), (k1, k2, 7))


class MatchingHead(Module):
    """Cell-wise MLP mapping each pair descriptor to an unbounded score."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator):
        if list(widths)[-1] != 1:
            raise ShapeError("a matching head must end in a single output")
        self.mlp = Mlp(widths, rng)

    @property
    def in_width(self) -> int:
        return self.mlp.widths[0]

    def scores(self, pair_tensor) -> Tensor:
        pair_tensor = ad.as_tensor(pair_tensor)
        if pair_tensor.ndim != 3 or pair_tensor.shape[2] != self.in_width:
            raise ShapeError(
                f"head expects (K, K, {self.in_width}) pair tensor, got {pair_tensor.shape}"
            )
        k1, k2, c = pair_tensor.shape
        out = self.mlp(ad.reshape(pair_tensor, (k1 * k2, c)))
        return ad.reshape(out, (k1, k2))

    def __call__(self, pair_tensor) -> Tensor:
        return ad.softmax_rows(self.scores(pair_tensor))


def matching_head(head: MatchingHead, pair_tensor) -> Tensor:
    return head(pair_tensor)


def fuse(M_feat, M_coord) -> Tensor:
    """Element-wise average of two row-stochastic matrices (stays row-stochastic)."""
    M_feat, M_coord = ad.as_tensor(M_feat), ad.as_tensor(M_coord)
    if M_feat.shape != M_coord.shape:
        raise ShapeError(f"cannot fuse {M_feat.shape} with {M_coord.shape}")
    return (M_feat + M_coord) * 0.5


def fuse_scores(S_feat, S_coord) -> Tensor:
    """Single softmax over summed head scores (the ``post_softmax`` fusion)."""
    return ad.softmax_rows(ad.as_tensor(S_feat) + ad.as_tensor(S_coord))


def hard_assign(M) -> np.ndarray:
    """Row-wise argmax with ties resolved towards the lowest column."""
    M = M.data if isinstance(M, Tensor) else np.asarray(M)
    return np.argmax(M, axis=1)


def response_ratio(M_feat, M_coord) -> float:
    """Peak of the feature matrix over peak of the coordinate matrix."""
    a = M_feat.data if isinstance(M_feat, Tensor) else np.asarray(M_feat)
    b = M_coord.data if isinstance(M_coord, Tensor) else np.asarray(M_coord)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    denom = float(np.max(b))
    if denom == 0.0:
        return float("inf")
    return float(np.max(a)) / denom


def write_matrix_csv(path, M) -> None:
    """Row-major CSV with 17 significant digits."""
    M = M.data if isinstance(M, Tensor) else np.asarray(M)
    np.savetxt(Path(path), M, delimiter=",", fmt="%.17g")


def dump_matching(directory, stem: str, iteration: int, M_feat, M_coord, M) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for tag, mat in (("M_feat", M_feat), ("M_coord", M_coord), ("M", M)):
        write_matrix_csv(out / f"{stem}_iter{iteration}_{tag}.csv", mat)
