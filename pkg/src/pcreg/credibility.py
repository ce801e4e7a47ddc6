"""Correspondence credibility from the agreement of the two matching matrices."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .nn import DenseLayer, Mlp, Module


class CredibilityHead(Module):
    """Stack both matrices as 2 channels, lift pointwise, max over targets, score rows.

    ``lift_width`` is the channel count of the pointwise (1x1) lift; ``widths``
    is the per-row MLP, which must start at ``lift_width`` and end at 1.
    """

    def __init__(self, lift_width: int, widths: Sequence[int], rng: np.random.Generator):
        widths = list(widths)
        if widths[0] != lift_width or widths[-1] != 1:
            raise ShapeError("credibility MLP must map lift_width -> ... -> 1")
        self.lift = DenseLayer(2, lift_width, rng)
        self.mlp = Mlp(widths, rng, final_activation="sigmoid")

    def __call__(self, M_feat, M_coord) -> Tensor:
        M_feat, M_coord = ad.as_tensor(M_feat), ad.as_tensor(M_coord)
        if M_feat.shape != M_coord.shape or M_feat.ndim != 2:
            raise ShapeError(f"matrices {M_feat.shape} and {M_coord.shape} must match")
        k1, k2 = M_feat.shape
        stacked = ad.concat(
            [ad.reshape(M_feat, (k1 * k2, 1)), ad.reshape(M_coord, (k1 * k2, 1))]
        )
        lifted = ad.relu(self.lift(stacked))
        pooled = ad.max_reduce(ad.reshape(lifted, (k1, k2, self.lift.n_out)), axis=1)
        c = self.mlp(pooled)
        return ad.reshape(c, (k1,))


def credibility_scores(head: CredibilityHead, M_feat, M_coord) -> Tensor:
    return head(M_feat, M_coord)


def correspondence_weights(c) -> np.ndarray:
    """Keep scores at or above the median and renormalise them to sum to one."""
    c = c.data if isinstance(c, Tensor) else np.asarray(c, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    keep = c >= np.median(c)
    w = np.where(keep, c, 0.0)
    # correctly rounded, so the result does not depend on summation order
    return w / math.fsum(w)
