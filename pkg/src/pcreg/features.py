"""Per-point descriptors from stacked edge convolutions and top-K keypoint selection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError
from .geometry import PointCloud
from .nn import EdgeConv, Mlp, Module


class FeatureExtractor(Module):
    """Edge-convolution stack; each layer builds its neighbourhood in its own input space."""

    def __init__(self, widths: Sequence[int], k: int, rng: np.random.Generator):
        widths = list(widths)
        self.k = k
        self.widths = widths
        self.convs = [EdgeConv(a, b, k, rng) for a, b in zip(widths[:-1], widths[1:])]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def __call__(self, points, neighbors: Sequence[np.ndarray] | None = None):
        """Return ``(features, neighbour graphs)``; pass the graphs back to replay them."""
        x = ad.as_tensor(points)
        graphs = []
        for i, conv in enumerate(self.convs):
            x, g = conv(x, None if neighbors is None else neighbors[i])
            graphs.append(g)
        return x, graphs


class SignificanceHead(Module):
    """MLP with a final sigmoid scoring how discriminative each descriptor is."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator):
        self.mlp = Mlp(widths, rng, final_activation="sigmoid")

    def __call__(self, features) -> Tensor:
        s = self.mlp(features)
        return ad.reshape(s, (s.shape[0],))


@dataclass(frozen=True, eq=False)
class KeypointSet:
    points: np.ndarray
    features: np.ndarray
    indices: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def extract_features(extractor: FeatureExtractor, cloud: PointCloud) -> np.ndarray:
    """``(N, D)`` descriptors for ``cloud``."""
    if len(cloud) <= extractor.k:
        raise ParameterError(
            f"cloud of {len(cloud)} points is too small for {extractor.k}-neighbourhoods"
        )
    feats, _ = extractor(cloud.points)
    return feats.data


def significance_scores(head: SignificanceHead, features) -> np.ndarray:
    return head(features).data


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, best first, ties towards the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"K must lie in [1, {n}], got {k}")
    order = np.lexsort((np.arange(n), -scores))
    return order[:k]


def select_keypoints(cloud: PointCloud, features, scores, K: int) -> KeypointSet:
    feats = features.data if isinstance(features, Tensor) else np.asarray(features)
    scores = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    idx = top_k_indices(scores, K)
    return KeypointSet(
        points=cloud.points[idx],
        features=feats[idx],
        indices=idx,
        scores=scores[idx],
    )
