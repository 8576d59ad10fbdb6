"""Point cloud backbone: voxel subsampling and local-geometry features.

Features are deliberately cheap: per point, statistics of its k-nearest
neighborhood (mean offset, covariance eigenvalues, radial histogram) pushed
through a shared 3-layer MLP. Offsets are taken relative to the point, so the
features are translation invariant by construction; everything positional the
matcher needs comes from the rotary encoding downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import denoiser, tensor
from .errors import ConfigError, DimensionError, NumericError
from .tensor import DiffValue

# neighbor-distance histogram edges in meters (last bin open-ended)
_HIST_EDGES = np.array([0.1, 0.2, 0.4])
STAT_DIM = 3 + 3 + len(_HIST_EDGES) + 1


@dataclass(frozen=True)
class EncoderConfig:
    """k_neighbors for the local statistics; voxel size in meters for
    subsampling, or None to use the input points as superpoints directly."""

    k_neighbors: int = 8
    voxel: float | None = None

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ConfigError(f"k_neighbors must be >= 1, got {self.k_neighbors}")
        if self.voxel is not None and self.voxel <= 0.0:
            raise ConfigError(f"voxel must be positive or None, got {self.voxel}")


@dataclass(frozen=True)
class EncodedCloud:
    """Superpoint coordinates, their features, and for each superpoint the
    index of the first input point in its voxel."""

    coords: np.ndarray
    features: DiffValue
    origin_indices: np.ndarray


def voxel_subsample(p: np.ndarray, voxel: float) -> tuple[np.ndarray, np.ndarray]:
    """One centroid per occupied voxel, in first-occurrence order.

    Returns (centroids, origin_indices) where origin_indices[i] is the index
    of the first input point landing in voxel i. Deterministic for a given
    input order.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise DimensionError(f"expected (n, 3) points, got {p.shape}")
    if voxel <= 0.0:
        raise NumericError(f"voxel must be positive, got {voxel}")
    if len(p) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    keys = np.floor(p / voxel).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    groups = rank[inverse]
    counts = np.bincount(groups)
    centroids = np.zeros((len(counts), 3))
    np.add.at(centroids, groups, p)
    centroids /= counts[:, None]
    return centroids, first[order]


def local_stats(coords: np.ndarray, k: int = 8) -> np.ndarray:
    """Per-point neighborhood statistics, shape (n, STAT_DIM).

    For each point's k nearest neighbors (ties broken by index): mean offset
    (3), offset covariance eigenvalues ascending (3), and the neighbor
    distance histogram over fixed edges (normalized counts). Fewer than 2
    points yields all zeros.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise DimensionError(f"expected (n, 3) coords, got {coords.shape}")
    n = len(coords)
    stats = np.zeros((n, STAT_DIM))
    if n < 2:
        return stats
    k = min(k, n - 1)
    d2 = np.einsum("ij,ij->i", coords, coords)
    dist2 = d2[:, None] + d2[None, :] - 2.0 * (coords @ coords.T)
    np.fill_diagonal(dist2, np.inf)
    neighbor_idx = np.argsort(dist2, axis=1, kind="stable")[:, :k]
    offsets = coords[neighbor_idx] - coords[:, None, :]
    stats[:, 0:3] = offsets.mean(axis=1)
    centered = offsets - offsets.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    stats[:, 3:6] = np.linalg.eigvalsh(cov)
    dists = np.linalg.norm(offsets, axis=2)
    bins = np.digitize(dists, _HIST_EDGES)
    for b in range(len(_HIST_EDGES) + 1):
        stats[:, 6 + b] = (bins == b).sum(axis=1) / k
    return stats


def apply_feature_mlp(stats: np.ndarray, params: dict[str, DiffValue]) -> DiffValue:
    """Shared 3-layer MLP lifting statistics to d_model features."""
    x = tensor.value(stats)
    h = tensor.relu(tensor.add(tensor.matmul(x, params["encoder.mlp.w1"]), params["encoder.mlp.b1"]))
    h = tensor.relu(tensor.add(tensor.matmul(h, params["encoder.mlp.w2"]), params["encoder.mlp.b2"]))
    return tensor.add(tensor.matmul(h, params["encoder.mlp.w3"]), params["encoder.mlp.b3"])


def encode_features(coords: np.ndarray, params: dict[str, DiffValue], cfg: EncoderConfig) -> DiffValue:
    """Features for every point; zero-feature fallback below 2 points."""
    coords = np.asarray(coords, dtype=np.float64)
    if len(coords) < 2:
        d = params["encoder.mlp.w3"].data.shape[1]
        return tensor.value(np.zeros((len(coords), d)))
    return apply_feature_mlp(local_stats(coords, cfg.k_neighbors), params)


def encode_cloud(coords: np.ndarray, params: dict[str, DiffValue], cfg: EncoderConfig) -> EncodedCloud:
    """Subsample (if configured) and featurize one cloud."""
    coords = np.asarray(coords, dtype=np.float64)
    if cfg.voxel is not None:
        sub, origin = voxel_subsample(coords, cfg.voxel)
    else:
        sub, origin = coords, np.arange(len(coords), dtype=np.int64)
    return EncodedCloud(coords=sub, features=encode_features(sub, params, cfg), origin_indices=origin)


def initial_matching(
    f_p: DiffValue,
    f_q: DiffValue,
    rot_p: denoiser.RotaryEncoding,
    rot_q: denoiser.RotaryEncoding,
    params: dict[str, DiffValue],
) -> DiffValue:
    """Backbone matching logits over unwarped coordinates (same inner-product
    head as the denoiser, separate parameters)."""
    return denoiser.matching_logits(f_p, f_q, rot_p, rot_q, params, prefix="encoder.match")
