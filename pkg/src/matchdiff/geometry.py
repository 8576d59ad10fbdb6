"""Rigid alignment and flow interpolation utilities.

soft_procrustes solves the weighted rigid fit from a soft matching matrix:
the top-k entries act as weighted correspondences, the weights renormalized to
sum 1, and the rotation comes from the SVD of the weighted cross-covariance
with the usual determinant sign fix (never a reflection). The SVD is treated
as a constant within a training step; nothing here participates in autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsm
from .errors import DegenerateGeometryError, DimensionError, NumericError


@dataclass(frozen=True)
class PointCloud:
    """Coordinates in meters, one row per point."""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise DimensionError(f"coords must be (n, 3), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise NumericError("coords contain non-finite values")
        object.__setattr__(self, "coords", coords)

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class RigidTransform:
    """Rotation r (3x3, det +1) and translation t (3,); maps p to r @ p + t."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise DimensionError(f"expected r (3,3) and t (3,), got {r.shape}, {t.shape}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)

    def is_valid(self, tol: float = 1e-6) -> bool:
        """Orthonormal with determinant +1 within tol."""
        return bool(
            np.all(np.isfinite(self.r))
            and np.all(np.isfinite(self.t))
            and np.allclose(self.r.T @ self.r, np.eye(3), atol=tol)
            and abs(np.linalg.det(self.r) - 1.0) <= tol
        )


def identity_transform() -> RigidTransform:
    return RigidTransform(r=np.eye(3), t=np.zeros(3))


def compose(outer: RigidTransform, inner: RigidTransform) -> RigidTransform:
    """Transform applying inner first, then outer."""
    return RigidTransform(r=outer.r @ inner.r, t=outer.r @ inner.t + outer.t)


def invert(rt: RigidTransform) -> RigidTransform:
    return RigidTransform(r=rt.r.T, t=-rt.r.T @ rt.t)


def rigid_warp(p: np.ndarray, rt: RigidTransform) -> np.ndarray:
    """Apply r @ x + t to every row of p."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise DimensionError(f"expected (n, 3) points, got {p.shape}")
    return p @ rt.r.T + rt.t


def soft_procrustes(e: np.ndarray, p: np.ndarray, q: np.ndarray, k: int) -> RigidTransform:
    """Weighted rigid fit from the top-k entries of a soft matching matrix.

    Selected entries (i, j, w) pair p[i] with q[j] at weight w; weights are
    renormalized to sum 1. Rotation from SVD of the weighted cross-covariance
    H = sum w (p_i - pbar)(q_j - qbar)^T: R = V diag(1, 1, det(VU^T)) U^T,
    t = qbar - R pbar. Raises on configurations where the rotation is not
    determined (fewer than 3 matches, zero total weight, collinear points).
    """
    e = np.asarray(e, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or q.ndim != 2 or q.shape[1] != 3:
        raise DimensionError(f"expected (n, 3) clouds, got {p.shape} and {q.shape}")
    if e.shape != (p.shape[0], q.shape[0]):
        raise DimensionError(
            f"matching matrix {e.shape} inconsistent with clouds {p.shape[0]}x{q.shape[0]}"
        )
    if k < 3:
        raise NumericError(f"need at least 3 correspondences, got k={k}")
    matches = dsm.top_k_matches(e, min(k, e.size))
    if len(matches) < 3:
        raise DegenerateGeometryError(f"only {len(matches)} candidate matches")
    idx_p = np.array([m[0] for m in matches])
    idx_q = np.array([m[1] for m in matches])
    w = np.array([m[2] for m in matches])
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise DegenerateGeometryError("selected matches carry no positive weight")
    w = w / total
    ps = p[idx_p]
    qs = q[idx_q]
    p_bar = w @ ps
    q_bar = w @ qs
    h = (ps - p_bar).T @ ((qs - q_bar) * w[:, None])
    u, sing, vt = np.linalg.svd(h)
    if sing[1] <= 1e-9 * max(sing[0], 1e-30):
        raise DegenerateGeometryError("cross-covariance is rank-deficient (collinear points)")
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r=r, t=q_bar - r @ p_bar)


def transform_error(pred: RigidTransform, gt: RigidTransform) -> tuple[float, float]:
    """(rotation geodesic angle in radians, translation Euclidean distance).

    The angle is atan2(|sin|, cos) with cos from the trace and |sin| from the
    skew part of the relative rotation; arccos of the trace alone loses ~8
    digits near zero angle, this form is accurate at both ends of [0, pi].
    """
    rel = pred.r.T @ gt.r
    cos = (np.trace(rel) - 1.0) / 2.0
    skew = np.array([rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]])
    sin = np.linalg.norm(skew) / 2.0
    rot_err = float(np.arctan2(sin, np.clip(cos, -1.0, 1.0)))
    return rot_err, float(np.linalg.norm(pred.t - gt.t))


def interpolate_flow(u: np.ndarray, anchors: np.ndarray, flows: np.ndarray, k: int = 3) -> np.ndarray:
    """Inverse-distance weighted mean of the k nearest anchor flows at u.

    An anchor within 1e-12 of u returns that anchor's flow exactly; k is
    clipped to the number of anchors.
    """
    u = np.asarray(u, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    flows = np.asarray(flows, dtype=np.float64)
    if u.shape != (3,) or anchors.ndim != 2 or anchors.shape[1] != 3:
        raise DimensionError(f"expected u (3,) and anchors (n, 3), got {u.shape}, {anchors.shape}")
    if flows.shape != anchors.shape:
        raise DimensionError(f"flows {flows.shape} must match anchors {anchors.shape}")
    if len(anchors) == 0:
        raise NumericError("no anchors to interpolate from")
    d = np.linalg.norm(anchors - u, axis=1)
    nearest = int(np.argmin(d))
    if d[nearest] < 1e-12:
        return flows[nearest].copy()
    k = min(k, len(anchors))
    idx = np.argpartition(d, k - 1)[:k]
    w = 1.0 / d[idx]
    return (w @ flows[idx]) / w.sum()


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation via a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
