"""Correspondence and registration quality metrics.

Conventions: a predicted correspondence is an inlier when the ground-truth
warp carries its source point to within sigma of its target point. A pair
counts toward feature matching recall when its inlier ratio exceeds 0.05, and
toward registration recall when the RMSE between predicted and true warps
over the ground-truth-correspondence source points is below 0.2 m. NFMR
recovers a ground-truth pair (u, v) when u plus the flow interpolated from
the predicted correspondences lands within sigma of v. Relative flow errors
divide by max(||gt||, 1e-12).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import geometry
from .errors import DimensionError
from .geometry import RigidTransform

FMR_IR_THRESHOLD = 0.05
RR_RMSE_THRESHOLD = 0.2
ACC_STRICT = 0.025
ACC_RELAX = 0.05
OUTLIER = 0.3

_PAIR_FIELDS = ("ir", "fmr_hit", "rr_hit", "nfmr", "epe", "acc_s", "acc_r", "outlier")


def inlier_ratio(
    pred_src: np.ndarray,
    pred_tgt: np.ndarray,
    w_gt: Callable[[np.ndarray], np.ndarray],
    sigma: float,
) -> float:
    """Fraction of predicted correspondences with ||w_gt(p) - q|| < sigma;
    an empty prediction scores 0."""
    pred_src = np.asarray(pred_src, dtype=np.float64).reshape(-1, 3)
    pred_tgt = np.asarray(pred_tgt, dtype=np.float64).reshape(-1, 3)
    if pred_src.shape != pred_tgt.shape:
        raise DimensionError(f"src {pred_src.shape} vs tgt {pred_tgt.shape}")
    if len(pred_src) == 0:
        return 0.0
    d = np.linalg.norm(w_gt(pred_src) - pred_tgt, axis=1)
    return float(np.mean(d < sigma))


def feature_matching_recall(irs: list[float], threshold: float = FMR_IR_THRESHOLD) -> float:
    """Fraction of pairs whose inlier ratio exceeds the threshold."""
    if not irs:
        return 0.0
    return float(np.mean([ir > threshold for ir in irs]))


def registration_rmse(pred: RigidTransform, gt: RigidTransform, src_points: np.ndarray) -> float:
    """RMSE between predicted and true warps over the given source points."""
    src_points = np.asarray(src_points, dtype=np.float64).reshape(-1, 3)
    if len(src_points) == 0:
        return float("inf")
    diff = geometry.rigid_warp(src_points, pred) - geometry.rigid_warp(src_points, gt)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def nfmr(
    gt_src: np.ndarray,
    gt_tgt: np.ndarray,
    anchor_src: np.ndarray,
    anchor_flow: np.ndarray,
    sigma: float,
    k: int = 3,
) -> float:
    """Fraction of ground-truth pairs recovered by flow interpolated from the
    predicted correspondences; empty anchors or empty ground truth score 0."""
    gt_src = np.asarray(gt_src, dtype=np.float64).reshape(-1, 3)
    gt_tgt = np.asarray(gt_tgt, dtype=np.float64).reshape(-1, 3)
    anchor_src = np.asarray(anchor_src, dtype=np.float64).reshape(-1, 3)
    anchor_flow = np.asarray(anchor_flow, dtype=np.float64).reshape(-1, 3)
    if len(gt_src) == 0 or len(anchor_src) == 0:
        return 0.0
    hits = 0
    for u, v in zip(gt_src, gt_tgt):
        flow = geometry.interpolate_flow(u, anchor_src, anchor_flow, k=k)
        if np.linalg.norm(u + flow - v) < sigma:
            hits += 1
    return hits / len(gt_src)


def flow_metrics(pred_flow: np.ndarray, gt_flow: np.ndarray) -> dict[str, float]:
    """End-point error and the strict/relaxed accuracy and outlier rates."""
    pred_flow = np.asarray(pred_flow, dtype=np.float64).reshape(-1, 3)
    gt_flow = np.asarray(gt_flow, dtype=np.float64).reshape(-1, 3)
    if pred_flow.shape != gt_flow.shape:
        raise DimensionError(f"pred {pred_flow.shape} vs gt {gt_flow.shape}")
    err = np.linalg.norm(pred_flow - gt_flow, axis=1)
    mag = np.maximum(np.linalg.norm(gt_flow, axis=1), 1e-12)
    rel = err / mag
    return {
        "epe": float(err.mean()),
        "acc_s": float(np.mean((err < ACC_STRICT) | (rel < 0.025))),
        "acc_r": float(np.mean((err < ACC_RELAX) | (rel < 0.05))),
        "outlier": float(np.mean((err > OUTLIER) | (rel > 0.10))),
    }


@dataclass(frozen=True)
class EvalReport:
    """Per-pair metric rows plus their aggregate means.

    Aggregate values are plain means over pairs where the metric applies
    (None entries are skipped); fmr and rr aggregate hit fractions.
    """

    per_pair: list[dict]
    aggregate: dict[str, float]

    def to_json(self) -> str:
        return json.dumps(
            {"per_pair": self.per_pair, "aggregate": self.aggregate},
            indent=2,
            sort_keys=True,
        ) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("pair",) + _PAIR_FIELDS)
        for idx, row in enumerate(self.per_pair):
            writer.writerow([idx] + ["" if row[f] is None else repr(row[f]) for f in _PAIR_FIELDS])
        writer.writerow([])
        for key in sorted(self.aggregate):
            writer.writerow([key, repr(self.aggregate[key])])
        return buf.getvalue()


def aggregate_report(per_pair: list[dict]) -> EvalReport:
    """Mean per-pair metrics into one aggregate row."""
    aggregate: dict[str, float] = {}
    for field in _PAIR_FIELDS:
        vals = [row[field] for row in per_pair if row.get(field) is not None]
        if not vals:
            continue
        name = {"fmr_hit": "fmr", "rr_hit": "rr", "ir": "mean_ir", "nfmr": "mean_nfmr"}.get(field, field)
        aggregate[name] = float(np.mean([float(v) for v in vals]))
    return EvalReport(per_pair=per_pair, aggregate=aggregate)


def evaluate_pair(
    pair,
    matches: list[tuple[int, int, float]],
    transform: RigidTransform | None,
) -> dict:
    """All applicable metrics for one scene pair given predicted matches
    (indices into the pair's clouds) and an optional predicted transform."""
    src = pair.src.coords
    tgt = pair.tgt.coords
    pred_src = src[[m[0] for m in matches]] if matches else np.zeros((0, 3))
    pred_tgt = tgt[[m[1] for m in matches]] if matches else np.zeros((0, 3))
    row: dict = {f: None for f in _PAIR_FIELDS}
    row["ir"] = inlier_ratio(pred_src, pred_tgt, pair.warp_src, pair.sigma)
    row["fmr_hit"] = bool(row["ir"] > FMR_IR_THRESHOLD)
    if pair.gt_transform is not None and transform is not None and len(pair.gt_pairs):
        rmse = registration_rmse(transform, pair.gt_transform, src[pair.gt_pairs[:, 0]])
        row["rr_hit"] = bool(rmse < RR_RMSE_THRESHOLD)
    if len(pair.gt_pairs):
        row["nfmr"] = nfmr(
            src[pair.gt_pairs[:, 0]],
            tgt[pair.gt_pairs[:, 1]],
            pred_src,
            pred_tgt - pred_src,
            sigma=pair.sigma,
        )
    if len(pred_src) >= 1:
        gt_flow = pair.warp_src(src) - src
        pred_flow = np.stack(
            [geometry.interpolate_flow(u, pred_src, pred_tgt - pred_src) for u in src]
        )
        row.update(flow_metrics(pred_flow, gt_flow))
    return row
