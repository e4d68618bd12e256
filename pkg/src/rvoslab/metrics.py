"""Video segmentation evaluation: J, F, J&F, mAP, oIoU, mIoU, temporal variance.

Masks are binary uint8/bool arrays; a MaskSequence is a (T, H, W) stack.
Conventions (declared here, asserted in tests): IoU of two empty masks is
1; the boundary F of two boundary-less masks is 1; boundary tolerance is
0.008 of the image diagonal, rounded half-up.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt


class LengthMismatch(ValueError):
    """Aligned lists have different lengths."""


class SequenceTooShort(ValueError):
    """Mask sequence shorter than the requested analysis window."""


MAP_THRESHOLDS = np.arange(0.50, 0.951, 0.05)

BOUNDARY_TOLERANCE_FRACTION = 0.008


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        from .tensor import ShapeMismatch

        raise ShapeMismatch(f"mask extents differ: {a.shape} vs {b.shape}")


def iou(a, b) -> float:
    """|a & b| / |a | b|; 1.0 when both masks are empty."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    _check_pair(a, b)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum()) / float(union)


def j_score(pred, gt) -> float:
    """Mean per-frame IoU over a sequence pair."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape[0] != gt.shape[0]:
        raise LengthMismatch(f"sequence lengths differ: {pred.shape[0]} vs {gt.shape[0]}")
    return float(np.mean([iou(p, g) for p, g in zip(pred, gt)]))


def boundary_map(mask) -> np.ndarray:
    """Mask pixels with a background 4-neighbor or lying on the image edge."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def boundary_tolerance(shape: tuple[int, int]) -> int:
    h, w = shape
    return int(np.floor(BOUNDARY_TOLERANCE_FRACTION * np.hypot(h, w) + 0.5))


def f_boundary(pred, gt, radius: int | None = None) -> float:
    """Boundary F-measure with a dilation-style distance tolerance.

    Precision is the fraction of predicted boundary pixels within `radius`
    (Euclidean) of the ground-truth boundary; recall symmetric;
    F = 2PR/(P+R), with F = 0 when P + R = 0 and F = 1 when both
    boundaries are empty.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    _check_pair(pred, gt)
    if radius is None:
        radius = boundary_tolerance(pred.shape)
    pb = boundary_map(pred)
    gb = boundary_map(gt)
    np_b, ng_b = int(pb.sum()), int(gb.sum())
    if np_b == 0 and ng_b == 0:
        return 1.0
    precision = 0.0
    recall = 0.0
    if np_b > 0 and ng_b > 0:
        dist_to_gt = distance_transform_edt(~gb)
        dist_to_pred = distance_transform_edt(~pb)
        precision = float((dist_to_gt[pb] <= radius).mean())
        recall = float((dist_to_pred[gb] <= radius).mean())
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def f_score(pred, gt) -> float:
    """Mean per-frame boundary F over a sequence pair."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape[0] != gt.shape[0]:
        raise LengthMismatch(f"sequence lengths differ: {pred.shape[0]} vs {gt.shape[0]}")
    return float(np.mean([f_boundary(p, g) for p, g in zip(pred, gt)]))


def _sequence_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Pooled IoU of a sequence pair: summed intersections over summed unions."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum()) / float(union)


def map_over_thresholds(predictions, gts) -> float:
    """Mean AP over IoU thresholds 0.50:0.05:0.95.

    `predictions` is a list of (MaskSequence, confidence) aligned with
    `gts`; each prediction scores against its own ground truth by pooled
    sequence IoU. AP uses all-point interpolation over the
    confidence-ranked list (ties broken by index).
    """
    if len(predictions) != len(gts):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(gts)} ground truths")
    n = len(gts)
    ious = np.array([_sequence_iou(p, g) for (p, _), g in zip(predictions, gts)])
    confs = np.array([c for _, c in predictions], dtype=np.float64)
    order = np.argsort(-confs, kind="stable")
    aps = []
    for thr in MAP_THRESHOLDS:
        hits = ious[order] >= thr
        tp = np.cumsum(hits)
        recall = tp / n
        precision = tp / np.arange(1, n + 1)
        # all-point AP: integrate the precision envelope over recall
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        prev_r = 0.0
        ap = 0.0
        for r, p in zip(recall, envelope):
            ap += (r - prev_r) * p
            prev_r = r
        aps.append(ap)
    return float(np.mean(aps))


def oiou_miou(predictions, gts) -> tuple[float, float]:
    """Pooled overall IoU across every frame of every sample, and the mean
    of per-sample pooled IoUs."""
    if len(predictions) != len(gts):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(gts)} ground truths")
    inter_total = 0
    union_total = 0
    per_sample = []
    for pred, gt in zip(predictions, gts):
        p = np.asarray(pred).astype(bool)
        g = np.asarray(gt).astype(bool)
        inter_total += int(np.logical_and(p, g).sum())
        union_total += int(np.logical_or(p, g).sum())
        per_sample.append(_sequence_iou(p, g))
    oiou = 1.0 if union_total == 0 else inter_total / union_total
    return float(oiou), float(np.mean(per_sample))


def frame_jf(pred_frame, gt_frame) -> float:
    return 0.5 * (iou(pred_frame, gt_frame) + f_boundary(pred_frame, gt_frame))


def temporal_variance(pred, gt, k_max: int = 10) -> list[tuple[int, float]]:
    """Population variance of per-frame J&F over the first k frames, k = 2..k_max."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape[0] < k_max or gt.shape[0] < k_max:
        raise SequenceTooShort(f"need at least {k_max} frames, got {pred.shape[0]}")
    scores = np.array([frame_jf(p, g) for p, g in zip(pred[:k_max], gt[:k_max])])
    return [(k, float(np.var(scores[:k]))) for k in range(2, k_max + 1)]


# -- corpus-level report ---------------------------------------------------------


@dataclass
class VideoScore:
    video_id: str
    j: float
    f: float

    @property
    def jf(self) -> float:
        return 0.5 * (self.j + self.f)


@dataclass
class MetricReport:
    """Aggregate evaluation of a prediction set against a corpus."""

    videos: list[VideoScore]
    j: float
    f: float
    jf: float
    map_score: float
    oiou: float
    miou: float
    temporal_variance: list[tuple[int, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "J": self.j,
            "F": self.f,
            "JF": self.jf,
            "mAP": self.map_score,
            "oIoU": self.oiou,
            "mIoU": self.miou,
            "temporal_variance": [{"k": k, "variance": v} for k, v in self.temporal_variance],
            "videos": [
                {"video_id": v.video_id, "J": v.j, "F": v.f, "JF": v.jf} for v in self.videos
            ],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["video_id", "J", "F", "JF"])
            for v in self.videos:
                writer.writerow([v.video_id, repr(v.j), repr(v.f), repr(v.jf)])
            writer.writerow(["aggregate", repr(self.j), repr(self.f), repr(self.jf)])


def evaluate_sequences(pred_seqs, confidences, gt_seqs, video_ids=None,
                       k_max: int | None = None) -> MetricReport:
    """Score aligned prediction/ground-truth mask sequences into one report.

    Temporal variance is included (averaged per k across videos) only when
    every sequence has at least `k_max` frames; pass k_max=None to skip.
    """
    if not (len(pred_seqs) == len(gt_seqs) == len(confidences)):
        raise LengthMismatch("prediction, confidence, and gt lists must align")
    if video_ids is None:
        video_ids = [f"video_{i:04d}" for i in range(len(gt_seqs))]
    videos = [
        VideoScore(vid, j_score(p, g), f_score(p, g))
        for vid, p, g in zip(video_ids, pred_seqs, gt_seqs)
    ]
    j = float(np.mean([v.j for v in videos]))
    f = float(np.mean([v.f for v in videos]))
    preds = list(zip(pred_seqs, confidences))
    map_score = map_over_thresholds(preds, gt_seqs)
    oiou, miou = oiou_miou(pred_seqs, gt_seqs)
    tv: list[tuple[int, float]] = []
    if k_max is not None:
        per_video = [temporal_variance(p, g, k_max) for p, g in zip(pred_seqs, gt_seqs)]
        for i, k in enumerate(range(2, k_max + 1)):
            tv.append((k, float(np.mean([pv[i][1] for pv in per_video]))))
    return MetricReport(videos, j, f, 0.5 * (j + f), map_score, oiou, miou, tv)
