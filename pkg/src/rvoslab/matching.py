"""Hungarian query-to-target assignment and the four-part training loss.

Matching costs are computed on detached numpy values (assignment is not a
differentiable decision); the losses themselves are built from autodiff
tensor ops so gradients reach masks, boxes, and presence logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .tensor import Tensor

DICE_EPS = 1.0


class EmptyMatrix(ValueError):
    """Cost matrix has no rows or no columns."""


class DegenerateBox(ValueError):
    """Box pair whose convex hull has zero area."""


@dataclass
class LossWeights:
    """Scale factors for the loss terms; all nonnegative, at least one positive."""

    dice: float = 5.0
    focal_mask: float = 2.0
    focal_cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0

    def __post_init__(self):
        vals = (self.dice, self.focal_mask, self.focal_cls, self.l1, self.giou)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be nonnegative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class PredictionSet:
    """Per-frame head outputs: mask logits (Q,h,w,d2), boxes (Q,4) cxcywh in
    [0,1], presence logits (Q,)."""

    mask_logits: Tensor
    boxes: Tensor
    presence_logits: Tensor


@dataclass
class TargetSet:
    """Per-frame ground truth: binary mask (H,W), box (4,) cxcywh, presence flag."""

    gt_mask: np.ndarray
    gt_box: np.ndarray
    present: bool


# -- assignment ----------------------------------------------------------------


def _row_ordered_cost(cost: np.ndarray, pairs: list[tuple[int, int]]) -> float:
    total = 0.0
    for r, c in sorted(pairs):
        total += cost[r, c]
    return total


def _lap_pairs(cost: np.ndarray) -> list[tuple[int, int]]:
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment of rows to columns.

    Returns min(n, m) pairs sorted by row. Among cost-equal optima the
    lexicographically smallest pair list is returned: a greedy pass walks
    rows in order, keeping the smallest column (or row skip, when rows
    outnumber columns) that still completes to the optimal total. Equality
    is checked on from-scratch row-ordered sums, so exact ties (e.g.
    integer costs) break deterministically; if rounding noise ever makes
    every candidate miss the optimum bit-for-bit, the plain solver answer
    is used.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] == 0 or cost.shape[1] == 0:
        raise EmptyMatrix(f"cost matrix must be non-empty 2-D, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix entries must be finite")
    n, m = cost.shape
    k = min(n, m)
    base = _lap_pairs(cost)
    best_total = _row_ordered_cost(cost, base)

    chosen: list[tuple[int, int]] = []
    free_cols = list(range(m))
    for r in range(n):
        if len(chosen) == k:
            break
        rows_left_after = n - r - 1
        found = None
        for c in free_cols:
            candidate = chosen + [(r, c)]
            need = k - len(candidate)
            if need:
                sub_rows = list(range(r + 1, n))
                sub_cols = [cc for cc in free_cols if cc != c]
                sub = cost[np.ix_(sub_rows, sub_cols)]
                completion = [
                    (sub_rows[i], sub_cols[j]) for i, j in _lap_pairs(sub)
                ]
                candidate = candidate + completion
            if _row_ordered_cost(cost, candidate) == best_total:
                found = c
                break
        if found is not None:
            chosen.append((r, found))
            free_cols.remove(found)
            continue
        # Row must be skippable (only possible when rows outnumber columns).
        if rows_left_after < k - len(chosen):
            return base
    if len(chosen) == k and _row_ordered_cost(cost, chosen) == best_total:
        return chosen
    return base


# -- loss kernels ---------------------------------------------------------------


def dice_loss(pred_prob: Tensor, gt: np.ndarray) -> Tensor:
    """1 - (2*overlap + eps) / (sum(pred) + sum(gt) + eps), eps = 1."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred_prob.shape != gt.shape:
        raise T.ShapeMismatch(f"dice shapes differ: {pred_prob.shape} vs {gt.shape}")
    inter = T.tensor_sum(T.mul(pred_prob, gt))
    denom = T.add(T.tensor_sum(pred_prob), float(gt.sum()))
    return T.sub(1.0, T.div(T.add(T.mul(inter, 2.0), DICE_EPS), T.add(denom, DICE_EPS)))


def focal_loss(logits: Tensor, gt: np.ndarray, alpha: float = 0.25,
               gamma: float = 2.0) -> Tensor:
    """Mean focal binary cross-entropy on logits.

    Per element: alpha*t*(1-p)^gamma*(-log p) + (1-alpha)*(1-t)*p^gamma*(-log(1-p)),
    with the log terms computed as softplus so saturated logits stay finite.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if logits.shape != gt.shape:
        raise T.ShapeMismatch(f"focal shapes differ: {logits.shape} vs {gt.shape}")
    p = T.sigmoid(logits)
    pos = T.mul(T.power(T.sub(1.0, p), gamma), T.softplus(T.mul(logits, -1.0)))
    neg = T.mul(T.power(p, gamma), T.softplus(logits))
    per_elem = T.add(T.mul(pos, alpha * gt), T.mul(neg, (1.0 - alpha) * (1.0 - gt)))
    return T.mean(per_elem)


def _cxcywh_to_xyxy(box: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    cx, cy = T.select(box, 0, 0), T.select(box, 0, 1)
    w, h = T.select(box, 0, 2), T.select(box, 0, 3)
    hw, hh = T.mul(w, 0.5), T.mul(h, 0.5)
    return T.sub(cx, hw), T.sub(cy, hh), T.add(cx, hw), T.add(cy, hh)


def giou_loss(pred_box: Tensor, gt_box) -> Tensor:
    """1 - GIoU for a cxcywh box pair; raises DegenerateBox on a zero-area hull."""
    gt_box = as_box_tensor(gt_box)
    px0, py0, px1, py1 = _cxcywh_to_xyxy(pred_box)
    gx0, gy0, gx1, gy1 = _cxcywh_to_xyxy(gt_box)

    iw = T.maximum(T.sub(T.minimum(px1, gx1), T.maximum(px0, gx0)), 0.0)
    ih = T.maximum(T.sub(T.minimum(py1, gy1), T.maximum(py0, gy0)), 0.0)
    inter = T.mul(iw, ih)
    area_p = T.mul(T.sub(px1, px0), T.sub(py1, py0))
    area_g = T.mul(T.sub(gx1, gx0), T.sub(gy1, gy0))
    union = T.sub(T.add(area_p, area_g), inter)

    hw = T.sub(T.maximum(px1, gx1), T.minimum(px0, gx0))
    hh = T.sub(T.maximum(py1, gy1), T.minimum(py0, gy0))
    hull = T.mul(hw, hh)
    if hull.item() <= 0.0:
        raise DegenerateBox("enclosing hull has zero area")
    iou = T.div(inter, union)
    giou = T.sub(iou, T.div(T.sub(hull, union), hull))
    return T.sub(1.0, giou)


def as_box_tensor(box) -> Tensor:
    return box if isinstance(box, Tensor) else Tensor(np.asarray(box, dtype=np.float64))


def l1_box_loss(pred_box: Tensor, gt_box) -> Tensor:
    gt_box = np.asarray(gt_box, dtype=np.float64)
    return T.tensor_sum(T.absolute(T.sub(pred_box, gt_box)))


# -- match costs and the combined loss -------------------------------------------


def nearest_downsample(mask: np.ndarray, k: int) -> np.ndarray:
    """Pick the center sample of each k-by-k block (indices i*k + k//2)."""
    h, w = mask.shape
    if h % k or w % k:
        raise T.ShapeMismatch(f"mask extents {(h, w)} not divisible by {k}")
    off = k // 2
    return mask[off::k, off::k]


def _mask_prob_quarter_res(mask_logits_q: np.ndarray, full_hw: tuple[int, int]) -> np.ndarray:
    """Sigmoid mask probability of one query resampled to (H/4, W/4).

    The d*d channels are pixel-shuffled to the (H*d/8, W*d/8) grid, then
    bilinearly upsampled (d < 2) or average-pooled (d > 2) to quarter
    resolution. numpy-only: matching costs carry no gradients.
    """
    h, w, ch = mask_logits_q.shape
    d = int(round(np.sqrt(ch)))
    shuffled = T.pixel_shuffle(Tensor(mask_logits_q)).data[:, :, 0]
    prob = 1.0 / (1.0 + np.exp(-np.clip(shuffled, -60, 60)))
    th, tw = full_hw[0] // 4, full_hw[1] // 4
    cur_h = prob.shape[0]
    if cur_h == th:
        return prob
    if cur_h < th:
        factor = th // cur_h
        out = T.upsample(Tensor(prob[:, :, None]), factor, "bilinear").data[:, :, 0]
        return out
    factor = cur_h // th
    return T.avg_pool(Tensor(prob[:, :, None]), factor).data[:, :, 0]


def _dice_np(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = float((pred * gt).sum())
    return 1.0 - (2.0 * inter + DICE_EPS) / (float(pred.sum()) + float(gt.sum()) + DICE_EPS)


def _focal_np(logits: np.ndarray, gt: np.ndarray, alpha=0.25, gamma=2.0) -> float:
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(gt, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-np.abs(x)))
    p = np.where(x >= 0, p, 1.0 - p)
    pos = (1.0 - p) ** gamma * np.logaddexp(0.0, -x)
    neg = p**gamma * np.logaddexp(0.0, x)
    return float((alpha * t * pos + (1.0 - alpha) * (1.0 - t) * neg).mean())


def _giou_np(pred: np.ndarray, gt: np.ndarray) -> float:
    def xyxy(b):
        return b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2

    px0, py0, px1, py1 = xyxy(pred)
    gx0, gy0, gx1, gy1 = xyxy(gt)
    iw = max(0.0, min(px1, gx1) - max(px0, gx0))
    ih = max(0.0, min(py1, gy1) - max(py0, gy0))
    inter = iw * ih
    union = (px1 - px0) * (py1 - py0) + (gx1 - gx0) * (gy1 - gy0) - inter
    hull = (max(px1, gx1) - min(px0, gx0)) * (max(py1, gy1) - min(py0, gy0))
    if hull <= 0.0:
        raise DegenerateBox("enclosing hull has zero area")
    giou = inter / union - (hull - union) / hull if union > 0 else -(hull - union) / hull
    return 1.0 - giou


def match_cost(pred: PredictionSet, target: TargetSet, weights: LossWeights) -> np.ndarray:
    """Per-query matching cost against a present target.

    Mask terms are evaluated at quarter ground-truth resolution; box terms
    on the raw coordinates; the presence term against "present". Detached.
    """
    if not target.present:
        raise ValueError("match_cost requires a present target")
    mask_logits = pred.mask_logits.data
    boxes = pred.boxes.data
    presence = pred.presence_logits.data
    q = mask_logits.shape[0]
    gt_q = nearest_downsample(np.asarray(target.gt_mask, dtype=np.float64), 4)
    costs = np.zeros(q)
    for i in range(q):
        prob = _mask_prob_quarter_res(mask_logits[i], target.gt_mask.shape)
        logit_q = np.log(np.clip(prob, 1e-12, 1 - 1e-12) / np.clip(1 - prob, 1e-12, 1))
        c = weights.dice * _dice_np(prob, gt_q)
        c += weights.focal_mask * _focal_np(logit_q, gt_q)
        c += weights.l1 * float(np.abs(boxes[i] - target.gt_box).sum())
        c += weights.giou * _giou_np(boxes[i], np.asarray(target.gt_box, float))
        c += weights.focal_cls * _focal_np(np.array([presence[i]]), np.array([1.0]))
        costs[i] = c
    if not np.isfinite(costs).all():
        raise ValueError("non-finite matching cost")
    return costs


def full_res_mask_from_pred(pred: PredictionSet, query: int,
                            full_hw: tuple[int, int]) -> Tensor:
    """Differentiable full-resolution logits for one query, without a refiner:
    pixel-shuffle then bilinear chain up to (H, W)."""
    m = T.select(pred.mask_logits, 0, query)
    up = T.pixel_shuffle(m)
    target_h = full_hw[0]
    while up.shape[0] < target_h:
        remaining = target_h // up.shape[0]
        factor = 4 if remaining % 4 == 0 else 2
        up = T.upsample(up, factor, "bilinear")
    if up.shape[:2] != full_hw:
        raise T.ShapeMismatch(f"cannot reach {full_hw} from mask shape {up.shape}")
    return T.reshape(up, full_hw)


def total_loss(pred: PredictionSet, target: TargetSet,
               assignment: int | None, weights: LossWeights,
               full_mask_logits: Tensor | None = None) -> tuple[Tensor, dict]:
    """Weighted per-frame loss with a per-term breakdown.

    The matched query (``assignment``) contributes dice + focal on the
    full-resolution mask, L1 + GIoU on its box, and presence-focal against
    "present"; every other query contributes presence-focal against
    "absent". With an absent target, assignment must be None and only the
    presence term remains. ``full_mask_logits`` carries refined full-res
    logits; when omitted the pixel-shuffle/bilinear fallback path is used.
    """
    q = pred.presence_logits.shape[0]
    presence_target = np.zeros(q)
    zero = Tensor(0.0)
    terms: dict[str, Tensor] = {"dice": zero, "focal_mask": zero, "l1": zero, "giou": zero}

    if target.present:
        if assignment is None or not (0 <= assignment < q):
            raise ValueError(f"present target needs a matched query in [0, {q})")
        presence_target[assignment] = 1.0
        gt = np.asarray(target.gt_mask, dtype=np.float64)
        if full_mask_logits is None:
            full_mask_logits = full_res_mask_from_pred(pred, assignment, gt.shape)
        terms["dice"] = dice_loss(T.sigmoid(full_mask_logits), gt)
        terms["focal_mask"] = focal_loss(full_mask_logits, gt)
        box = T.select(pred.boxes, 0, assignment)
        terms["l1"] = l1_box_loss(box, target.gt_box)
        terms["giou"] = giou_loss(box, target.gt_box)
    elif assignment is not None:
        raise ValueError("absent target cannot have an assignment")

    terms["focal_cls"] = focal_loss(pred.presence_logits, presence_target)

    total = Tensor(0.0)
    for name, w in [("dice", weights.dice), ("focal_mask", weights.focal_mask),
                    ("focal_cls", weights.focal_cls), ("l1", weights.l1),
                    ("giou", weights.giou)]:
        total = T.add(total, T.mul(terms[name], w))
    breakdown = {name: t.item() for name, t in terms.items()}
    breakdown["total"] = total.item()
    return total, breakdown
