"""Ranking metrics for image- and pixel-level anomaly scores.

All inputs are plain numpy arrays; nothing here touches the autodiff
graph. AUROC uses midrank tie handling, average precision uses the
grouped-tie step interpolation, and the region-overlap curve sweeps
strict ``>`` thresholds so equal scores move together.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage, stats

from ..errors import MetricError
from .dataset import EvalRecord

FPR_LIMIT = 0.3
MAX_THRESHOLDS = 500
TOP_PIXEL_FRACTION = 0.01

_EIGHT = np.ones((3, 3), dtype=bool)


def _check_binary_labels(labels: np.ndarray) -> None:
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")


def auroc(labels, scores) -> float:
    """Probability a random positive outranks a random negative.

    Ties count one half, which makes the result exactly the
    normalized midrank sum of the positives.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise MetricError("labels and scores must be matching vectors")
    _check_binary_labels(labels)
    if not np.isfinite(scores).all():
        raise MetricError("scores must be finite")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auroc needs both classes present")
    ranks = stats.rankdata(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(labels, scores) -> float:
    """Area under the precision-recall step curve.

    Tied scores form one group: precision is evaluated only after the
    whole group is admitted, so reordering inside a tie cannot change
    the result.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise MetricError("labels and scores must be matching vectors")
    _check_binary_labels(labels)
    if not np.isfinite(scores).all():
        raise MetricError("scores must be finite")
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise MetricError("average precision needs a positive sample")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    cum_tp = np.cumsum(sorted_labels == 1)
    cum_n = np.arange(1, labels.size + 1)
    # last index of each tied group
    is_boundary = np.ones(labels.size, dtype=bool)
    is_boundary[:-1] = np.diff(sorted_scores) != 0.0
    tp = cum_tp[is_boundary].astype(np.float64)
    total = cum_n[is_boundary].astype(np.float64)
    recall = tp / n_pos
    precision = tp / total
    prev_recall = np.concatenate(([0.0], recall[:-1]))
    return float(((recall - prev_recall) * precision).sum())


def image_score(score_map: np.ndarray) -> float:
    """Image-level score: mean of the hottest one percent of pixels."""
    flat = np.asarray(score_map, dtype=np.float64).ravel()
    if flat.size == 0:
        raise MetricError("empty score map")
    if not np.isfinite(flat).all():
        raise MetricError("score map must be finite")
    k = max(1, int(round(TOP_PIXEL_FRACTION * flat.size)))
    top = np.partition(flat, flat.size - k)[flat.size - k:]
    return float(top.mean())


def _regions(mask: np.ndarray) -> List[np.ndarray]:
    """Connected defect regions (8-connectivity) as boolean maps."""
    labeled, count = ndimage.label(mask > 0.5, structure=_EIGHT)
    return [labeled == i for i in range(1, count + 1)]


def _sweep_thresholds(maps: Sequence[np.ndarray]) -> np.ndarray:
    scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel()
                             for m in maps])
    uniq = np.unique(scores)
    if uniq.size > MAX_THRESHOLDS:
        qs = np.linspace(0.0, 1.0, MAX_THRESHOLDS)
        uniq = np.unique(np.quantile(scores, qs))
    return uniq[::-1]          # descending: prediction grows monotonically


def pro_curve(records: Sequence[EvalRecord]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-region overlap versus false positive rate.

    Returns (fpr, pro) with fpr ascending, starting from the empty
    prediction at (0, 0). The threshold test is strict ``>`` so tied
    pixels enter or leave the prediction together.
    """
    if not records:
        raise MetricError("no records to sweep")
    masks = [rec.mask > 0.5 for rec in records]
    maps = [np.asarray(rec.score_map, dtype=np.float64)
            for rec in records]
    regions = []
    for idx, mask in enumerate(masks):
        for region in _regions(mask):
            regions.append((idx, region, float(region.sum())))
    if not regions:
        raise MetricError("no defect regions in the evaluation set")
    neg_total = float(sum((~m).sum() for m in masks))
    if neg_total == 0:
        raise MetricError("no normal pixels to measure false positives")

    fprs = [0.0]
    pros = [0.0]
    for t in _sweep_thresholds(maps):
        preds = [m > t for m in maps]
        fp = sum(float((p & ~m).sum()) for p, m in zip(preds, masks))
        overlap = [float((preds[i] & region).sum()) / area
                   for i, region, area in regions]
        fprs.append(fp / neg_total)
        pros.append(float(np.mean(overlap)))
    return np.asarray(fprs), np.asarray(pros)


def aupro(records: Sequence[EvalRecord],
          fpr_limit: float = FPR_LIMIT) -> float:
    """Area under the region-overlap curve up to an FPR cap.

    The trapezoid sum stops at the cap, interpolating the crossing
    segment; a curve that never reaches the cap is extended flat.
    The area is normalized by the cap so a perfect detector scores 1.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise MetricError(f"fpr limit must be in (0, 1], got {fpr_limit}")
    fpr, pro = pro_curve(records)
    area = 0.0
    for i in range(len(fpr) - 1):
        x0, x1 = fpr[i], fpr[i + 1]
        y0, y1 = pro[i], pro[i + 1]
        if x1 <= fpr_limit:
            area += 0.5 * (y0 + y1) * (x1 - x0)
            continue
        if x0 < fpr_limit:
            # interpolate the crossing, then stop
            frac = (fpr_limit - x0) / (x1 - x0)
            y_cross = y0 + frac * (y1 - y0)
            area += 0.5 * (y0 + y_cross) * (fpr_limit - x0)
        break
    else:
        if fpr[-1] < fpr_limit:
            area += pro[-1] * (fpr_limit - fpr[-1])
    return float(area / fpr_limit)
