# Detection metrics: greedy matching, all-point interpolated AP, precision/recall/F1

import logging
from typing import List, Literal, Sequence, Tuple

import numpy as np

from backend.errors import ArgumentError
from detector.contracts import Annotation, Detection, MatchResult

logger = logging.getLogger(__name__)

MatchMode = Literal["center", "iou"]
ImageItem = Tuple[Sequence[Detection], Sequence[Annotation]]


def box_iou(a, b) -> float:
    """IoU of two BBoxes"""
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def confidence_order(preds: Sequence[Detection]) -> np.ndarray:
    """Indices by descending confidence; ties keep input order"""
    confidences = np.array([p.confidence for p in preds], dtype=np.float64)
    return np.argsort(-confidences, kind="stable")


def match_detections(
    preds: Sequence[Detection],
    gts: Sequence[Annotation],
    tol: float,
    mode: MatchMode = "center",
    iou_threshold: float = 0.5,
) -> MatchResult:
    """
    Greedy one-to-one matching in descending confidence.

    In center mode each prediction takes the nearest unmatched ground truth
    within tol pixels (inclusive); in iou mode the unmatched ground truth with
    the highest IoU of at least iou_threshold.

    Returns:
        MatchResult: counts and (pred index, gt index, center distance) pairs
    """
    if tol <= 0:
        raise ArgumentError(f"Match tolerance must be positive, got {tol}")

    gt_centers = np.array([g.center for g in gts], dtype=np.float64).reshape(-1, 2)
    matched = np.zeros(len(gts), dtype=bool)
    pairs: List[Tuple[int, int, float]] = []

    for pred_index in confidence_order(preds):
        if matched.all():
            break
        pred = preds[pred_index]
        distances = np.linalg.norm(gt_centers - np.asarray(pred.center), axis=1)
        if mode == "center":
            scores = np.where(~matched & (distances <= tol), -distances, -np.inf)
        else:
            ious = np.array([box_iou(pred.box, g.box) for g in gts])
            scores = np.where(~matched & (ious >= iou_threshold), ious, -np.inf)
        best = int(np.argmax(scores))
        if np.isfinite(scores[best]):
            matched[best] = True
            pairs.append((int(pred_index), best, float(distances[best])))

    tp = len(pairs)
    return MatchResult(
        true_positives=tp,
        false_positives=len(preds) - tp,
        false_negatives=len(gts) - tp,
        pairs=pairs,
    )


def ranked_hits(
    items: Sequence[ImageItem], tol: float, mode: MatchMode = "center", iou_threshold: float = 0.5
) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Confidence-ranked TP flags pooled over images.

    Matching happens per image; ranking is global.

    Returns:
        Tuple[np.ndarray, np.ndarray, int]: confidences and TP flags in rank
        order, and the total ground-truth count
    """
    confidences, hits = [], []
    n_gt = 0
    for preds, gts in items:
        result = match_detections(preds, gts, tol, mode, iou_threshold)
        flags = np.zeros(len(preds))
        for pred_index, _, _ in result.pairs:
            flags[pred_index] = 1.0
        confidences.extend(p.confidence for p in preds)
        hits.append(flags)
        n_gt += len(gts)

    confidences = np.asarray(confidences, dtype=np.float64)
    flags = np.concatenate(hits) if hits else np.zeros(0)
    order = np.argsort(-confidences, kind="stable")
    return confidences[order], flags[order], n_gt


def precision_recall_curve(
    items: Sequence[ImageItem], tol: float, mode: MatchMode = "center", iou_threshold: float = 0.5
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision, recall and confidence at every rank"""
    confidences, flags, n_gt = ranked_hits(items, tol, mode, iou_threshold)
    if n_gt == 0:
        raise ArgumentError("Precision/recall is undefined without ground truth")
    tp = np.cumsum(flags)
    ranks = np.arange(1, len(flags) + 1)
    return tp / ranks, tp / n_gt, confidences


def interpolated_ap(flags: np.ndarray, n_gt: int) -> float:
    """
    Area under the monotone precision envelope (all-point interpolation).

    Recall rises by 1 / n_gt at every true positive, so the area is the mean
    of the envelope taken at the TP ranks over all ground truths.
    """
    if len(flags) == 0:
        return 0.0
    precision = np.cumsum(flags) / np.arange(1, len(flags) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[flags > 0].sum() / n_gt)


def dataset_average_precision(
    items: Sequence[ImageItem], tol: float, mode: MatchMode = "center", iou_threshold: float = 0.5
) -> float:
    """AP over several images; single-class, so this is also the mAP"""
    _, flags, n_gt = ranked_hits(items, tol, mode, iou_threshold)
    if n_gt == 0:
        raise ArgumentError("Average precision is undefined without ground truth")
    return interpolated_ap(flags, n_gt)


def average_precision(
    preds: Sequence[Detection],
    gts: Sequence[Annotation],
    tol: float,
    mode: MatchMode = "center",
    iou_threshold: float = 0.5,
) -> float:
    """
    All-point interpolated AP of one image.

    Raises:
        ArgumentError: when there is no ground truth (AP undefined)
    """
    return dataset_average_precision([(preds, gts)], tol, mode, iou_threshold)


def prf1(match: MatchResult) -> Tuple[float, float, float]:
    """Precision, recall and F1; zero wherever a denominator vanishes"""
    tp, fp, fn = match.true_positives, match.false_positives, match.false_negatives
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def merge_matches(results: Sequence[MatchResult]) -> MatchResult:
    """Sum counts over images"""
    return MatchResult(
        true_positives=sum(r.true_positives for r in results),
        false_positives=sum(r.false_positives for r in results),
        false_negatives=sum(r.false_negatives for r in results),
    )
