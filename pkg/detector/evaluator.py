# Run the detector over manifest records and score it

import logging
from typing import Dict, List, Sequence, Tuple

from backend.analysis.metrics import (
    dataset_average_precision,
    match_detections,
    merge_matches,
    prf1,
)
from backend.data.loader import ManifestLoader
from detector.contracts import Detection, FoldMetrics, ImageRecord
from detector.models import EvalConfig, ModelParams, TrainConfig
from detector.objective import DetectorStates
from detector.predictor import predict

logger = logging.getLogger(__name__)

ScoredImage = Tuple[ImageRecord, List[Detection]]


def collect_detections(
    params: ModelParams,
    states: DetectorStates,
    records: Sequence[ImageRecord],
    loader: ManifestLoader,
    train_config: TrainConfig,
    eval_config: EvalConfig,
) -> List[ScoredImage]:
    """Detections above the AP floor for every record, in record order"""
    scored = []
    for record in records:
        detections = predict(
            loader.load_image(record),
            params,
            states.context,
            train_config,
            threshold=eval_config.ap_floor,
            nms_radius=eval_config.nms_radius,
        )
        scored.append((record, detections))
    return scored


def _ap(scored: Sequence[ScoredImage], tol: float, eval_config: EvalConfig) -> float:
    items = [(dets, rec.annotations) for rec, dets in scored]
    return dataset_average_precision(items, tol, eval_config.match_mode, eval_config.iou_threshold)


def fold_metrics(
    scored: Sequence[ScoredImage], train_config: TrainConfig, eval_config: EvalConfig, fold: int = 0
) -> FoldMetrics:
    """
    mAP over all detections, P/R/F1 at the score threshold, AP per tier.

    Tiers without ground truth are left out of tier_ap.
    """
    tol = eval_config.tolerance(train_config.object_radius)
    matches = []
    for record, detections in scored:
        kept = [d for d in detections if d.confidence >= eval_config.score_threshold]
        matches.append(
            match_detections(kept, record.annotations, tol, eval_config.match_mode, eval_config.iou_threshold)
        )
    precision, recall, f1 = prf1(merge_matches(matches))

    tier_ap: Dict[str, float] = {}
    for tier in sorted({record.tier for record, _ in scored}):
        subset = [(r, d) for r, d in scored if r.tier == tier]
        if sum(len(r.annotations) for r, _ in subset):
            tier_ap[tier] = _ap(subset, tol, eval_config)

    return FoldMetrics(
        fold=fold,
        map=_ap(scored, tol, eval_config),
        precision=precision,
        recall=recall,
        f1=f1,
        tier_ap=tier_ap,
    )


def evaluate_model(
    params: ModelParams,
    states: DetectorStates,
    records: Sequence[ImageRecord],
    loader: ManifestLoader,
    train_config: TrainConfig,
    eval_config: EvalConfig,
    fold: int = 0,
) -> FoldMetrics:
    """
    Score a trained model on held-out records.

    Raises:
        ArgumentError: when the records hold no ground truth (mAP undefined)
    """
    scored = collect_detections(params, states, records, loader, train_config, eval_config)
    metrics = fold_metrics(scored, train_config, eval_config, fold)
    logger.info(
        f"fold {fold}: mAP={metrics.map:.4f} P={metrics.precision:.4f} "
        f"R={metrics.recall:.4f} F1={metrics.f1:.4f}"
    )
    return metrics
