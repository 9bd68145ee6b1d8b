# Inference: per-cell scores, local-maximum suppression, offset-adjusted centers

import logging
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.special import expit

from backend.analysis.basic_statistics import ImageBuffer
from backend.embedding.context import BBox, ContextState, merge_embeddings
from detector.contracts import Detection
from detector.features import extract_features
from detector.models import ModelParams, TrainConfig

logger = logging.getLogger(__name__)


def scoring_context(context_state: ContextState, config: TrainConfig) -> Optional[ContextState]:
    """
    Context the merged scorer concatenates: the EMA reference, a zero vector until it is seeded.

    None when contextual refinement is off.
    """
    if not config.use_cr:
        return None
    return context_state.seeded_or_zero(config.context_dim)


def cell_logits(
    embeddings: np.ndarray, params: ModelParams, context: Optional[ContextState]
) -> np.ndarray:
    """Objectness logits per cell; with a context the merged embedding is scored"""
    if context is None:
        return embeddings @ params.obj_w + params.obj_b[0]
    return merge_embeddings(embeddings, context) @ params.merged_w + params.merged_b[0]


def score_map(
    image: ImageBuffer,
    params: ModelParams,
    context_state: ContextState,
    config: TrainConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Objectness probabilities (Hf, Wf) and predicted centers (Hf * Wf, 2).

    With contextual refinement on, cells are scored from the merged embedding
    (cell embedding + context reference). Centers stay inside the image.
    """
    fmap, batch = extract_features(image, params, config.patch_size)
    context = scoring_context(context_state, config)
    scores = expit(cell_logits(batch.vectors, params, context)).reshape(fmap.grid_shape)

    offsets = batch.vectors @ params.off_w + params.off_b
    centers = batch.centers + config.patch_size * offsets
    centers[:, 0] = np.clip(centers[:, 0], 0.0, np.nextafter(float(image.width), 0.0))
    centers[:, 1] = np.clip(centers[:, 1], 0.0, np.nextafter(float(image.height), 0.0))
    return scores, centers


def suppress_non_maxima(scores: np.ndarray, threshold: float, radius_cells: int) -> List[int]:
    """
    Flat indices of cells that are the strongest within a (2r+1)^2 window.

    Equal neighbours are resolved in favour of the earlier cell in raster order.
    The result is ordered by descending score.
    """
    window = 2 * radius_cells + 1
    peaks = (scores >= threshold) & (
        scores == maximum_filter(scores, size=window, mode="constant", cval=-np.inf)
    )
    candidates = np.flatnonzero(peaks.ravel())
    order = candidates[np.argsort(-scores.ravel()[candidates], kind="stable")]

    width = scores.shape[1]
    kept: List[int] = []
    for index in order:
        row, col = divmod(int(index), width)
        if any(
            abs(row - k // width) <= radius_cells and abs(col - k % width) <= radius_cells
            for k in kept
        ):
            continue
        kept.append(int(index))
    return kept


def predict(
    image: ImageBuffer,
    params: ModelParams,
    context_state: ContextState,
    config: TrainConfig,
    threshold: float = 0.5,
    nms_radius: float = 6.0,
) -> List[Detection]:
    """
    Detect objects in one image.

    Args:
        image (ImageBuffer): Input raster
        params (ModelParams): Trained or freshly initialised parameters
        context_state (ContextState): Context reference for the merged scorer
        config (TrainConfig): patch size, object radius and component toggles
        threshold (float): Minimum confidence
        nms_radius (float): Suppression radius in pixels

    Returns:
        List[Detection]: detections sorted by descending confidence
    """
    scores, centers = score_map(image, params, context_state, config)
    radius_cells = max(1, int(round(nms_radius / config.patch_size)))
    detections = []
    for index in suppress_non_maxima(scores, threshold, radius_cells):
        cx, cy = centers[index]
        detections.append(
            Detection(
                cx=float(cx),
                cy=float(cy),
                box=BBox.around(float(cx), float(cy), config.object_radius),
                confidence=float(scores.ravel()[index]),
            )
        )
    logger.debug(f"predict: {len(detections)} detections above {threshold}")
    return detections
