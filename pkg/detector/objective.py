"""
Total objective of the desk-scale detector.

One iteration runs: (optional) adaptive augmentation -> features ->
embedding-stabilization EMA updates -> stabilization losses -> context EMA
update -> context loss -> total. State updates happen in advance_states;
total_loss treats every EMA quantity as a constant, so for a prepared batch
and fixed states it is a smooth function of the model parameters.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.special import expit

from backend.analysis.basic_statistics import EmaScalarPair, ImageBuffer
from backend.embedding.context import (
    BBox,
    ContextState,
    FeatureMap,
    context_loss,
    expand_box,
    merge_embeddings,
    roi_pool,
    roi_pool_backward,
    update_context_ref,
)
from backend.embedding.stabilizer import (
    EmbeddingBatch,
    EmbeddingGroup,
    StabilizerState,
    batch_stack_loss,
    cluster_loss,
    group_by_image,
    update_cluster_means,
    update_global_mean,
    update_stacks,
)
from backend.errors import ArgumentError, BoundsError
from detector.contracts import Annotation, LossBreakdown
from detector.features import CellTargets, build_targets, cell_centers, embed_descriptors, patch_descriptors
from detector.models import DESCRIPTOR_SIZE, ModelParams, TrainConfig
from detector.predictor import cell_logits, scoring_context, suppress_non_maxima

logger = logging.getLogger(__name__)


@dataclass
class DetectorStates:
    """All EMA states owned by one training stream"""

    aug: EmaScalarPair
    stabilizer: StabilizerState
    context: ContextState

    @classmethod
    def fresh(cls, config: TrainConfig) -> "DetectorStates":
        unsafe = config.unsafe_ranges
        return cls(
            aug=EmaScalarPair(rho=config.rho, unsafe_ranges=unsafe),
            stabilizer=StabilizerState(rho=config.rho, lam=config.lam, delta=config.delta, unsafe_ranges=unsafe),
            context=ContextState(rho=config.rho, gamma=config.gamma, unsafe_ranges=unsafe),
        )

    def to_dict(self) -> dict:
        return {
            "aug": self.aug.to_dict(),
            "stabilizer": self.stabilizer.to_dict(),
            "context": self.context.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DetectorStates":
        return cls(
            aug=EmaScalarPair.from_dict(payload["aug"]),
            stabilizer=StabilizerState.from_dict(payload["stabilizer"]),
            context=ContextState.from_dict(payload["context"]),
        )


@dataclass
class PreparedImage:
    descriptors: np.ndarray
    grid_shape: Tuple[int, int]
    targets: CellTargets
    es_cells: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    context_boxes: List[BBox] = field(default_factory=list)

    @property
    def n_cells(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    def embed(self, params: ModelParams, stride: int) -> Tuple[FeatureMap, EmbeddingBatch]:
        return embed_descriptors(self.descriptors.reshape(*self.grid_shape, -1), params, stride)


@dataclass
class PreparedBatch:
    """
    Everything total_loss needs that does not depend on the parameters:
    descriptors, targets, candidate cells with their groups and the expanded
    candidate boxes pooled for the context embeddings.
    """

    images: List[PreparedImage]
    stride: int
    roi_grid: int = 2
    es_groups: List[EmbeddingGroup] = field(default_factory=list)

    @property
    def offsets(self) -> np.ndarray:
        return np.cumsum([0] + [img.n_cells for img in self.images])

    def es_rows(self) -> np.ndarray:
        """Global row indices (into the concatenated cells) of the ES candidates"""
        starts = self.offsets
        parts = [starts[i] + img.es_cells for i, img in enumerate(self.images)]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=int)


def _candidate_cells(
    embeddings: np.ndarray,
    targets: CellTargets,
    grid_shape: Tuple[int, int],
    params: ModelParams,
    states: DetectorStates,
    config: TrainConfig,
) -> np.ndarray:
    """
    Cells feeding ES and CR: occupied cells, or in predicted mode the
    suppressed score peaks (strongest max_candidates) with occupied cells as fallback
    """
    if config.candidate_source == "predicted":
        logits = cell_logits(embeddings, params, scoring_context(states.context, config))
        radius_cells = max(1, int(round(2.0 * config.object_radius / config.patch_size)))
        peaks = suppress_non_maxima(
            expit(logits).reshape(grid_shape), config.candidate_threshold, radius_cells
        )
        if peaks:
            return np.sort(np.asarray(peaks[: config.max_candidates], dtype=int))
    return np.flatnonzero(targets.positive)


def _candidate_boxes(
    cells: np.ndarray,
    embeddings: np.ndarray,
    targets: CellTargets,
    grid_shape: Tuple[int, int],
    params: ModelParams,
    config: TrainConfig,
) -> List[BBox]:
    if config.candidate_source == "ground_truth":
        return list(targets.gt_boxes)
    centers = cell_centers(grid_shape, config.patch_size)[cells]
    offsets = embeddings[cells] @ params.off_w + params.off_b
    predicted = centers + config.patch_size * offsets
    return [BBox.around(cx, cy, config.object_radius) for cx, cy in predicted]


def prepare_batch(
    images: Sequence[ImageBuffer],
    annotations: Sequence[Sequence[Annotation]],
    params: ModelParams,
    states: DetectorStates,
    config: TrainConfig,
) -> PreparedBatch:
    """
    Compute descriptors and targets, and pick ES/CR candidates with the current parameters.

    Args:
        images (Sequence[ImageBuffer]): Batch images, already augmented when AA is on
        annotations (Sequence[Sequence[Annotation]]): Ground truth per image
        params (ModelParams): Parameters used for predicted candidates
        states (DetectorStates): States used for predicted candidates
        config (TrainConfig): Component toggles and hyperparameters

    Returns:
        PreparedBatch: Parameter-independent inputs of total_loss
    """
    if len(images) != len(annotations):
        raise ArgumentError(
            f"{len(images)} images but {len(annotations)} annotation lists"
        )
    stride = config.patch_size
    prepared = []
    for image, anns in zip(images, annotations):
        descriptors = patch_descriptors(image, stride)
        grid_shape = descriptors.shape[:2]
        targets = build_targets(anns, grid_shape, stride)
        item = PreparedImage(
            descriptors=descriptors.reshape(-1, DESCRIPTOR_SIZE), grid_shape=grid_shape, targets=targets
        )

        if config.use_es or config.use_cr:
            fmap, cell_batch = embed_descriptors(descriptors, params, stride)
            cells = _candidate_cells(cell_batch.vectors, targets, grid_shape, params, states, config)
            if config.use_es:
                item.es_cells = cells
            if config.use_cr:
                for box in _candidate_boxes(cells, cell_batch.vectors, targets, grid_shape, params, config):
                    try:
                        expanded = expand_box(box, config.gamma, image.width, image.height)
                        roi_pool(fmap, expanded, config.roi_grid)
                    except (ArgumentError, BoundsError) as e:
                        logger.debug(f"skipping candidate box {box}: {e}")
                        continue
                    item.context_boxes.append(expanded)
        prepared.append(item)

    batch = PreparedBatch(images=prepared, stride=stride, roi_grid=config.roi_grid)
    if config.use_es:
        rows = batch.es_rows()
        image_index = np.concatenate(
            [np.full(len(img.es_cells), i) for i, img in enumerate(prepared)]
        ) if prepared else np.zeros(0, dtype=int)
        centers = np.concatenate(
            [cell_centers(img.grid_shape, stride)[img.es_cells] for img in prepared]
        ) if len(rows) else np.zeros((0, 2))
        batch.es_groups = group_by_image(centers, image_index, config.delta)
    return batch


def _embed_batch(batch: PreparedBatch, params: ModelParams) -> List[FeatureMap]:
    return [img.embed(params, batch.stride)[0] for img in batch.images]


def _flat_cells(fmaps: Sequence[FeatureMap]) -> np.ndarray:
    return np.concatenate([fmap.values.reshape(-1, fmap.channels) for fmap in fmaps])


def _context_embeddings(batch: PreparedBatch, fmaps: Sequence[FeatureMap]) -> np.ndarray:
    pooled = [
        roi_pool(fmap, box, batch.roi_grid)
        for fmap, img in zip(fmaps, batch.images)
        for box in img.context_boxes
    ]
    if not pooled:
        return np.zeros((0, batch.roi_grid * batch.roi_grid * (fmaps[0].channels if fmaps else 0)))
    return np.stack(pooled)


def advance_states(
    batch: PreparedBatch, params: ModelParams, states: DetectorStates, config: TrainConfig
) -> DetectorStates:
    """
    EMA updates of the stabilizer and context references for one iteration.

    Disabled components leave their state untouched.
    """
    stabilizer, context = states.stabilizer, states.context
    if not (config.use_es or config.use_cr):
        return states
    fmaps = _embed_batch(batch, params)

    if config.use_es:
        candidates = _flat_cells(fmaps)[batch.es_rows()]
        stabilizer = update_cluster_means(batch.es_groups, candidates, stabilizer)
        stabilizer = update_global_mean(candidates, stabilizer)
        stabilizer = update_stacks(batch.es_groups, candidates, stabilizer)

    if config.use_cr:
        pooled = _context_embeddings(batch, fmaps)
        context = update_context_ref(list(pooled), context)

    return DetectorStates(aug=states.aug, stabilizer=stabilizer, context=context)


def total_loss(
    batch: PreparedBatch, params: ModelParams, states: DetectorStates, config: TrainConfig
) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    """
    L_total = L_cls + L_bbox + L_obj + l1 L_cluster + l2 L_stack + l3 L_context

    L_obj is the mean BCE of cell objectness against occupancy, L_bbox the
    mean squared offset error on occupied cells, L_cls is identically zero
    (single class). Consistency terms appear only for enabled components.

    Returns:
        Tuple[LossBreakdown, Dict[str, np.ndarray]]: all six terms with their
        weighted total, and the gradient of the total for every parameter block
    """
    grads = params.zeros_like()
    fmaps = _embed_batch(batch, params)
    embeddings = _flat_cells(fmaps)
    n_cells, dim = embeddings.shape
    d_embed = np.zeros_like(embeddings)

    occupancy = np.concatenate([img.targets.occupancy for img in batch.images])
    offset_targets = np.concatenate([img.targets.offsets for img in batch.images])
    positive = occupancy > 0.5

    # objectness
    context = scoring_context(states.context, config)
    logits = cell_logits(embeddings, params, context)
    obj = float(np.mean(np.logaddexp(0.0, logits) - occupancy * logits))
    d_logits = (expit(logits) - occupancy) / n_cells
    if context is None:
        grads["obj_w"] = embeddings.T @ d_logits
        grads["obj_b"] = np.array([d_logits.sum()])
        d_embed += np.outer(d_logits, params.obj_w)
    else:
        grads["merged_w"] = merge_embeddings(embeddings, context).T @ d_logits
        grads["merged_b"] = np.array([d_logits.sum()])
        d_embed += np.outer(d_logits, params.merged_w[:dim])

    # offsets on occupied cells
    bbox = 0.0
    n_pos = int(positive.sum())
    if n_pos:
        predicted = embeddings[positive] @ params.off_w + params.off_b
        residual = predicted - offset_targets[positive]
        bbox = float(np.sum(residual * residual) / n_pos)
        d_offsets = 2.0 * residual / n_pos
        grads["off_w"] = embeddings[positive].T @ d_offsets
        grads["off_b"] = d_offsets.sum(axis=0)
        d_embed[positive] += d_offsets @ params.off_w.T

    # embedding stabilization
    cluster = stack = 0.0
    if config.use_es:
        rows = batch.es_rows()
        candidates = embeddings[rows]
        cluster, d_cluster = cluster_loss(batch.es_groups, candidates, states.stabilizer)
        stack, d_stack = batch_stack_loss(batch.es_groups, candidates, states.stabilizer)
        np.add.at(d_embed, rows, config.lambda1 * d_cluster + config.lambda2 * d_stack)

    # contextual refinement
    ctx = 0.0
    if config.use_cr:
        pooled = _context_embeddings(batch, fmaps)
        if len(pooled):
            ctx, d_pooled = context_loss(pooled, states.context)
            starts = batch.offsets
            k = 0
            for i, img in enumerate(batch.images):
                for box in img.context_boxes:
                    d_embed[starts[i] : starts[i + 1]] += roi_pool_backward(
                        config.lambda3 * d_pooled[k], img.grid_shape, batch.stride, box, batch.roi_grid
                    )
                    k += 1

    descriptors = np.concatenate([img.descriptors for img in batch.images])
    grads["proj_w"] = descriptors.T @ d_embed
    grads["proj_b"] = d_embed.sum(axis=0)

    breakdown = LossBreakdown(
        cls=0.0,
        bbox=bbox,
        obj=obj,
        cluster=cluster,
        stack=stack,
        context=ctx,
    )
    breakdown.total = (
        breakdown.cls
        + breakdown.bbox
        + breakdown.obj
        + config.lambda1 * breakdown.cluster
        + config.lambda2 * breakdown.stack
        + config.lambda3 * breakdown.context
    )
    return breakdown, grads
