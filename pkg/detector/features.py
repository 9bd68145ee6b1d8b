# Patch descriptors, the linear embedding projection and per-cell training targets

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from backend.analysis.basic_statistics import ImageBuffer
from backend.embedding.context import BBox, FeatureMap
from backend.embedding.stabilizer import EmbeddingBatch
from backend.errors import ArgumentError
from detector.contracts import Annotation
from detector.models import DESCRIPTOR_SIZE, ModelParams

logger = logging.getLogger(__name__)


def tile_patches(image: ImageBuffer, patch_size: int) -> np.ndarray:
    """
    Split an image into non-overlapping patches; a trailing partial row/column is dropped.

    Returns:
        np.ndarray: (Hf, Wf, S, S)
    """
    if image.width < patch_size or image.height < patch_size:
        raise ArgumentError(
            f"Image {image.width}x{image.height} is smaller than one {patch_size}px patch"
        )
    hf, wf = image.height // patch_size, image.width // patch_size
    cropped = image.data[: hf * patch_size, : wf * patch_size]
    return cropped.reshape(hf, patch_size, wf, patch_size).transpose(0, 2, 1, 3)


def patch_descriptors(image: ImageBuffer, patch_size: int = 8) -> np.ndarray:
    """
    Fixed descriptor per patch.

    Components: mean, std, min, max, center-minus-surround mean, and mean
    absolute differences along x, y, the diagonal and the anti-diagonal.

    Returns:
        np.ndarray: (Hf, Wf, 9)
    """
    patches = tile_patches(image, patch_size)
    hf, wf = patches.shape[:2]

    lo = patch_size // 4
    hi = lo + max(patch_size // 2, 1)
    center_mask = np.zeros((patch_size, patch_size), dtype=bool)
    center_mask[lo:hi, lo:hi] = True
    center = patches[:, :, center_mask].mean(axis=-1)
    surround = patches[:, :, ~center_mask].mean(axis=-1)

    descriptors = np.empty((hf, wf, DESCRIPTOR_SIZE))
    descriptors[..., 0] = patches.mean(axis=(2, 3))
    descriptors[..., 1] = patches.std(axis=(2, 3))
    descriptors[..., 2] = patches.min(axis=(2, 3))
    descriptors[..., 3] = patches.max(axis=(2, 3))
    descriptors[..., 4] = center - surround
    descriptors[..., 5] = np.abs(np.diff(patches, axis=3)).mean(axis=(2, 3))
    descriptors[..., 6] = np.abs(np.diff(patches, axis=2)).mean(axis=(2, 3))
    descriptors[..., 7] = np.abs(patches[:, :, 1:, 1:] - patches[:, :, :-1, :-1]).mean(axis=(2, 3))
    descriptors[..., 8] = np.abs(patches[:, :, 1:, :-1] - patches[:, :, :-1, 1:]).mean(axis=(2, 3))
    return descriptors


def cell_centers(grid_shape: Tuple[int, int], stride: int) -> np.ndarray:
    """Pixel centers of all cells in row-major order, shape (Hf * Wf, 2) as (cx, cy)"""
    hf, wf = grid_shape
    rows, cols = np.meshgrid(np.arange(hf), np.arange(wf), indexing="ij")
    half = stride / 2.0
    return np.stack(
        [half + stride * cols.ravel(), half + stride * rows.ravel()], axis=1
    ).astype(np.float64)


def project(descriptors: np.ndarray, params: ModelParams) -> np.ndarray:
    """Cell embeddings (N, D) from flattened descriptors (N, P)"""
    return descriptors @ params.proj_w + params.proj_b


def embed_descriptors(
    descriptors: np.ndarray, params: ModelParams, stride: int
) -> Tuple[FeatureMap, EmbeddingBatch]:
    """
    Project a (Hf, Wf, P) descriptor grid to cell embeddings.

    Returns:
        Tuple[FeatureMap, EmbeddingBatch]: the embeddings on the cell grid
        and as a flat row-major batch with cell-center coordinates
    """
    grid_shape = descriptors.shape[:2]
    vectors = project(descriptors.reshape(-1, descriptors.shape[-1]), params)
    fmap = FeatureMap(values=vectors.reshape(*grid_shape, -1), stride=stride)
    return fmap, EmbeddingBatch(vectors=vectors, centers=cell_centers(grid_shape, stride))


def extract_features(
    image: ImageBuffer, params: ModelParams, patch_size: int = 8
) -> Tuple[FeatureMap, EmbeddingBatch]:
    """Embed every patch of an image (stride = patch size)"""
    return embed_descriptors(patch_descriptors(image, patch_size), params, patch_size)


@dataclass
class CellTargets:
    """
    Per-cell supervision for one image: occupancy, offsets in cell units, GT boxes
    """

    occupancy: np.ndarray
    offsets: np.ndarray
    gt_boxes: List[BBox]

    @property
    def positive(self) -> np.ndarray:
        return self.occupancy > 0.5


def build_targets(
    annotations: Sequence[Annotation], grid_shape: Tuple[int, int], stride: int
) -> CellTargets:
    """
    Mark the cell containing each annotation center as occupied.

    The offset target is (center - cell center) / stride. When two objects
    share a cell the first one in annotation order wins.
    """
    hf, wf = grid_shape
    occupancy = np.zeros(hf * wf)
    offsets = np.zeros((hf * wf, 2))
    boxes = []
    for ann in annotations:
        col, row = int(np.floor(ann.cx / stride)), int(np.floor(ann.cy / stride))
        if not (0 <= row < hf and 0 <= col < wf):
            continue
        boxes.append(ann.box)
        index = row * wf + col
        if occupancy[index] > 0:
            continue
        occupancy[index] = 1.0
        offsets[index] = (
            (ann.cx - (col + 0.5) * stride) / stride,
            (ann.cy - (row + 0.5) * stride) / stride,
        )
    return CellTargets(occupancy=occupancy, offsets=offsets, gt_boxes=boxes)
