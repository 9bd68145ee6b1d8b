# Contextual refinement: box expansion, grid ROI pooling, EMA context reference

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from backend.analysis.basic_statistics import check_range, ema_update
from backend.errors import ArgumentError, BoundsError, StateError

logger = logging.getLogger(__name__)

STATE_VERSION = 1


@dataclass(frozen=True)
class BBox:
    """Top-left anchored box in pixels"""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ArgumentError(f"Box extents must be positive, got w={self.w}, h={self.h}")

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def around(cls, cx: float, cy: float, radius: float) -> "BBox":
        """Square of side 2 * radius centred on (cx, cy)"""
        return cls(cx - radius, cy - radius, 2.0 * radius, 2.0 * radius)


@dataclass
class FeatureMap:
    """Grid of C-vectors, values shaped (Hf, Wf, C); cell (i, j) covers stride x stride pixels"""

    values: np.ndarray
    stride: int

    def __post_init__(self):
        if self.stride < 1:
            raise ArgumentError(f"stride must be >= 1, got {self.stride}")
        if self.values.ndim != 3:
            raise ArgumentError(f"FeatureMap values must be (Hf, Wf, C), got {self.values.shape}")

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass
class ContextState:
    """EMA context reference; rho and gamma are held to the hyperparameter intervals unless unsafe_ranges is set"""

    ref: Optional[np.ndarray] = None
    rho: float = 0.05
    gamma: float = 0.25
    initialized: bool = False
    unsafe_ranges: bool = False

    def __post_init__(self):
        check_range("rho", self.rho, self.unsafe_ranges)
        check_range("gamma", self.gamma, self.unsafe_ranges)

    def require_initialized(self) -> np.ndarray:
        if not self.initialized or self.ref is None:
            raise StateError("Context reference has not been seeded yet")
        return self.ref

    def seeded_or_zero(self, dim: int) -> "ContextState":
        """This state if seeded, otherwise a seeded copy with a zero reference of size dim"""
        if self.initialized and self.ref is not None:
            return self
        return ContextState(np.zeros(dim), self.rho, self.gamma, True, self.unsafe_ranges)

    def to_dict(self) -> dict:
        return {
            "version": STATE_VERSION,
            "ref": None if self.ref is None else self.ref.tolist(),
            "rho": self.rho,
            "gamma": self.gamma,
            "initialized": self.initialized,
            "unsafe_ranges": self.unsafe_ranges,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ContextState":
        if payload.get("version") != STATE_VERSION:
            raise StateError(f"Unsupported context state version: {payload.get('version')}")
        ref = payload.get("ref")
        return cls(
            ref=None if ref is None else np.asarray(ref, dtype=np.float64),
            rho=float(payload["rho"]),
            gamma=float(payload["gamma"]),
            initialized=bool(payload["initialized"]),
            unsafe_ranges=bool(payload.get("unsafe_ranges", False)),
        )


def expand_box(box: BBox, gamma: float, image_w: float, image_h: float) -> BBox:
    """
    Grow a box by gamma of its size on every side, then clip it to the image.

    Returns:
        BBox: (x - g*w, y - g*h, w + 2g*w, h + 2g*h) intersected with [0, W] x [0, H]
    """
    if gamma < 0:
        raise ArgumentError(f"gamma must be non-negative, got {gamma}")
    x0 = box.x - gamma * box.w
    y0 = box.y - gamma * box.h
    x1 = x0 + box.w + 2.0 * gamma * box.w
    y1 = y0 + box.h + 2.0 * gamma * box.h

    cx0, cy0 = max(x0, 0.0), max(y0, 0.0)
    cx1, cy1 = min(x1, float(image_w)), min(y1, float(image_h))
    if cx1 <= cx0 or cy1 <= cy0:
        raise ArgumentError(f"Expanded box {box} lies outside the {image_w}x{image_h} image")
    return BBox(cx0, cy0, cx1 - cx0, cy1 - cy0)


def _axis_weights(start: float, stop: float, size: int) -> np.ndarray:
    """
    Normalised weights of one bin over the cells of one axis (feature units).

    Bins at least one cell wide average the cells they cover by overlap;
    narrower bins interpolate linearly at their centre between cell centres.
    """
    weights = np.zeros(size)
    if stop - start >= 1.0:
        cells = np.arange(size)
        overlap = np.minimum(stop, cells + 1.0) - np.maximum(start, cells)
        weights = np.clip(overlap, 0.0, None)
    else:
        position = np.clip((start + stop) / 2.0 - 0.5, 0.0, size - 1.0)
        lower = int(np.floor(position))
        upper = min(lower + 1, size - 1)
        frac = position - lower
        weights[lower] += 1.0 - frac
        weights[upper] += frac
    return weights / weights.sum()


def roi_pool_weights(
    grid_shape: Tuple[int, int], stride: int, box: BBox, grid: int
) -> np.ndarray:
    """
    Linear map from feature cells to pooled bins for one box.

    Returns:
        np.ndarray: (grid * grid, Hf * Wf); bins ordered bin-x outer, bin-y inner
    """
    if grid < 1:
        raise ArgumentError(f"grid must be >= 1, got {grid}")
    hf, wf = grid_shape
    fx0 = max(box.x / stride, 0.0)
    fy0 = max(box.y / stride, 0.0)
    fx1 = min((box.x + box.w) / stride, float(wf))
    fy1 = min((box.y + box.h) / stride, float(hf))
    if fx1 <= fx0 or fy1 <= fy0:
        raise BoundsError(f"Box {box} does not intersect the {wf}x{hf} feature grid")

    weights = np.zeros((grid * grid, hf * wf))
    if box.w < 1.0 or box.h < 1.0:
        # sub-pixel box: every bin is the single sample at the box centre
        cx, cy = box.center
        wx = _axis_weights(cx / stride, cx / stride, wf)
        wy = _axis_weights(cy / stride, cy / stride, hf)
        weights[:] = np.outer(wy, wx).ravel()
        return weights

    xs = np.linspace(fx0, fx1, grid + 1)
    ys = np.linspace(fy0, fy1, grid + 1)
    for bx in range(grid):
        wx = _axis_weights(xs[bx], xs[bx + 1], wf)
        for by in range(grid):
            wy = _axis_weights(ys[by], ys[by + 1], hf)
            weights[bx * grid + by] = np.outer(wy, wx).ravel()
    return weights


def roi_pool(fmap: FeatureMap, box: BBox, grid: int = 2) -> np.ndarray:
    """Average-pool a box into grid x grid bins; output has C * grid^2 components"""
    weights = roi_pool_weights(fmap.grid_shape, fmap.stride, box, grid)
    cells = fmap.values.reshape(-1, fmap.channels)
    return (weights @ cells).ravel()


def roi_pool_backward(
    grad_pooled: np.ndarray, grid_shape: Tuple[int, int], stride: int, box: BBox, grid: int = 2
) -> np.ndarray:
    """
    Gradient of roi_pool with respect to the feature cells.

    Args:
        grad_pooled (np.ndarray): gradient w.r.t. the pooled vector, C * grid^2 components
        grid_shape (Tuple[int, int]): (Hf, Wf) of the pooled feature map
        stride (int): pixels per feature cell
        box (BBox): the pooled box
        grid (int): bins per side

    Returns:
        np.ndarray: (Hf * Wf, C) gradient, row-major over cells
    """
    weights = roi_pool_weights(grid_shape, stride, box, grid)
    return weights.T @ np.asarray(grad_pooled, dtype=np.float64).reshape(grid * grid, -1)


def update_context_ref(
    context_embeddings: Sequence[np.ndarray], state: ContextState
) -> ContextState:
    """EMA of the mean context embedding into the reference; first call seeds it"""
    if len(context_embeddings) == 0:
        return state
    stacked = np.asarray(context_embeddings, dtype=np.float64)
    if stacked.ndim != 2:
        raise ArgumentError("Context embeddings must share one dimension")
    mean = stacked.mean(axis=0)
    if state.initialized:
        if state.ref.shape != mean.shape:
            raise ArgumentError(
                f"Context dimension {mean.shape[0]} does not match reference {state.ref.shape[0]}"
            )
        ref = ema_update(state.ref, mean, state.rho)
    else:
        ref = mean
    return ContextState(ref, state.rho, state.gamma, True, state.unsafe_ranges)


def context_loss(
    context_embeddings: np.ndarray, state: ContextState
) -> Tuple[float, np.ndarray]:
    """
    Mean squared distance of context embeddings to the reference.

    Returns:
        Tuple[float, np.ndarray]: loss and gradient (2 / N) * (E_i - ref)
    """
    ref = state.require_initialized()
    embeddings = np.asarray(context_embeddings, dtype=np.float64)
    if len(embeddings) == 0:
        return 0.0, np.zeros((0, ref.shape[0]))
    diff = embeddings - ref
    n = len(embeddings)
    return float(np.sum(diff * diff) / n), (2.0 / n) * diff


def merge_embeddings(object_emb: np.ndarray, state: ContextState) -> np.ndarray:
    """
    Concatenate object embeddings with the shared context reference.

    A single (D,) vector yields (D + Dc,); an (N, D) stack yields (N, D + Dc)
    with the reference repeated on every row.
    """
    ref = state.require_initialized()
    object_emb = np.asarray(object_emb, dtype=np.float64)
    if object_emb.ndim == 1:
        return np.concatenate([object_emb, ref])
    if object_emb.ndim != 2:
        raise ArgumentError(f"Object embeddings must be (D,) or (N, D), got {object_emb.shape}")
    return np.hstack([object_emb, np.broadcast_to(ref, (len(object_emb), ref.shape[0]))])
