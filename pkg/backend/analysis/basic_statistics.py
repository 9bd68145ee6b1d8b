# Image statistics and the EMA recurrence reused by every stabilizing component

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from backend.errors import ArgumentError, BoundsError, StateError

logger = logging.getLogger(__name__)

# Intervals stated for the method's hyperparameters; --unsafe-ranges skips them
HYPERPARAMETER_RANGES: Dict[str, Tuple[float, float]] = {
    "rho": (0.01, 0.1),
    "delta": (20.0, 100.0),
    "gamma": (0.1, 0.5),
    "lam": (0.5, 2.0),
    "lambda1": (0.1, 1.0),
    "lambda2": (0.1, 1.0),
    "lambda3": (0.1, 1.0),
    "k1": (0.5, 1.5),
    "k2": (0.5, 1.5),
    "k3": (0.01, 0.1),
}


@dataclass
class ImageBuffer:
    """
    Single-channel float raster, row-major, intensities in [0, 1]
    """

    width: int
    height: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ArgumentError(
                f"Image must be at least 1x1, got {self.width}x{self.height}"
            )
        data = np.asarray(self.data, dtype=np.float64)
        if data.size != self.width * self.height:
            raise ArgumentError(
                f"Image data has {data.size} values, expected {self.width * self.height}"
            )
        self.data = data.reshape(self.height, self.width)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "ImageBuffer":
        """Wrap a (height, width) array"""
        array = np.asarray(array, dtype=np.float64)
        if array.ndim != 2:
            raise ArgumentError(f"Expected a 2-D array, got shape {array.shape}")
        return cls(width=array.shape[1], height=array.shape[0], data=array)

    @property
    def shape(self):
        return self.data.shape

    def full_region(self) -> "Region":
        return Region(0, 0, self.width, self.height)

    def copy(self) -> "ImageBuffer":
        return ImageBuffer(self.width, self.height, self.data.copy())


@dataclass(frozen=True)
class Region:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)"""

    x0: int
    y0: int
    x1: int
    y1: int


@dataclass(frozen=True)
class ScalarStats:
    mean: float
    std: float


@dataclass
class EmaScalarPair:
    """
    Dataset-level reference statistics (mu_ref, sigma_ref) tracked by EMA.

    The first update seeds both references with the observed values.
    """

    mu_ref: float = 0.0
    sigma_ref: float = 0.0
    rho: float = 0.05
    initialized: bool = False
    unsafe_ranges: bool = False

    def __post_init__(self):
        check_range("rho", self.rho, self.unsafe_ranges)

    def update(self, observed: ScalarStats) -> "EmaScalarPair":
        """Return the state advanced by one batch observation"""
        if not self.initialized:
            return EmaScalarPair(observed.mean, observed.std, self.rho, True, self.unsafe_ranges)
        return EmaScalarPair(
            mu_ref=ema_update(self.mu_ref, observed.mean, self.rho),
            sigma_ref=ema_update(self.sigma_ref, observed.std, self.rho),
            rho=self.rho,
            initialized=True,
            unsafe_ranges=self.unsafe_ranges,
        )

    def require_initialized(self) -> None:
        if not self.initialized:
            raise StateError("Reference statistics have not been seeded yet")

    def to_dict(self) -> dict:
        return {
            "mu_ref": self.mu_ref,
            "sigma_ref": self.sigma_ref,
            "rho": self.rho,
            "initialized": self.initialized,
            "unsafe_ranges": self.unsafe_ranges,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EmaScalarPair":
        return cls(
            mu_ref=float(payload["mu_ref"]),
            sigma_ref=float(payload["sigma_ref"]),
            rho=float(payload["rho"]),
            initialized=bool(payload["initialized"]),
            unsafe_ranges=bool(payload.get("unsafe_ranges", False)),
        )


def check_range(name: str, value: float, unsafe: bool = False) -> None:
    """
    Enforce the interval of a named hyperparameter.

    With unsafe set only the hard domain remains: rho in (0, 1], delta > 0,
    and non-negative gamma and lam.
    """
    if not unsafe:
        lo, hi = HYPERPARAMETER_RANGES[name]
        if not lo <= value <= hi:
            raise ArgumentError(f"{name}={value} outside [{lo}, {hi}]")
        return
    if name == "rho" and not 0.0 < value <= 1.0:
        raise ArgumentError(f"rho must lie in (0, 1], got {value}")
    if name == "delta" and value <= 0.0:
        raise ArgumentError(f"delta must be positive, got {value}")
    if name in ("gamma", "lam") and value < 0.0:
        raise ArgumentError(f"{name} must be non-negative, got {value}")


def ema_update(prev, observed, rho: float):
    """
    One step of the EMA recurrence: (1 - rho) * prev + rho * observed.

    Evaluated as prev + rho * (observed - prev) so that observed == prev is an
    exact fixed point. Works on scalars and numpy arrays alike.
    """
    if not 0.0 < rho <= 1.0:
        raise ArgumentError(f"rho must lie in (0, 1], got {rho}")
    return prev + rho * (observed - prev)


def local_stats(image: ImageBuffer, region: Region) -> ScalarStats:
    """
    Mean and population standard deviation over a region.

    Args:
        image (ImageBuffer): Source raster
        region (Region): Half-open rectangle inside the raster

    Returns:
        ScalarStats: mean and std (divides by |region|)
    """
    if not (
        0 <= region.x0 < region.x1 <= image.width
        and 0 <= region.y0 < region.y1 <= image.height
    ):
        raise BoundsError(
            f"Region {region} is empty or outside a {image.width}x{image.height} image"
        )
    window = image.data[region.y0 : region.y1, region.x0 : region.x1]
    return ScalarStats(mean=float(window.mean()), std=float(window.std(ddof=0)))


def batch_stats(images: Sequence[ImageBuffer]) -> ScalarStats:
    """
    Batch statistics as the mean of per-image means and the mean of per-image stds.

    Each image weighs the same regardless of its resolution.
    """
    if len(images) == 0:
        raise ArgumentError("batch_stats needs at least one image")
    per_image: List[ScalarStats] = [
        local_stats(image, image.full_region()) for image in images
    ]
    return ScalarStats(
        mean=float(np.mean([s.mean for s in per_image])),
        std=float(np.mean([s.std for s in per_image])),
    )
