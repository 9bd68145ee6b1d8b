# Adaptive augmentation: brightness/contrast/noise driven by local-vs-reference statistics

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from backend.analysis.basic_statistics import (
    EmaScalarPair,
    ImageBuffer,
    ScalarStats,
    batch_stats,
    local_stats,
)
from backend.errors import ArgumentError

logger = logging.getLogger(__name__)

DENOMINATOR_FLOOR = 1e-6
GAIN_CLAMP = (0.25, 4.0)
NOISE_CLAMP = (0.0, 0.5)


@dataclass(frozen=True)
class AugGains:
    """Sensitivities k1 (brightness), k2 (contrast), k3 (noise)"""

    k1: float = 1.0
    k2: float = 1.0
    k3: float = 0.05


@dataclass(frozen=True)
class AugParams:
    alpha: float = 1.0
    beta: float = 1.0
    eta: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self.alpha == 1.0 and self.beta == 1.0 and self.eta == 0.0


@dataclass(frozen=True)
class NoiseSeed:
    seed: int

    def spawn(self, index: int) -> "NoiseSeed":
        """Derive the seed used for the index-th image of a batch"""
        mixed = np.random.SeedSequence([self.seed % 2**64, index]).generate_state(
            2, dtype=np.uint32
        )
        return NoiseSeed(int(mixed[0]) << 32 | int(mixed[1]))


def derive_params(local: ScalarStats, ref: EmaScalarPair, gains: AugGains) -> AugParams:
    """
    Derive augmentation parameters from the gap between local and reference statistics.

    Args:
        local (ScalarStats): Statistics of the image being augmented
        ref (EmaScalarPair): Seeded dataset-level reference
        gains (AugGains): k1, k2, k3

    Returns:
        AugParams: alpha, beta clamped to [0.25, 4], eta clamped to [0, 0.5]
    """
    ref.require_initialized()
    mu_den = max(ref.mu_ref, DENOMINATOR_FLOOR)
    sigma_den = max(ref.sigma_ref, DENOMINATOR_FLOOR)

    alpha = 1.0 + gains.k1 * (ref.mu_ref - local.mean) / mu_den
    beta = 1.0 + gains.k2 * (ref.sigma_ref - local.std) / sigma_den
    eta = gains.k3 * abs(ref.sigma_ref - local.std) / sigma_den

    return AugParams(
        alpha=float(np.clip(alpha, *GAIN_CLAMP)),
        beta=float(np.clip(beta, *GAIN_CLAMP)),
        eta=float(np.clip(eta, *NOISE_CLAMP)),
    )


def standard_normal_field(seed: NoiseSeed, shape: Tuple[int, int]) -> np.ndarray:
    """
    Seeded N(0, 1) samples, one per pixel in row-major order.

    A Philox stream keyed on the seed fills the raster sequentially, so the
    field is a deterministic function of (seed, shape).
    """
    generator = np.random.Generator(np.random.Philox(key=seed.seed % 2**64))
    return generator.standard_normal(shape)


def apply_augmentation(
    image: ImageBuffer, params: AugParams, seed: NoiseSeed
) -> ImageBuffer:
    """
    Compute beta * alpha * x + eta * eps per pixel and clamp to [0, 1].

    The input image is left untouched.
    """
    if params.is_identity:
        return image.copy()
    out = params.beta * params.alpha * image.data
    if params.eta > 0.0:
        out = out + params.eta * standard_normal_field(seed, image.shape)
    return ImageBuffer.from_array(np.clip(out, 0.0, 1.0))


def augment_batch(
    images: Sequence[ImageBuffer],
    state: EmaScalarPair,
    gains: AugGains,
    seed: NoiseSeed,
) -> Tuple[List[ImageBuffer], EmaScalarPair]:
    """
    Advance the reference once with this batch, then augment every image against it.

    Returns:
        Tuple[List[ImageBuffer], EmaScalarPair]: augmented batch and advanced state
    """
    if len(images) == 0:
        raise ArgumentError("augment_batch needs a non-empty batch")

    new_state = state.update(batch_stats(images))
    augmented = []
    for index, image in enumerate(images):
        params = derive_params(
            local_stats(image, image.full_region()), new_state, gains
        )
        logger.debug(
            f"image {index}: alpha={params.alpha:.4f} beta={params.beta:.4f} eta={params.eta:.4f}"
        )
        augmented.append(apply_augmentation(image, params, seed.spawn(index)))
    return augmented, new_state
