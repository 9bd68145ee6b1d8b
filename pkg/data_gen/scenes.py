"""
Procedural dense tiny-object scenes.

A scene is a background level plus a linear illumination gradient, a
multi-octave value-noise texture, dark Gaussian-profile dots at the object
centers, clutter blobs that are never annotated, and Gaussian sensor noise.
Everything is drawn from one generator seeded by SceneSpec.seed.
"""

import logging
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.ndimage import zoom

from backend.analysis.basic_statistics import ImageBuffer
from backend.errors import GenerationError
from detector.contracts import Annotation

logger = logging.getLogger(__name__)

# Rejection-sampling budget per requested object
PLACEMENT_ATTEMPTS_PER_OBJECT = 200


class SceneSpec(BaseModel):
    """Parameters of one synthetic scene"""

    model_config = {"extra": "forbid"}

    width: int = Field(default=512, ge=1)
    height: int = Field(default=512, ge=1)
    n_objects: int = Field(default=100, ge=0)
    object_radius: float = Field(default=3.0, gt=0.0, description="mean dot radius in pixels")
    radius_jitter: float = Field(default=0.2, ge=0.0, le=0.9, description="relative radius spread")
    min_separation: float = Field(default=10.0, ge=0.0)
    illumination_amplitude: float = Field(default=0.0, ge=0.0)
    illumination_direction: float = Field(default=0.0, description="gradient direction in radians")
    texture_amplitude: float = Field(default=0.0, ge=0.0)
    texture_scale: float = Field(default=32.0, gt=0.0, description="coarsest noise cell in pixels")
    texture_octaves: int = Field(default=3, ge=1)
    distractors: int = Field(default=0, ge=0)
    background_level: float = Field(default=0.6, ge=0.0, le=1.0)
    object_contrast: float = Field(default=0.35, ge=0.0)
    noise_std: float = Field(default=0.0, ge=0.0)
    seed: int = Field(default=0, ge=0, lt=2**64)


def value_noise(
    shape: Tuple[int, int], scale: float, octaves: int, rng: np.random.Generator
) -> np.ndarray:
    """
    Multi-octave value noise roughly in [-1, 1].

    Each octave is a random lattice upsampled with cubic splines; octave o
    has cell size scale / 2**o and weight 0.5**o.
    """
    height, width = shape
    total = np.zeros(shape)
    weight_sum = 0.0
    for octave in range(octaves):
        cell = max(1.0, scale / 2**octave)
        lattice = rng.uniform(-1.0, 1.0, (int(np.ceil(height / cell)) + 2, int(np.ceil(width / cell)) + 2))
        layer = zoom(lattice, cell, order=3)[:height, :width]
        weight = 0.5**octave
        total += weight * layer
        weight_sum += weight
    return total / weight_sum


def place_centers(
    n: int, width: int, height: int, margin: float, min_separation: float, rng: np.random.Generator
) -> np.ndarray:
    """
    Rejection-sample n centers at least min_separation apart, margin away from the border

    Raises:
        GenerationError: when the attempt budget runs out
    """
    lo = np.array([margin, margin])
    hi = np.array([width - margin, height - margin])
    if n > 0 and np.any(hi < lo):
        raise GenerationError(
            f"object_radius={margin} leaves no room for centers in a {width}x{height} image"
        )
    centers = np.zeros((0, 2))
    budget = PLACEMENT_ATTEMPTS_PER_OBJECT * max(n, 1)
    attempts = 0
    while len(centers) < n:
        if attempts >= budget:
            raise GenerationError(
                f"could not place {n} objects with min_separation={min_separation} "
                f"in {width}x{height} after {budget} attempts (placed {len(centers)})"
            )
        attempts += 1
        candidate = rng.uniform(lo, hi)
        if len(centers) and np.min(np.linalg.norm(centers - candidate, axis=1)) < min_separation:
            continue
        centers = np.vstack([centers, candidate])
    return centers


def stamp_blob(image: np.ndarray, cx: float, cy: float, sigma: float, amplitude: float) -> None:
    """Add amplitude * exp(-d^2 / 2 sigma^2) around (cx, cy), in place, within 4 sigma"""
    height, width = image.shape
    reach = int(np.ceil(4.0 * sigma))
    x0, x1 = max(0, int(cx) - reach), min(width, int(cx) + reach + 1)
    y0, y1 = max(0, int(cy) - reach), min(height, int(cy) + reach + 1)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    d2 = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2
    image[y0:y1, x0:x1] += amplitude * np.exp(-d2 / (2.0 * sigma * sigma))


def generate_scene(spec: SceneSpec) -> Tuple[ImageBuffer, List[Annotation]]:
    """
    Render one scene and its ground truth.

    Args:
        spec (SceneSpec): Scene parameters

    Returns:
        Tuple[ImageBuffer, List[Annotation]]: image in [0, 1] and one
        annotation per object dot (distractors excluded)
    """
    rng = np.random.default_rng(spec.seed)
    height, width = spec.height, spec.width
    image = np.full((height, width), spec.background_level, dtype=np.float64)

    if spec.illumination_amplitude > 0:
        ys, xs = np.mgrid[0:height, 0:width] + 0.5
        cos, sin = np.cos(spec.illumination_direction), np.sin(spec.illumination_direction)
        extent = abs(cos) * width + abs(sin) * height
        image += spec.illumination_amplitude * ((xs - width / 2) * cos + (ys - height / 2) * sin) / extent

    if spec.texture_amplitude > 0:
        image += spec.texture_amplitude * value_noise(
            (height, width), spec.texture_scale, spec.texture_octaves, rng
        )

    centers = place_centers(
        spec.n_objects, width, height, spec.object_radius, spec.min_separation, rng
    )
    radii = spec.object_radius * (1.0 + spec.radius_jitter * rng.uniform(-1.0, 1.0, len(centers)))
    annotations = []
    for object_id, ((cx, cy), radius) in enumerate(zip(centers, radii)):
        stamp_blob(image, cx, cy, radius / 2.0, -spec.object_contrast)
        annotations.append(Annotation.from_center(float(cx), float(cy), float(radius), object_id))

    # Clutter: same radius, either bright or half-depth dark
    for _ in range(spec.distractors):
        cx, cy = rng.uniform(0.0, width), rng.uniform(0.0, height)
        inverted = rng.random() < 0.5
        amplitude = spec.object_contrast if inverted else -0.5 * spec.object_contrast
        stamp_blob(image, cx, cy, spec.object_radius / 2.0, amplitude)

    if spec.noise_std > 0:
        image += spec.noise_std * rng.standard_normal((height, width))

    np.clip(image, 0.0, 1.0, out=image)
    logger.debug(f"generate_scene: seed={spec.seed} objects={len(annotations)} distractors={spec.distractors}")
    return ImageBuffer.from_array(image), annotations
