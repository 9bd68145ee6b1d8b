"""
Synthetic dataset generation: per-image scene specs drawn from one seed,
cycled through difficulty tiers, rendered in parallel, manifest written last.
"""

import logging
from pathlib import Path
from typing import Dict, List, Literal, Union

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, Field, field_validator

from backend.data.loader import write_image, write_manifest
from backend.errors import DatasetIOError
from data_gen.scenes import SceneSpec, generate_scene
from detector.contracts import ImageRecord

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"

# Appearance presets, from easiest to hardest
TIER_PRESETS: Dict[str, Dict[str, float]] = {
    "bright_flat": {
        "background_level": 0.7,
        "object_contrast": 0.4,
        "texture_amplitude": 0.02,
        "illumination_amplitude": 0.0,
        "distractors": 0,
        "noise_std": 0.01,
    },
    "low_contrast": {
        "background_level": 0.6,
        "object_contrast": 0.15,
        "texture_amplitude": 0.04,
        "illumination_amplitude": 0.1,
        "distractors": 0,
        "noise_std": 0.02,
    },
    "dark_textured": {
        "background_level": 0.3,
        "object_contrast": 0.2,
        "texture_amplitude": 0.12,
        "illumination_amplitude": 0.15,
        "distractors": 0,
        "noise_std": 0.02,
    },
    "dark_distractors": {
        "background_level": 0.3,
        "object_contrast": 0.2,
        "texture_amplitude": 0.12,
        "illumination_amplitude": 0.15,
        "distractors": 40,
        "noise_std": 0.03,
    },
}

TierName = Literal["bright_flat", "low_contrast", "dark_textured", "dark_distractors"]


class DatasetConfig(BaseModel):
    """Dataset-level generation settings"""

    model_config = {"extra": "forbid"}

    n_images: int = Field(default=60, ge=1)
    width: int = Field(default=512, ge=8)
    height: int = Field(default=512, ge=8)
    mean_objects: float = Field(default=100.0, ge=0.0)
    count_jitter: float = Field(default=0.1, ge=0.0, lt=1.0, description="relative spread of per-image object counts")
    object_radius: float = Field(default=3.0, gt=0.0)
    radius_jitter: float = Field(default=0.2, ge=0.0, le=0.9)
    min_separation: float = Field(default=10.0, ge=0.0)
    texture_scale: float = Field(default=32.0, gt=0.0)
    texture_octaves: int = Field(default=3, ge=1)
    tiers: List[TierName] = Field(default_factory=lambda: list(TIER_PRESETS))
    seed: int = Field(default=0, ge=0)
    bit_depth: Literal[8, 16] = 8
    export_png: bool = False
    n_jobs: int = Field(default=1, ge=1)
    image_dir: str = "images"

    @field_validator("tiers")
    @classmethod
    def _non_empty(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("at least one tier is required")
        return value


def image_seed(sequence: np.random.SeedSequence) -> int:
    """Collapse a child SeedSequence into a 63-bit integer seed"""
    low, high = sequence.generate_state(2, dtype=np.uint32)
    return int((int(high) << 32 | int(low)) & (2**63 - 1))


def scene_specs(config: DatasetConfig) -> List[SceneSpec]:
    """
    Per-image scene specs, a pure function of the config.

    Image i gets tier tiers[i % len(tiers)]; its object count, background
    offset and gradient direction come from its own child seed.
    """
    children = np.random.SeedSequence(config.seed).spawn(config.n_images)
    specs = []
    for index, child in enumerate(children):
        tier = config.tiers[index % len(config.tiers)]
        preset = TIER_PRESETS[tier]
        seed = image_seed(child)
        rng = np.random.default_rng(child)
        jitter = config.count_jitter
        n_objects = int(round(config.mean_objects * rng.uniform(1.0 - jitter, 1.0 + jitter)))
        background = float(np.clip(preset["background_level"] + rng.uniform(-0.1, 0.1), 0.0, 1.0))
        specs.append(
            SceneSpec(
                width=config.width,
                height=config.height,
                n_objects=n_objects,
                object_radius=config.object_radius,
                radius_jitter=config.radius_jitter,
                min_separation=config.min_separation,
                illumination_amplitude=preset["illumination_amplitude"],
                illumination_direction=float(rng.uniform(0.0, 2.0 * np.pi)),
                texture_amplitude=preset["texture_amplitude"],
                texture_scale=config.texture_scale,
                texture_octaves=config.texture_octaves,
                distractors=int(preset["distractors"]),
                background_level=background,
                object_contrast=preset["object_contrast"],
                noise_std=preset["noise_std"],
                seed=seed,
            )
        )
    return specs


def _render_record(
    index: int, spec: SceneSpec, tier: str, out_dir: Path, config: DatasetConfig
) -> ImageRecord:
    image, annotations = generate_scene(spec)
    path = out_dir / config.image_dir / f"img_{index:05d}.pgm"
    write_image(path, image, config.bit_depth)
    if config.export_png:
        write_image(path.with_suffix(".png"), image, config.bit_depth)
    return ImageRecord(
        image_id=index,
        path=str(path),
        width=spec.width,
        height=spec.height,
        annotations=annotations,
        tier=tier,
        seed=spec.seed,
    )


def generate_dataset(config: DatasetConfig, out_dir: Union[str, Path]) -> Path:
    """
    Render every image and write the manifest.

    Args:
        config (DatasetConfig): Generation settings
        out_dir: Output directory, created if absent

    Returns:
        Path: location of the manifest
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"Failed to create dataset directory {out_dir}: {e}", str(out_dir)) from e
    specs = scene_specs(config)
    tiers = [config.tiers[i % len(config.tiers)] for i in range(len(specs))]

    logger.info(f"Generating {len(specs)} images into {out_dir} (n_jobs={config.n_jobs})")
    records = Parallel(n_jobs=config.n_jobs)(
        delayed(_render_record)(i, spec, tier, out_dir, config)
        for i, (spec, tier) in enumerate(zip(specs, tiers))
    )
    total = sum(len(r.annotations) for r in records)
    logger.info(f"Rendered {len(records)} images with {total} objects")
    return write_manifest(out_dir / MANIFEST_NAME, records)
