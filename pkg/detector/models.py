"""
Pydantic configuration models and the trainable parameter container
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationInfo, field_validator, model_validator

from backend.analysis.basic_statistics import HYPERPARAMETER_RANGES
from backend.errors import ArgumentError

DESCRIPTOR_SIZE = 9


class TrainConfig(BaseModel):
    """Training hyperparameters, loss weights and component toggles"""

    model_config = {"extra": "forbid"}

    # set from the validation context; declared first so range checks can read it
    unsafe_ranges: bool = Field(default=False, exclude=True)

    epochs: int = Field(default=8, ge=1)
    batch_size: int = Field(default=4, ge=1)
    learning_rate: float = Field(default=0.1, gt=0.0)
    max_grad_norm: Optional[float] = Field(
        default=5.0, gt=0.0, description="global gradient norm cap per step; None disables clipping"
    )

    lambda1: float = Field(default=0.25, description="weight of the clustering consistency loss")
    lambda2: float = Field(default=0.25, description="weight of the stacking consistency loss")
    lambda3: float = Field(default=0.25, description="weight of the context consistency loss")

    use_aa: bool = Field(default=False, description="adaptive augmentation")
    use_es: bool = Field(default=False, description="embedding stabilization")
    use_cr: bool = Field(default=False, description="contextual refinement")

    rho: float = 0.05
    delta: float = 20.0
    gamma: float = 0.25
    lam: float = 1.0
    k1: float = 1.0
    k2: float = 1.0
    k3: float = 0.05

    seed: int = Field(default=0, ge=0)
    embedding_dim: int = Field(default=16, ge=1)
    patch_size: int = Field(default=8, ge=2)
    roi_grid: int = Field(default=2, ge=1)
    object_radius: float = Field(default=3.0, gt=0.0)
    init_scale: float = Field(default=0.01, ge=0.0)
    prior_probability: float = Field(
        default=0.01, gt=0.0, lt=1.0, description="initial objectness of every cell"
    )
    candidate_source: Literal["ground_truth", "predicted"] = "ground_truth"
    candidate_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    max_candidates: int = Field(default=64, ge=1, description="predicted candidates kept per image, strongest first")

    @model_validator(mode="before")
    @classmethod
    def _mark_unsafe(cls, data: Any, info: ValidationInfo) -> Any:
        if isinstance(data, dict) and info.context and info.context.get("unsafe_ranges"):
            return {**data, "unsafe_ranges": True}
        return data

    @field_validator(*HYPERPARAMETER_RANGES.keys())
    @classmethod
    def _check_range(cls, value: float, info: ValidationInfo) -> float:
        if info.data.get("unsafe_ranges"):
            return value
        lo, hi = HYPERPARAMETER_RANGES[info.field_name]
        if not lo <= value <= hi:
            raise ValueError(f"{value} outside the allowed range [{lo}, {hi}]")
        return value

    @classmethod
    def unchecked(cls, **values) -> "TrainConfig":
        """Build a config without enforcing the hyperparameter intervals"""
        return cls.model_validate(values, context={"unsafe_ranges": True})

    @property
    def context_dim(self) -> int:
        return self.embedding_dim * self.roi_grid * self.roi_grid

    @property
    def components(self) -> str:
        enabled = [name for name, flag in (("AA", self.use_aa), ("ES", self.use_es), ("CR", self.use_cr)) if flag]
        return "+".join(enabled) if enabled else "Baseline"


class EvalConfig(BaseModel):
    """Evaluation and ablation settings"""

    model_config = {"extra": "forbid"}

    k: int = Field(default=5, ge=2)
    match_tolerance: Optional[float] = Field(
        default=None, gt=0.0, description="center-distance tolerance; defaults to 2 x object radius"
    )
    match_mode: Literal["center", "iou"] = "center"
    iou_threshold: float = Field(default=0.5, gt=0.0, le=1.0)
    score_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    ap_floor: float = Field(default=0.01, ge=0.0, le=1.0)
    nms_radius: float = Field(default=6.0, gt=0.0)
    n_jobs: int = Field(default=1, ge=1)
    render: int = Field(default=0, ge=0)

    def tolerance(self, object_radius: float) -> float:
        return self.match_tolerance if self.match_tolerance is not None else 2.0 * object_radius


@dataclass
class ModelParams:
    """
    Linear heads of the desk-scale detector.

    proj_w/proj_b map patch descriptors to D-dim cell embeddings; obj_* scores
    a cell from its embedding; merged_* scores the embedding concatenated with
    the context reference; off_* regresses the (dx, dy) offset in cell units.
    """

    proj_w: np.ndarray
    proj_b: np.ndarray
    obj_w: np.ndarray
    obj_b: np.ndarray
    merged_w: np.ndarray
    merged_b: np.ndarray
    off_w: np.ndarray
    off_b: np.ndarray

    BLOCKS = ("proj_w", "proj_b", "obj_w", "obj_b", "merged_w", "merged_b", "off_w", "off_b")

    @classmethod
    def initialize(cls, config: TrainConfig, rng: np.random.Generator) -> "ModelParams":
        d, dc = config.embedding_dim, config.context_dim
        scale = config.init_scale
        # both scorers start at the objectness prior instead of 0.5
        prior_logit = -np.log((1.0 - config.prior_probability) / config.prior_probability)
        return cls(
            proj_w=rng.normal(0.0, 1.0, (DESCRIPTOR_SIZE, d)) / np.sqrt(DESCRIPTOR_SIZE),
            proj_b=np.zeros(d),
            obj_w=rng.normal(0.0, scale, d),
            obj_b=np.full(1, prior_logit),
            merged_w=rng.normal(0.0, scale, d + dc),
            merged_b=np.full(1, prior_logit),
            off_w=rng.normal(0.0, scale, (d, 2)),
            off_b=np.zeros(2),
        )

    @property
    def embedding_dim(self) -> int:
        return self.proj_w.shape[1]

    def blocks(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.BLOCKS}

    def zeros_like(self) -> Dict[str, np.ndarray]:
        return {name: np.zeros_like(value) for name, value in self.blocks().items()}

    def copy(self) -> "ModelParams":
        return ModelParams(**{name: value.copy() for name, value in self.blocks().items()})

    def non_finite_blocks(self) -> List[str]:
        """Names of the blocks holding a NaN or an infinity"""
        return [name for name, value in self.blocks().items() if not np.all(np.isfinite(value))]

    def sgd_step(self, grads: Dict[str, np.ndarray], learning_rate: float) -> "ModelParams":
        """Plain gradient descent on every block"""
        updated = {}
        for name, value in self.blocks().items():
            if grads[name].shape != value.shape:
                raise ArgumentError(
                    f"Gradient for {name} has shape {grads[name].shape}, expected {value.shape}"
                )
            updated[name] = value - learning_rate * grads[name]
        return ModelParams(**updated)

    def to_dict(self) -> dict:
        return {name: value.tolist() for name, value in self.blocks().items()}

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelParams":
        return cls(**{name: np.asarray(payload[name], dtype=np.float64) for name in cls.BLOCKS})


def clip_by_global_norm(
    grads: Dict[str, np.ndarray], max_norm: Optional[float]
) -> Tuple[Dict[str, np.ndarray], float]:
    """
    Rescale all gradient blocks together so their joint L2 norm is at most max_norm.

    Args:
        grads (Dict[str, np.ndarray]): gradient per parameter block
        max_norm (Optional[float]): cap on the joint norm; None returns grads unchanged

    Returns:
        Tuple[Dict[str, np.ndarray], float]: the (possibly rescaled) gradients and the norm before clipping
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or not np.isfinite(norm) or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm
