from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from backend.embedding.context import BBox


@dataclass(frozen=True)
class Annotation:
    """
    Ground-truth object: center in pixels and a square box of side 2 * radius
    """

    cx: float
    cy: float
    box: BBox
    object_id: int = 0

    @property
    def center(self) -> Tuple[float, float]:
        return (self.cx, self.cy)

    @property
    def radius(self) -> float:
        return self.box.w / 2.0

    @classmethod
    def from_center(cls, cx: float, cy: float, radius: float, object_id: int = 0) -> "Annotation":
        return cls(cx=cx, cy=cy, box=BBox.around(cx, cy, radius), object_id=object_id)


@dataclass(frozen=True)
class Detection:
    """
    Predicted object with confidence in [0, 1]
    """

    cx: float
    cy: float
    box: BBox
    confidence: float

    @property
    def center(self) -> Tuple[float, float]:
        return (self.cx, self.cy)


@dataclass
class ImageRecord:
    """
    One manifest entry: image location, size, annotations and provenance
    """

    image_id: int
    path: str
    width: int
    height: int
    annotations: List[Annotation]
    tier: str = "external"
    seed: Optional[int] = None


@dataclass
class MatchResult:
    true_positives: int
    false_positives: int
    false_negatives: int
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)


@dataclass
class FoldMetrics:
    fold: int
    map: float
    precision: float
    recall: float
    f1: float
    tier_ap: Dict[str, float] = field(default_factory=dict)
    seed: int = 0


@dataclass
class MetricsReport:
    """
    Per-fold (and per-seed) metrics of one configuration; error is set when the row failed
    """

    name: str
    folds: List[FoldMetrics]
    config_fingerprint: str
    error: Optional[str] = None


@dataclass
class LossBreakdown:
    """The six terms of the total objective and their weighted sum"""

    cls: float = 0.0
    bbox: float = 0.0
    obj: float = 0.0
    cluster: float = 0.0
    stack: float = 0.0
    context: float = 0.0
    total: float = 0.0

    def as_dict(self) -> Dict[str, Any]:
        return {
            "cls": self.cls,
            "bbox": self.bbox,
            "obj": self.obj,
            "cluster": self.cluster,
            "stack": self.stack,
            "context": self.context,
            "total": self.total,
        }
