# Manifest and image IO for detection datasets

import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Union

import numpy as np
from PIL import Image

from backend.analysis.basic_statistics import ImageBuffer
from backend.embedding.context import BBox
from backend.errors import DatasetIOError
from detector.contracts import Annotation, ImageRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Manifest: one JSON object per line, fields in this order. Pixel units,
# origin at the top-left corner; objects are [cx, cy, w, h].
MANIFEST_FIELDS = ("id", "image", "width", "height", "objects", "tier", "seed")


def write_image(path: PathLike, image: ImageBuffer, bit_depth: int = 8) -> None:
    """
    Write a grayscale image; .pgm files become binary P5, other suffixes go through Pillow

    Args:
        path: Destination file
        image (ImageBuffer): Intensities in [0, 1]
        bit_depth (int): 8 or 16
    """
    path = Path(path)
    data = np.clip(image.data, 0.0, 1.0)
    if bit_depth == 8:
        pil = Image.fromarray(np.round(data * 255.0).astype(np.uint8))
    elif bit_depth == 16:
        # 32-bit "I" mode is what Pillow writes as 16-bit P5 and PNG
        pil = Image.fromarray(np.round(data * 65535.0).astype(np.int32))
    else:
        raise DatasetIOError(f"Unsupported bit depth {bit_depth}", str(path))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        pil.save(path, format="PPM" if path.suffix.lower() == ".pgm" else None)
    except OSError as e:
        raise DatasetIOError(f"Failed to write image {path}: {e}", str(path)) from e


def read_image(path: PathLike) -> ImageBuffer:
    """Read a PGM/PNG image into an ImageBuffer scaled to [0, 1]"""
    path = Path(path)
    try:
        with Image.open(path) as pil:
            if pil.mode in ("I", "I;16", "I;16B", "I;16L"):
                data = np.asarray(pil, dtype=np.float64) / 65535.0
            else:
                data = np.asarray(pil.convert("L"), dtype=np.float64) / 255.0
    except OSError as e:
        raise DatasetIOError(f"Failed to read image {path}: {e}", str(path)) from e
    return ImageBuffer.from_array(data)


def record_to_dict(record: ImageRecord, root: Path) -> Dict:
    image_path = Path(record.path)
    try:
        relative = image_path.relative_to(root)
    except ValueError:
        relative = image_path
    return {
        "id": record.image_id,
        "image": relative.as_posix(),
        "width": record.width,
        "height": record.height,
        "objects": [[a.cx, a.cy, a.box.w, a.box.h] for a in record.annotations],
        "tier": record.tier,
        "seed": record.seed,
    }


def record_from_dict(payload: Dict, root: Path) -> ImageRecord:
    annotations = []
    for object_id, (cx, cy, w, h) in enumerate(payload["objects"]):
        annotations.append(
            Annotation(cx=float(cx), cy=float(cy), box=BBox(cx - w / 2.0, cy - h / 2.0, w, h), object_id=object_id)
        )
    return ImageRecord(
        image_id=int(payload["id"]),
        path=str(root / payload["image"]),
        width=int(payload["width"]),
        height=int(payload["height"]),
        annotations=annotations,
        tier=payload.get("tier", "external"),
        seed=payload.get("seed"),
    )


def write_manifest(path: PathLike, records: Iterable[ImageRecord]) -> Path:
    """Write one JSON line per record; image paths are stored relative to the manifest"""
    path = Path(path)
    root = path.parent
    lines = [json.dumps(record_to_dict(r, root)) for r in records]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"Failed to write manifest {path}: {e}", str(path)) from e
    logger.info(f"Wrote manifest with {len(lines)} records to {path}")
    return path


class ManifestLoader:
    """
    Loads manifest records and their images, caching decoded images by path
    """

    def __init__(self, manifest_path: PathLike):
        self.manifest_path = Path(manifest_path)
        self._cache: Dict[str, ImageBuffer] = {}

    def read_records(self) -> List[ImageRecord]:
        """
        Parse the manifest

        Returns:
            List[ImageRecord]: records in file order
        """
        if not self.manifest_path.exists():
            raise DatasetIOError(f"Manifest not found: {self.manifest_path}", str(self.manifest_path))
        root = self.manifest_path.parent
        records = []
        with open(self.manifest_path, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(record_from_dict(json.loads(line), root))
                except (KeyError, ValueError, TypeError) as e:
                    raise DatasetIOError(
                        f"Malformed manifest line {line_number} in {self.manifest_path}: {e}",
                        str(self.manifest_path),
                    ) from e
        for record in records:
            self.validate_record(record)
        return records

    def load_image(self, record: ImageRecord) -> ImageBuffer:
        if record.path not in self._cache:
            image = read_image(record.path)
            if (image.width, image.height) != (record.width, record.height):
                raise DatasetIOError(
                    f"Image {record.path} is {image.width}x{image.height}, manifest says {record.width}x{record.height}",
                    record.path,
                )
            self._cache[record.path] = image
        return self._cache[record.path]

    def validate_record(self, record: ImageRecord) -> bool:
        """Annotation centers must lie inside the image"""
        for ann in record.annotations:
            if not (0 <= ann.cx <= record.width and 0 <= ann.cy <= record.height):
                raise DatasetIOError(
                    f"Record {record.image_id}: object at ({ann.cx}, {ann.cy}) outside the image",
                    record.path,
                )
        return True
