"""Minimal COCO-style annotation reading: images, categories, xywh boxes."""
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import AnnotationError


@dataclass(frozen=True)
class Annotation:
    category: str
    # corner format; COCO xywh is converted on load
    box: tuple[float, float, float, float]


@dataclass(frozen=True)
class ImageEntry:
    image_id: str
    file_name: str
    width: float
    height: float
    annotations: tuple[Annotation, ...] = field(default_factory=tuple)


def load_annotations(path) -> list[ImageEntry]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise AnnotationError(f"annotation file unreadable: {exc}") from exc
    for key in ("images", "annotations", "categories"):
        if key not in raw:
            raise AnnotationError(f"annotation file missing {key!r}")

    categories = {c["id"]: c["name"] for c in raw["categories"]}
    per_image: dict[object, list[Annotation]] = {}
    for ann in raw["annotations"]:
        if ann["category_id"] not in categories:
            raise AnnotationError(
                f"annotation {ann.get('id')} references unknown category "
                f"{ann['category_id']}"
            )
        x, y, w, h = ann["bbox"]
        if w < 0 or h < 0:
            raise AnnotationError(f"annotation {ann.get('id')} has negative size")
        per_image.setdefault(ann["image_id"], []).append(
            Annotation(category=categories[ann["category_id"]],
                       box=(x, y, x + w, y + h))
        )

    entries = []
    for image in raw["images"]:
        entries.append(ImageEntry(
            image_id=str(image["id"]),
            file_name=image.get("file_name", ""),
            width=float(image.get("width", 0.0)),
            height=float(image.get("height", 0.0)),
            annotations=tuple(per_image.get(image["id"], ())),
        ))
    return entries


def annotated_categories(entries) -> set[str]:
    return {ann.category for entry in entries for ann in entry.annotations}
