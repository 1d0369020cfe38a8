import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ExporterError

OOD_MAPPING = "ood"


@dataclass(frozen=True)
class ExportConfig:
    """Everything one export run needs.

    ``class_mapping`` sends annotation category names to manifest class ids
    (0-based) or the string "ood" for categories the gate should treat as
    unknown.  ``class_names`` fixes the manifest id order; detector adapters
    emit logits in that order (the detector knows nothing about OOD classes).
    """

    detector: str
    checkpoint: str
    annotations: str
    class_names: tuple[str, ...]
    class_mapping: dict[str, object]
    embedding_dim: int
    split: str = "open_test"
    embedding_tap: str = "decoder.final"
    images_root: str = ""
    batch_size: int = 8
    device: str = "cpu"
    score_floor: float = 0.01
    detector_name: str = ""
    spectral_normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if not self.class_names:
            raise ExporterError("class_names must not be empty")
        if self.embedding_dim < 1:
            raise ExporterError("embedding_dim must be >= 1")
        for category, target in self.class_mapping.items():
            if target == OOD_MAPPING:
                continue
            if not isinstance(target, int) or not 0 <= target < len(self.class_names):
                raise ExporterError(
                    f"mapping for {category!r} must be a class id in "
                    f"[0, {len(self.class_names)}) or {OOD_MAPPING!r}, got {target!r}"
                )

    @classmethod
    def from_json(cls, path) -> "ExportConfig":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            detector=raw["detector"],
            checkpoint=raw["checkpoint"],
            annotations=raw["annotations"],
            class_names=tuple(raw["class_names"]),
            class_mapping=dict(raw["class_mapping"]),
            embedding_dim=int(raw["embedding_dim"]),
            split=raw.get("split", "open_test"),
            embedding_tap=raw.get("embedding_tap", "decoder.final"),
            images_root=raw.get("images_root", ""),
            batch_size=int(raw.get("batch_size", 8)),
            device=raw.get("device", "cpu"),
            score_floor=float(raw.get("score_floor", 0.01)),
            detector_name=raw.get("detector_name", ""),
            spectral_normalized=bool(raw.get("spectral_normalized", False)),
        )
