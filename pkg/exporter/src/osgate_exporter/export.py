"""Run a detector over an annotation set and write an osgate container."""
from dataclasses import dataclass

import numpy as np

from .coco import annotated_categories, load_annotations
from .config import ExportConfig, OOD_MAPPING
from .container import ABSENT_SCORE, OOD_CLASS_ID, VERSION, write_container
from .detectors import build_detector
from .errors import DetectorError, MappingError


@dataclass(frozen=True)
class ExportStats:
    images: int
    detections: int
    ground_truth: int
    skipped_low_score: int


def run_export(config: ExportConfig, out_dir) -> ExportStats:
    """Export one split.  Raises before writing anything on a bad mapping or a
    wrong-dimensional embedding tap."""
    entries = load_annotations(config.annotations)

    unmapped = sorted(annotated_categories(entries) - set(config.class_mapping))
    if unmapped:
        raise MappingError(f"annotation classes missing from class_mapping: {unmapped}")

    detector = build_detector(config)
    if getattr(detector, "embedding_dim", config.embedding_dim) != config.embedding_dim:
        raise DetectorError(
            f"embedding tap {config.embedding_tap!r} yields dimension "
            f"{detector.embedding_dim}, config expects {config.embedding_dim}"
        )

    num_classes = len(config.class_names)
    det_stride = 6 + num_classes + config.embedding_dim
    image_indices: dict[str, int] = {}
    det_rows, gt_rows = [], []
    skipped = 0

    for entry in entries:
        image_index = image_indices.setdefault(entry.image_id, len(image_indices))
        for det in detector.detect(entry):
            logits = np.asarray(det.logits, dtype=np.float32)
            embedding = np.asarray(det.embedding, dtype=np.float32)
            if logits.shape != (num_classes,):
                raise DetectorError(
                    f"detector emitted logits of shape {logits.shape}, "
                    f"expected ({num_classes},)")
            if embedding.shape != (config.embedding_dim,):
                raise DetectorError(
                    f"embedding tap {config.embedding_tap!r} yields shape "
                    f"{embedding.shape}, expected ({config.embedding_dim},)")
            if det.score < config.score_floor:
                skipped += 1
                continue
            row = np.empty(det_stride, dtype=np.float32)
            row[0] = image_index
            row[1:5] = det.box
            row[5] = ABSENT_SCORE if det.score is None else det.score
            row[6:6 + num_classes] = logits
            row[6 + num_classes:] = embedding
            det_rows.append(row)
        for ann in entry.annotations:
            target = config.class_mapping[ann.category]
            class_id = OOD_CLASS_ID if target == OOD_MAPPING else int(target)
            gt_rows.append(np.array(
                [image_index, *ann.box, class_id], dtype=np.float32))

    manifest = {
        "container_version": VERSION,
        "num_classes": num_classes,
        "class_names": list(config.class_names),
        "embedding_dim": config.embedding_dim,
        "split": config.split,
        "detector_name": config.detector_name or config.detector,
        "spectral_normalized": config.spectral_normalized,
        "image_ids": list(image_indices),
        # optional extension keys; readers ignore what they do not know
        "embedding_tap": config.embedding_tap,
        "score_floor": config.score_floor,
    }
    det_table = np.stack(det_rows) if det_rows else np.zeros((0, det_stride),
                                                             dtype=np.float32)
    gt_table = np.stack(gt_rows) if gt_rows else np.zeros((0, 6), dtype=np.float32)
    write_container(out_dir, manifest, det_table, gt_table)
    return ExportStats(
        images=len(entries),
        detections=len(det_rows),
        ground_truth=len(gt_rows),
        skipped_low_score=skipped,
    )
