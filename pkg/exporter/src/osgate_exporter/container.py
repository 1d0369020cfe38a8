"""Standalone writer/reader for the osgate dataset container.

Implemented against the published byte layout rather than the osgate package,
so the exporter can live in a detector environment without pulling in the
scoring stack: directory of ``manifest.json`` (canonical-key JSON) plus
``detections.bin`` / ``groundtruth.bin``, each a 16-byte header (magic
``OSGT``, version u32 LE, record count u64 LE) followed by row-major
little-endian float32 rows.  Detection rows are ``image_index, box corners,
detector score (-1 = absent), logits, embedding``; ground-truth rows are
``image_index, box corners, class id`` with -1 as the OOD sentinel.
"""
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContainerError

MAGIC = b"OSGT"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
ABSENT_SCORE = -1.0
OOD_CLASS_ID = -1


def write_bin(path: Path, rows: np.ndarray):
    rows = np.ascontiguousarray(rows, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rows.shape[0]))
        fh.write(rows.tobytes())


def read_bin(path: Path, stride: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ContainerError(f"{path.name}: shorter than the 16-byte header")
    magic, version, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError(f"{path.name}: bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"{path.name}: unsupported version {version}")
    if len(data) != _HEADER.size + count * stride * 4:
        raise ContainerError(f"{path.name}: truncated or trailing bytes")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size) \
        .reshape(count, stride).astype(np.float32)


def write_container(path, manifest: dict, det_rows: np.ndarray, gt_rows: np.ndarray):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    text = json.dumps(manifest, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    (path / "manifest.json").write_text(text, encoding="utf-8")
    write_bin(path / "detections.bin", det_rows)
    write_bin(path / "groundtruth.bin", gt_rows)


def read_container(path):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ContainerError(f"manifest.json unreadable: {exc}") from exc
    stride = 6 + int(manifest["num_classes"]) + int(manifest["embedding_dim"])
    det_rows = read_bin(path / "detections.bin", stride)
    gt_rows = read_bin(path / "groundtruth.bin", 6)
    return manifest, det_rows, gt_rows


def check_invariants(manifest: dict, det_rows: np.ndarray, gt_rows: np.ndarray):
    """Raise ContainerError naming the first offending record, if any."""
    n_images = len(manifest["image_ids"])
    num_classes = int(manifest["num_classes"])
    if len(manifest["class_names"]) != num_classes:
        raise ContainerError("manifest class_names length disagrees with num_classes")

    def first_bad(mask, what, problem):
        if mask.any():
            index = int(np.flatnonzero(mask)[0])
            raise ContainerError(f"{what} record {index}: {problem}")

    if det_rows.shape[0]:
        first_bad(~np.isfinite(det_rows).all(axis=1), "detection", "non-finite value")
        idx = det_rows[:, 0]
        first_bad((idx != np.round(idx)) | (idx < 0) | (idx >= n_images),
                  "detection", "image index out of range")
        first_bad((det_rows[:, 3] < det_rows[:, 1]) | (det_rows[:, 4] < det_rows[:, 2]),
                  "detection", "box corners out of order")
        score = det_rows[:, 5]
        first_bad(~((score == ABSENT_SCORE) | ((score >= 0) & (score <= 1))),
                  "detection", "detector score outside [0, 1]")
    if gt_rows.shape[0]:
        first_bad(~np.isfinite(gt_rows).all(axis=1), "ground truth", "non-finite value")
        idx = gt_rows[:, 0]
        first_bad((idx != np.round(idx)) | (idx < 0) | (idx >= n_images),
                  "ground truth", "image index out of range")
        first_bad((gt_rows[:, 3] < gt_rows[:, 1]) | (gt_rows[:, 4] < gt_rows[:, 2]),
                  "ground truth", "box corners out of order")
        cls = gt_rows[:, 5]
        first_bad((cls != np.round(cls)) | ((cls != OOD_CLASS_ID) &
                  ((cls < 0) | (cls >= num_classes))),
                  "ground truth", "class id out of range")
