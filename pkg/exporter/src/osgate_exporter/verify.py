"""Container verification: counts, per-class totals, dimension, checksum."""
import hashlib
from pathlib import Path

import numpy as np

from .container import OOD_CLASS_ID, check_invariants, read_container


def container_checksum(path) -> str:
    digest = hashlib.sha256()
    for name in ("manifest.json", "detections.bin", "groundtruth.bin"):
        digest.update(name.encode("utf-8"))
        digest.update((Path(path) / name).read_bytes())
    return digest.hexdigest()


def run_verify(path, out=print) -> int:
    """Print a summary; return 0, or nonzero when any invariant fails."""
    try:
        manifest, det_rows, gt_rows = read_container(path)
        check_invariants(manifest, det_rows, gt_rows)
    except Exception as exc:  # summarized, not re-raised: this is a CLI check
        out(f"INVALID: {exc}")
        return 1
    out(f"split: {manifest['split']}")
    out(f"detector: {manifest['detector_name']} "
        f"(spectral_normalized={manifest['spectral_normalized']})")
    out(f"images: {len(manifest['image_ids'])}")
    out(f"detections: {det_rows.shape[0]}")
    out(f"ground truth: {gt_rows.shape[0]}")
    out(f"embedding_dim: {manifest['embedding_dim']}")
    if gt_rows.shape[0]:
        classes = gt_rows[:, 5].astype(int)
        for class_id in sorted(set(classes.tolist())):
            name = ("<ood>" if class_id == OOD_CLASS_ID
                    else manifest["class_names"][class_id])
            out(f"  class {class_id} ({name}): {int((classes == class_id).sum())}")
    out(f"checksum: {container_checksum(path)}")
    return 0
