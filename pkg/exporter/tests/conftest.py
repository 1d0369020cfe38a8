import json
import sys
from pathlib import Path

import pytest

_HERE = Path(__file__).resolve().parent
for candidate in (_HERE.parent / "src", _HERE.parent.parent / "src"):
    if candidate.is_dir() and str(candidate) not in sys.path:
        sys.path.insert(0, str(candidate))


CLASS_NAMES = ("airplane", "helicopter")
MAPPING = {"airplane": 0, "helicopter": 1, "drone": "ood"}


def toy_annotations(num_images=10, drones=True):
    """COCO-style dict: one airplane per image, helicopters on evens,
    drones on multiples of three."""
    images, annotations = [], []
    ann_id = 1
    for i in range(num_images):
        images.append({"id": i, "file_name": f"frame_{i:04d}.png",
                       "width": 640, "height": 480})
        annotations.append({"id": ann_id, "image_id": i, "category_id": 1,
                            "bbox": [40 + 3 * i, 60, 50, 30]})
        ann_id += 1
        if i % 2 == 0:
            annotations.append({"id": ann_id, "image_id": i, "category_id": 2,
                                "bbox": [200, 100 + i, 40, 40]})
            ann_id += 1
        if drones and i % 3 == 0:
            annotations.append({"id": ann_id, "image_id": i, "category_id": 3,
                                "bbox": [400, 200, 25, 25]})
            ann_id += 1
    return {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": 1, "name": "airplane"},
                       {"id": 2, "name": "helicopter"},
                       {"id": 3, "name": "drone"}],
    }


@pytest.fixture
def toy_setup(tmp_path):
    """Annotation file + toy checkpoint + export config on disk."""
    ann_path = tmp_path / "annotations.json"
    ann_path.write_text(json.dumps(toy_annotations()))
    ckpt_path = tmp_path / "toy_checkpoint.json"
    ckpt_path.write_text(json.dumps({"embedding_dim": 32, "seed": 7,
                                     "extras_per_image": 1}))
    config_path = tmp_path / "export.json"
    config_path.write_text(json.dumps({
        "detector": "toy",
        "checkpoint": str(ckpt_path),
        "annotations": str(ann_path),
        "class_names": list(CLASS_NAMES),
        "class_mapping": MAPPING,
        "embedding_dim": 32,
        "split": "open_test",
        "detector_name": "toy-oracle",
        "score_floor": 0.0,
    }))
    return tmp_path, ann_path, ckpt_path, config_path
