"""Detector adapters.

An adapter is any object with ``embedding_dim``, ``num_classes`` and a
``detect(image: ImageEntry) -> list[RawDetection]`` method emitting logits in
manifest class order.  Adapters are named either by a builtin registry key or
by a ``module:attribute`` plugin path whose attribute is called as
``factory(config) -> adapter``, so torch/tensorflow detectors can be wired in
without this package importing them.

The builtin ``toy`` adapter is a deterministic test double: its "checkpoint"
is a small JSON of simulation parameters and its detections are derived from
the image's own annotations (jittered boxes, class-peaked logits, Gaussian
embeddings) plus a few low-confidence extras, which is enough to exercise the
full container contract.
"""
import hashlib
import importlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coco import ImageEntry
from .config import ExportConfig, OOD_MAPPING
from .errors import DetectorError


@dataclass(frozen=True)
class RawDetection:
    box: tuple[float, float, float, float]  # corner format
    logits: np.ndarray
    embedding: np.ndarray
    score: float


def _stable_stream(seed: int, image_id: str) -> np.random.Generator:
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


class ToyDetector:
    """Annotation-driven fake detector for contract tests and demos."""

    def __init__(self, config: ExportConfig):
        try:
            params = json.loads(Path(config.checkpoint).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DetectorError(f"checkpoint unreadable: {exc}") from exc
        self.num_classes = len(config.class_names)
        self.embedding_dim = int(params.get("embedding_dim", config.embedding_dim))
        self.seed = int(params.get("seed", 0))
        self.box_noise = float(params.get("box_noise", 0.03))
        self.logit_scale = float(params.get("logit_scale", 4.0))
        self.extras_per_image = int(params.get("extras_per_image", 1))
        self._mapping = config.class_mapping

    def detect(self, image: ImageEntry) -> list[RawDetection]:
        rng = _stable_stream(self.seed, image.image_id)
        out = []
        for ann in image.annotations:
            x0, y0, x1, y1 = ann.box
            w, h = max(x1 - x0, 1e-3), max(y1 - y0, 1e-3)
            jitter = rng.uniform(-self.box_noise, self.box_noise, 4)
            box = (x0 + jitter[0] * w, y0 + jitter[1] * h,
                   max(x1 + jitter[2] * w, x0 + jitter[0] * w + 1e-3),
                   max(y1 + jitter[3] * h, y0 + jitter[1] * h + 1e-3))
            target = self._mapping.get(ann.category)
            logits = rng.standard_normal(self.num_classes)
            if target != OOD_MAPPING and target is not None:
                logits[int(target)] += self.logit_scale
            embedding = rng.standard_normal(self.embedding_dim)
            if target != OOD_MAPPING and target is not None:
                embedding[int(target) % self.embedding_dim] += 4.0
            out.append(RawDetection(box, logits, embedding, _conf(logits)))
        for _ in range(self.extras_per_image):
            cx = rng.uniform(0, max(image.width, 64.0))
            cy = rng.uniform(0, max(image.height, 64.0))
            size = rng.uniform(4.0, 16.0)
            logits = 0.1 * rng.standard_normal(self.num_classes)
            out.append(RawDetection(
                (cx, cy, cx + size, cy + size), logits,
                rng.standard_normal(self.embedding_dim) * 3.0, _conf(logits)))
        return out


def _conf(logits: np.ndarray) -> float:
    e = np.exp(logits - logits.max())
    return float(e.max() / e.sum())


_BUILTIN = {"toy": ToyDetector}


def build_detector(config: ExportConfig):
    if config.detector in _BUILTIN:
        return _BUILTIN[config.detector](config)
    if ":" in config.detector:
        module_name, attr = config.detector.split(":", 1)
        try:
            factory = getattr(importlib.import_module(module_name), attr)
        except (ImportError, AttributeError) as exc:
            raise DetectorError(f"cannot load detector {config.detector!r}: {exc}") \
                from exc
        return factory(config)
    raise DetectorError(
        f"unknown detector {config.detector!r}; use one of {sorted(_BUILTIN)} "
        "or a module:attribute plugin path"
    )
