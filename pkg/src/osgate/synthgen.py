"""Seeded synthetic open-set detection datasets plus brute-force metric oracles.

Embeddings for each in-distribution class are drawn from a unit-variance
Gaussian around a class mean; means sit on scaled coordinate axes so every
pair of classes is exactly ``separation`` standard deviations apart.  The
out-of-distribution cluster lives on an unused axis ``ood_offset`` away from
the origin.  Logits are ``logit_scale * onehot(class) + logit_noise * eta``,
which makes the Bayes-calibrated softmax temperature exactly
``logit_noise**2 / logit_scale``: temperature learning has a known optimum to
recover.  Background detections carry broad unclustered embeddings and
near-uniform logits; optional "junk" detections sit on ground-truth boxes but
carry background-style logits and embeddings, mimicking low-confidence failed
predictions.

Boxes are placed on a per-image grid of disjoint cells, so detections overlap
their own ground truth (jittered copies) and nothing else; backgrounds occupy
cells of their own and never reach the match floor.  Everything is
deterministic given the spec seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .interchange import (
    BoundingBox,
    Dataset,
    DatasetManifest,
    DetectionRecord,
    GroundTruthRecord,
    OOD_CLASS_ID,
)

_SPLIT_STREAMS = {"train": 0, "val": 1, "closed_test": 2, "open_test": 3}


@dataclass(frozen=True)
class SynthSpec:
    """Generator configuration; counts are per split where noted."""

    num_id_classes: int = 2
    train_per_class: int = 2000
    val_per_class: int = 500
    test_per_class: int = 500
    embedding_dim: int = 64
    separation: float = 4.0
    ood_offset: float = 6.0
    ood_spread: float = 1.0
    ood_count: int = 500
    closed_background_count: int = 0
    open_background_count: int = 0
    junk_fraction: float = 0.0
    logit_scale: float = 1.0
    logit_noise: float = 1.0
    ood_logit_scale: float = 0.5
    bg_logit_noise: float = 0.1
    bg_spread: float = 3.0
    image_size: float = 1024.0
    box_size_min: float = 20.0
    box_size_max: float = 80.0
    box_jitter: float = 0.05
    objects_per_image: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.num_id_classes < 1:
            raise ConfigurationError("num_id_classes must be >= 1")
        if self.embedding_dim < self.num_id_classes + 1:
            raise ConfigurationError(
                "embedding_dim must exceed num_id_classes (one axis per class "
                "plus one for the OOD cluster)"
            )
        for name in ("train_per_class", "val_per_class", "test_per_class",
                     "ood_count", "closed_background_count", "open_background_count"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.separation <= 0:
            raise ConfigurationError("separation must be > 0")
        if not 0.0 <= self.junk_fraction < 1.0:
            raise ConfigurationError("junk_fraction must lie in [0, 1)")
        if self.box_size_max < self.box_size_min or self.box_size_min <= 0:
            raise ConfigurationError("box size range is invalid")
        if self.objects_per_image < 1:
            raise ConfigurationError("objects_per_image must be >= 1")

    def class_means(self) -> np.ndarray:
        """(num_id_classes, dim) means with exact pairwise distance ``separation``."""
        means = np.zeros((self.num_id_classes, self.embedding_dim))
        scale = self.separation / math.sqrt(2.0)
        for c in range(self.num_id_classes):
            means[c, c] = scale
        return means

    def ood_mean(self) -> np.ndarray:
        mean = np.zeros(self.embedding_dim)
        mean[self.num_id_classes] = self.ood_offset
        return mean


def _softmax_conf(logits: np.ndarray) -> float:
    e = np.exp(logits - logits.max())
    return float(e.max() / e.sum())


class _ImageLayout:
    """Disjoint grid cells per image; one cell per object or background box."""

    def __init__(self, spec: SynthSpec):
        self.cell = spec.box_size_max * 1.25
        self.per_side = int(spec.image_size // self.cell)
        self.capacity = self.per_side * self.per_side
        if self.capacity < 1:
            raise ConfigurationError("image_size too small for the box size range")

    def place(self, spec: SynthSpec, rng: np.random.Generator, cell_index: int) -> BoundingBox:
        cx = (cell_index % self.per_side) * self.cell
        cy = (cell_index // self.per_side) * self.cell
        w = rng.uniform(spec.box_size_min, spec.box_size_max)
        h = rng.uniform(spec.box_size_min, spec.box_size_max)
        x = cx + rng.uniform(0.0, self.cell - w)
        y = cy + rng.uniform(0.0, self.cell - h)
        return BoundingBox(x, y, x + w, y + h)


def _jittered(box: BoundingBox, spec: SynthSpec, rng: np.random.Generator) -> BoundingBox:
    w = box.x_max - box.x_min
    h = box.y_max - box.y_min
    dx = rng.uniform(-spec.box_jitter, spec.box_jitter, size=4)
    return BoundingBox(
        box.x_min + dx[0] * w,
        box.y_min + dx[1] * h,
        max(box.x_max + dx[2] * w, box.x_min + dx[0] * w + 1e-3),
        max(box.y_max + dx[3] * h, box.y_min + dx[1] * h + 1e-3),
    )


def _generate_split(spec: SynthSpec, split: str, rng: np.random.Generator) -> Dataset:
    num_classes = spec.num_id_classes
    means = spec.class_means()
    ood_mean = spec.ood_mean()
    layout = _ImageLayout(spec)

    per_class = {
        "train": spec.train_per_class,
        "val": spec.val_per_class,
        "closed_test": spec.test_per_class,
        "open_test": spec.test_per_class,
    }[split]
    ood_count = spec.ood_count if split == "open_test" else 0
    background = {
        "closed_test": spec.closed_background_count,
        "open_test": spec.open_background_count,
    }.get(split, 0)
    junk_fraction = spec.junk_fraction if split in ("val", "open_test") else 0.0

    # Object roster: (class_id or sentinel) per object, interleaved by class.
    object_classes = [c for c in range(num_classes) for _ in range(per_class)]
    object_classes += [OOD_CLASS_ID] * ood_count
    order = rng.permutation(len(object_classes))
    object_classes = [object_classes[i] for i in order]

    n_images = max(1, math.ceil(len(object_classes) / spec.objects_per_image)) \
        if (object_classes or background) else 0
    per_image_objects: list[list[int]] = [[] for _ in range(n_images)]
    for idx, _ in enumerate(object_classes):
        per_image_objects[idx // spec.objects_per_image].append(idx)
    per_image_background = [0] * n_images
    for b in range(background):
        per_image_background[b % n_images] += 1

    detections: list[DetectionRecord] = []
    ground_truth: list[GroundTruthRecord] = []
    for img_idx in range(n_images):
        image_id = f"{split}-{img_idx:06d}"
        need = len(per_image_objects[img_idx]) + per_image_background[img_idx]
        if need > layout.capacity:
            raise ConfigurationError(
                f"{need} boxes per image exceed the {layout.capacity}-cell layout"
            )
        cells = rng.permutation(layout.capacity)[:need]
        cursor = 0
        for obj in per_image_objects[img_idx]:
            cls = object_classes[obj]
            gt_box = layout.place(spec, rng, int(cells[cursor]))
            cursor += 1
            ground_truth.append(GroundTruthRecord(image_id, gt_box, cls))

            det_box = _jittered(gt_box, spec, rng)
            is_junk = cls != OOD_CLASS_ID and junk_fraction > 0 \
                and rng.uniform() < junk_fraction
            if is_junk:
                logits = spec.bg_logit_noise * rng.standard_normal(num_classes)
                embedding = spec.bg_spread * rng.standard_normal(spec.embedding_dim)
            elif cls == OOD_CLASS_ID:
                fake = int(rng.integers(num_classes))
                logits = spec.ood_logit_scale * np.eye(num_classes)[fake] \
                    + spec.logit_noise * rng.standard_normal(num_classes)
                embedding = ood_mean + spec.ood_spread * rng.standard_normal(spec.embedding_dim)
            else:
                logits = spec.logit_scale * np.eye(num_classes)[cls] \
                    + spec.logit_noise * rng.standard_normal(num_classes)
                embedding = means[cls] + rng.standard_normal(spec.embedding_dim)
            detections.append(DetectionRecord(
                image_id=image_id,
                box=det_box,
                logits=logits,
                embedding=embedding,
                detector_score=_softmax_conf(logits),
            ))
        for _ in range(per_image_background[img_idx]):
            box = layout.place(spec, rng, int(cells[cursor]))
            cursor += 1
            logits = spec.bg_logit_noise * rng.standard_normal(num_classes)
            embedding = spec.bg_spread * rng.standard_normal(spec.embedding_dim)
            detections.append(DetectionRecord(
                image_id=image_id,
                box=box,
                logits=logits,
                embedding=embedding,
                detector_score=_softmax_conf(logits),
            ))

    manifest = DatasetManifest(
        num_classes=num_classes,
        class_names=tuple(f"class_{c}" for c in range(num_classes)),
        embedding_dim=spec.embedding_dim,
        split=split,
        detector_name="synthgen",
        spectral_normalized=False,
    )
    return Dataset(manifest, detections, ground_truth)


def generate(spec: SynthSpec) -> dict[str, Dataset]:
    """Four interchange datasets keyed train/val/closed_test/open_test."""
    out = {}
    for split, stream in _SPLIT_STREAMS.items():
        rng = np.random.default_rng([spec.seed, stream])
        out[split] = _generate_split(spec, split, rng)
    return out


def oracle_auroc(id_scores, ood_scores) -> float:
    """Exact O(n*m) pair-counting AUROC with half credit for ties.

    Test oracle only; refuses products above 10^6 pairs.
    """
    pos = np.asarray(id_scores, dtype=np.float64)
    neg = np.asarray(ood_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("oracle_auroc needs non-empty score sets")
    if pos.size * neg.size > 10**6:
        raise ValueError("oracle_auroc is capped at 10^6 pairs")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))
