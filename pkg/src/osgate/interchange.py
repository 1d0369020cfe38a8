"""On-disk data model for detections, ground truth, density models, and calibration.

Dataset container (version 1) is a directory holding

    manifest.json     UTF-8 JSON with canonical (sorted) key order
    detections.bin    binary record table
    groundtruth.bin   binary record table

Each ``.bin`` file starts with a 16-byte header: magic ``OSGT``
(0x4F 0x53 0x47 0x54), format version as little-endian u32, record count as
little-endian u64.  The payload is a row-major little-endian IEEE-754 float32
array.  Detection rows have ``6 + num_classes + embedding_dim`` columns:

    image index | x_min y_min x_max y_max | detector score | logits... | embedding...

where the detector score column stores -1.0 when the exporter had no native
confidence.  Ground-truth rows have 6 columns: image index, the four box
corners, and the class id (-1.0 is the out-of-distribution sentinel).  Image
ids are strings kept in the manifest's ``image_ids`` table; rows reference
them by index.

All record floats are quantized to float32 at construction time, so a
write/read round trip reproduces records bit-for-bit and two writes of the
same logical content are byte-identical.  Density models, calibration
profiles and joint thresholds are stored as JSON with full float64
round-trip precision.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from ._util import canonical_json
from .errors import (
    CompletenessError,
    DataFormatError,
    SchemaError,
    ValidationError,
)

CONTAINER_VERSION = 1
MODELS_FORMAT_MAJOR = 1
MODELS_FORMAT_MINOR = 0

#: Reserved ground-truth class id marking out-of-distribution objects.
OOD_CLASS_ID = -1

SPLITS = ("train", "val", "closed_test", "open_test")
MODES = ("raw", "pruned", "temp", "pruned_temp")

_MAGIC = b"OSGT"
_HEADER = struct.Struct("<4sIQ")
_MANIFEST_NAME = "manifest.json"
_DETECTIONS_NAME = "detections.bin"
_GROUNDTRUTH_NAME = "groundtruth.bin"
_ABSENT_SCORE = -1.0


def _f32(value: float, what: str) -> float:
    out = float(np.float32(value))
    if not math.isfinite(out):
        raise ValidationError(f"{what} is not finite: {value!r}")
    return out


def _f32_vector(values, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 1:
        raise ValidationError(f"{what} must be a 1-d vector, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{what} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in image pixel coordinates, corner format."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, name, _f32(getattr(self, name), f"box {name}"))
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValidationError(
                f"box corners out of order: ({self.x_min}, {self.y_min}, "
                f"{self.x_max}, {self.y_max})"
            )

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float32)


@dataclass(frozen=True, eq=False)
class DetectionRecord:
    """One predicted box with its class logits and decoder embedding."""

    image_id: str
    box: BoundingBox
    logits: np.ndarray
    embedding: np.ndarray
    detector_score: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "logits", _f32_vector(self.logits, "logits"))
        object.__setattr__(self, "embedding", _f32_vector(self.embedding, "embedding"))
        if self.detector_score is not None:
            score = _f32(self.detector_score, "detector_score")
            if not 0.0 <= score <= 1.0:
                raise ValidationError(f"detector_score outside [0, 1]: {score}")
            object.__setattr__(self, "detector_score", score)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DetectionRecord):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.box == other.box
            and np.array_equal(self.logits, other.logits)
            and np.array_equal(self.embedding, other.embedding)
            and self.detector_score == other.detector_score
        )


@dataclass(frozen=True)
class GroundTruthRecord:
    """One annotated box; class_id -1 marks an out-of-distribution object."""

    image_id: str
    box: BoundingBox
    class_id: int

    def __post_init__(self):
        cid = int(self.class_id)
        if cid != self.class_id or cid < OOD_CLASS_ID:
            raise ValidationError(f"class_id must be an integer >= -1, got {self.class_id!r}")
        object.__setattr__(self, "class_id", cid)


@dataclass(frozen=True)
class DatasetManifest:
    """Dataset-level metadata; the authority for vector dimensions."""

    num_classes: int
    class_names: tuple[str, ...]
    embedding_dim: int
    split: str
    detector_name: str = "unknown"
    spectral_normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.num_classes < 1:
            raise SchemaError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.class_names) != self.num_classes:
            raise SchemaError(
                f"class_names has {len(self.class_names)} entries for "
                f"num_classes={self.num_classes}"
            )
        if self.embedding_dim < 1:
            raise SchemaError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        if self.split not in SPLITS:
            raise SchemaError(f"split must be one of {SPLITS}, got {self.split!r}")


class Dataset(NamedTuple):
    manifest: DatasetManifest
    detections: list[DetectionRecord]
    ground_truth: list[GroundTruthRecord]


@dataclass(frozen=True, eq=False)
class ClassDensityModel:
    """Gaussian mixture for one class; covariances held as lower Cholesky factors."""

    class_id: int
    weights: np.ndarray
    means: np.ndarray
    chol_covariances: np.ndarray
    class_prior: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        c = np.asarray(self.chol_covariances, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "chol_covariances", c)
        self.validate()

    @property
    def k(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def validate(self):
        w, m, c = self.weights, self.means, self.chol_covariances
        if w.ndim != 1 or m.ndim != 2 or c.ndim != 3:
            raise ValidationError("density model arrays have wrong rank")
        k = w.shape[0]
        d = m.shape[1]
        if m.shape[0] != k or c.shape != (k, d, d):
            raise ValidationError("density model array shapes disagree")
        if not (np.isfinite(w).all() and np.isfinite(m).all() and np.isfinite(c).all()):
            raise ValidationError(f"class {self.class_id}: non-finite model parameters")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValidationError(f"class {self.class_id}: weights sum to {w.sum()!r}")
        if (w <= 0).any():
            raise ValidationError(f"class {self.class_id}: non-positive component weight")
        diags = np.diagonal(c, axis1=1, axis2=2)
        if (diags <= 0).any():
            raise ValidationError(
                f"class {self.class_id}: Cholesky factor with non-positive diagonal"
            )
        if not (0.0 < self.class_prior <= 1.0):
            raise ValidationError(f"class {self.class_id}: class_prior {self.class_prior!r}")

    def covariances(self) -> np.ndarray:
        """Dense covariance matrices reconstructed from the stored factors."""
        return np.einsum("kij,klj->kil", self.chol_covariances, self.chol_covariances)


@dataclass(frozen=True)
class CalibrationProfile:
    """Learned temperatures plus the pruning floor applied before scoring."""

    t_model: float = 1.0
    t_gmm: float = 1.0
    prune_threshold: float = 0.2
    mode: str = "pruned_temp"

    def __post_init__(self):
        for name in ("t_model", "t_gmm"):
            value = float(getattr(self, name))
            if not (math.isfinite(value) and value > 0):
                raise ValidationError(f"{name} must be finite and > 0, got {value!r}")
            object.__setattr__(self, name, value)
        if not 0.0 <= self.prune_threshold <= 1.0:
            raise ValidationError(f"prune_threshold outside [0, 1]: {self.prune_threshold!r}")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class ThresholdPolicy:
    soft_quantile: float
    gmm_quantile: float


@dataclass(frozen=True)
class JointThresholds:
    """Acceptance thresholds for the two-signal gate, with their selection policy."""

    tau_soft: float
    tau_gmm: float
    policy: ThresholdPolicy

    def __post_init__(self):
        if not (math.isfinite(self.tau_soft) and math.isfinite(self.tau_gmm)):
            raise ValidationError("joint thresholds must be finite")


@dataclass(frozen=True, eq=False)
class ValidationReference:
    """Validation-split score samples backing the rank-fused joint score."""

    soft_scores: np.ndarray
    entropies: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "soft_scores", np.asarray(self.soft_scores, dtype=np.float64))
        object.__setattr__(self, "entropies", np.asarray(self.entropies, dtype=np.float64))


@dataclass(eq=False)
class ModelBundle:
    """Everything cmd_fit/cmd_calibrate persist: models plus optional calibration."""

    num_classes: int
    embedding_dim: int
    single: tuple[ClassDensityModel, ...]
    multi: tuple[ClassDensityModel, ...]
    profile: CalibrationProfile | None = None
    thresholds: dict[str, JointThresholds] | None = None
    references: dict[str, ValidationReference] | None = None
    fit_summary: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# dataset container


def _write_bin(path: Path, rows: np.ndarray):
    rows = np.ascontiguousarray(rows, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, CONTAINER_VERSION, rows.shape[0]))
        fh.write(rows.tobytes())


def _read_bin(path: Path, stride: int, what: str) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise DataFormatError(f"{what}: file shorter than the 16-byte header")
    magic, version, count = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise DataFormatError(f"{what}: bad magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise DataFormatError(f"{what}: unsupported container version {version}")
    expected = _HEADER.size + count * stride * 4
    if len(data) != expected:
        raise DataFormatError(
            f"{what}: expected {expected} bytes for {count} records, found {len(data)}"
        )
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    return flat.reshape(count, stride).astype(np.float32)


def _first_bad(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask)[0])


def write_dataset(
    manifest: DatasetManifest,
    detections: Sequence[DetectionRecord],
    ground_truth: Sequence[GroundTruthRecord],
    path,
):
    """Write a dataset directory; byte-identical for identical logical content."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    image_ids: dict[str, int] = {}
    for record in list(detections) + list(ground_truth):
        image_ids.setdefault(record.image_id, len(image_ids))

    det_stride = 6 + manifest.num_classes + manifest.embedding_dim
    det_rows = np.zeros((len(detections), det_stride), dtype=np.float32)
    for i, det in enumerate(detections):
        if det.logits.shape[0] != manifest.num_classes:
            raise SchemaError(
                f"detection {i}: logits length {det.logits.shape[0]} != "
                f"num_classes {manifest.num_classes}"
            )
        if det.embedding.shape[0] != manifest.embedding_dim:
            raise SchemaError(
                f"detection {i}: embedding length {det.embedding.shape[0]} != "
                f"embedding_dim {manifest.embedding_dim}"
            )
        score = _ABSENT_SCORE if det.detector_score is None else det.detector_score
        det_rows[i, 0] = image_ids[det.image_id]
        det_rows[i, 1:5] = det.box.as_array()
        det_rows[i, 5] = score
        det_rows[i, 6 : 6 + manifest.num_classes] = det.logits
        det_rows[i, 6 + manifest.num_classes :] = det.embedding

    gt_rows = np.zeros((len(ground_truth), 6), dtype=np.float32)
    for i, gt in enumerate(ground_truth):
        if not (gt.class_id == OOD_CLASS_ID or 0 <= gt.class_id < manifest.num_classes):
            raise SchemaError(
                f"ground truth {i}: class_id {gt.class_id} outside "
                f"[0, {manifest.num_classes}) and not the OOD sentinel"
            )
        gt_rows[i, 0] = image_ids[gt.image_id]
        gt_rows[i, 1:5] = gt.box.as_array()
        gt_rows[i, 5] = gt.class_id

    manifest_obj = {
        "container_version": CONTAINER_VERSION,
        "num_classes": manifest.num_classes,
        "class_names": list(manifest.class_names),
        "embedding_dim": manifest.embedding_dim,
        "split": manifest.split,
        "detector_name": manifest.detector_name,
        "spectral_normalized": manifest.spectral_normalized,
        "image_ids": list(image_ids),
    }
    (path / _MANIFEST_NAME).write_text(canonical_json(manifest_obj), encoding="utf-8")
    _write_bin(path / _DETECTIONS_NAME, det_rows)
    _write_bin(path / _GROUNDTRUTH_NAME, gt_rows)


_REQUIRED_MANIFEST_KEYS = (
    "container_version",
    "num_classes",
    "class_names",
    "embedding_dim",
    "split",
    "detector_name",
    "spectral_normalized",
    "image_ids",
)

#: Feature names this reader understands; a manifest listing anything else in
#: ``required_features`` is rejected, while unknown plain keys are ignored.
_SUPPORTED_FEATURES: frozenset[str] = frozenset()


def _load_manifest(path: Path) -> tuple[DatasetManifest, list[str]]:
    try:
        raw = json.loads((path / _MANIFEST_NAME).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"manifest.json unreadable: {exc}") from exc
    if not isinstance(raw, dict):
        raise DataFormatError("manifest.json is not a JSON object")
    missing = [key for key in _REQUIRED_MANIFEST_KEYS if key not in raw]
    if missing:
        raise SchemaError(f"manifest.json missing required keys: {missing}")
    if raw["container_version"] != CONTAINER_VERSION:
        raise DataFormatError(
            f"unsupported container version {raw['container_version']!r}"
        )
    unsupported = [
        feature for feature in raw.get("required_features", []) if feature not in _SUPPORTED_FEATURES
    ]
    if unsupported:
        raise SchemaError(f"manifest requires unsupported features: {unsupported}")
    manifest = DatasetManifest(
        num_classes=int(raw["num_classes"]),
        class_names=tuple(raw["class_names"]),
        embedding_dim=int(raw["embedding_dim"]),
        split=str(raw["split"]),
        detector_name=str(raw["detector_name"]),
        spectral_normalized=bool(raw["spectral_normalized"]),
    )
    image_ids = [str(name) for name in raw["image_ids"]]
    return manifest, image_ids


def read_dataset(path) -> Dataset:
    """Inverse of :func:`write_dataset`; validates every invariant on load."""
    path = Path(path)
    manifest, image_ids = _load_manifest(path)
    n_images = len(image_ids)

    det_stride = 6 + manifest.num_classes + manifest.embedding_dim
    det_rows = _read_bin(path / _DETECTIONS_NAME, det_stride, "detections.bin")
    gt_rows = _read_bin(path / _GROUNDTRUTH_NAME, 6, "groundtruth.bin")

    def check(rows: np.ndarray, mask: np.ndarray, what: str, problem: str):
        if mask.any():
            raise ValidationError(f"{what} record {_first_bad(mask)}: {problem}")

    if det_rows.shape[0]:
        check(det_rows, ~np.isfinite(det_rows).all(axis=1), "detection", "non-finite value")
        idx = det_rows[:, 0]
        check(det_rows, (idx != np.round(idx)) | (idx < 0) | (idx >= n_images),
              "detection", "image index out of range")
        check(det_rows, (det_rows[:, 3] < det_rows[:, 1]) | (det_rows[:, 4] < det_rows[:, 2]),
              "detection", "box corners out of order")
        score = det_rows[:, 5]
        check(det_rows, ~((score == _ABSENT_SCORE) | ((score >= 0.0) & (score <= 1.0))),
              "detection", "detector score outside [0, 1]")
    if gt_rows.shape[0]:
        check(gt_rows, ~np.isfinite(gt_rows).all(axis=1), "ground truth", "non-finite value")
        idx = gt_rows[:, 0]
        check(gt_rows, (idx != np.round(idx)) | (idx < 0) | (idx >= n_images),
              "ground truth", "image index out of range")
        check(gt_rows, (gt_rows[:, 3] < gt_rows[:, 1]) | (gt_rows[:, 4] < gt_rows[:, 2]),
              "ground truth", "box corners out of order")
        cls = gt_rows[:, 5]
        check(gt_rows, (cls != np.round(cls)) | ((cls != OOD_CLASS_ID) &
              ((cls < 0) | (cls >= manifest.num_classes))),
              "ground truth", "class id out of range")

    detections = []
    for row in det_rows:
        score = float(row[5])
        detections.append(
            DetectionRecord(
                image_id=image_ids[int(row[0])],
                box=BoundingBox(*(float(v) for v in row[1:5])),
                logits=row[6 : 6 + manifest.num_classes].copy(),
                embedding=row[6 + manifest.num_classes :].copy(),
                detector_score=None if score == _ABSENT_SCORE else score,
            )
        )
    ground_truth = [
        GroundTruthRecord(
            image_id=image_ids[int(row[0])],
            box=BoundingBox(*(float(v) for v in row[1:5])),
            class_id=int(row[5]),
        )
        for row in gt_rows
    ]
    return Dataset(manifest, detections, ground_truth)


# ---------------------------------------------------------------------------
# model bundle (JSON)


def _model_to_json(model: ClassDensityModel) -> dict:
    return {
        "class_id": model.class_id,
        "k": model.k,
        "weights": model.weights.tolist(),
        "means": model.means.tolist(),
        "chol_covariances": model.chol_covariances.tolist(),
        "class_prior": model.class_prior,
        "metadata": model.metadata,
    }


def _model_from_json(obj: dict) -> ClassDensityModel:
    return ClassDensityModel(
        class_id=int(obj["class_id"]),
        weights=np.asarray(obj["weights"], dtype=np.float64),
        means=np.asarray(obj["means"], dtype=np.float64),
        chol_covariances=np.asarray(obj["chol_covariances"], dtype=np.float64),
        class_prior=float(obj["class_prior"]),
        metadata=dict(obj.get("metadata", {})),
    )


def _check_model_set(models: Sequence[ClassDensityModel], num_classes: int, what: str):
    covered = sorted(model.class_id for model in models)
    if covered != list(range(num_classes)):
        raise CompletenessError(
            f"{what} models cover classes {covered}, expected 0..{num_classes - 1}"
        )
    total = sum(model.class_prior for model in models)
    if abs(total - 1.0) > 1e-9:
        raise ValidationError(f"{what} class priors sum to {total!r}")


def save_models(bundle: ModelBundle, path):
    """Persist a model bundle as one JSON file with exact float round trip."""
    _check_model_set(bundle.single, bundle.num_classes, "single")
    _check_model_set(bundle.multi, bundle.num_classes, "multi")
    obj = {
        "format": {"name": "osgate-models", "major": MODELS_FORMAT_MAJOR,
                   "minor": MODELS_FORMAT_MINOR},
        "num_classes": bundle.num_classes,
        "embedding_dim": bundle.embedding_dim,
        "single": [_model_to_json(m) for m in sorted(bundle.single, key=lambda m: m.class_id)],
        "multi": [_model_to_json(m) for m in sorted(bundle.multi, key=lambda m: m.class_id)],
        "profile": None,
        "thresholds": None,
        "references": None,
        "fit_summary": bundle.fit_summary,
    }
    if bundle.profile is not None:
        obj["profile"] = {
            "t_model": bundle.profile.t_model,
            "t_gmm": bundle.profile.t_gmm,
            "prune_threshold": bundle.profile.prune_threshold,
            "mode": bundle.profile.mode,
        }
    if bundle.thresholds is not None:
        obj["thresholds"] = {
            mode: {
                "tau_soft": thr.tau_soft,
                "tau_gmm": thr.tau_gmm,
                "soft_quantile": thr.policy.soft_quantile,
                "gmm_quantile": thr.policy.gmm_quantile,
            }
            for mode, thr in sorted(bundle.thresholds.items())
        }
    if bundle.references is not None:
        obj["references"] = {
            mode: {
                "soft_scores": ref.soft_scores.tolist(),
                "entropies": ref.entropies.tolist(),
            }
            for mode, ref in sorted(bundle.references.items())
        }
    Path(path).write_text(canonical_json(obj), encoding="utf-8")


def load_models(path) -> ModelBundle:
    """Load a bundle; unknown optional keys from newer minor versions are ignored."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"model file unreadable: {exc}") from exc
    fmt = raw.get("format", {})
    if fmt.get("name") != "osgate-models" or fmt.get("major") != MODELS_FORMAT_MAJOR:
        raise DataFormatError(f"unsupported model file format: {fmt!r}")
    num_classes = int(raw["num_classes"])
    single = tuple(_model_from_json(m) for m in raw["single"])
    multi = tuple(_model_from_json(m) for m in raw["multi"])
    _check_model_set(single, num_classes, "single")
    _check_model_set(multi, num_classes, "multi")
    profile = None
    if raw.get("profile") is not None:
        p = raw["profile"]
        profile = CalibrationProfile(
            t_model=float(p["t_model"]),
            t_gmm=float(p["t_gmm"]),
            prune_threshold=float(p["prune_threshold"]),
            mode=str(p["mode"]),
        )
    thresholds = None
    if raw.get("thresholds") is not None:
        thresholds = {
            mode: JointThresholds(
                tau_soft=float(t["tau_soft"]),
                tau_gmm=float(t["tau_gmm"]),
                policy=ThresholdPolicy(float(t["soft_quantile"]), float(t["gmm_quantile"])),
            )
            for mode, t in raw["thresholds"].items()
        }
    references = None
    if raw.get("references") is not None:
        references = {
            mode: ValidationReference(
                soft_scores=np.asarray(r["soft_scores"], dtype=np.float64),
                entropies=np.asarray(r["entropies"], dtype=np.float64),
            )
            for mode, r in raw["references"].items()
        }
    return ModelBundle(
        num_classes=num_classes,
        embedding_dim=int(raw["embedding_dim"]),
        single=single,
        multi=multi,
        profile=profile,
        thresholds=thresholds,
        references=references,
        fit_summary=dict(raw.get("fit_summary", {})),
    )
