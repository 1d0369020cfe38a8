import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from osgate.density import DensityEvaluator, FitConfig, fit_gmm_em, fit_single_gaussian
from osgate.interchange import (
    BoundingBox,
    Dataset,
    DatasetManifest,
    DetectionRecord,
    GroundTruthRecord,
)

settings.register_profile(
    "osgate", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("osgate")


def make_manifest(num_classes=2, dim=4, split="train", **kwargs):
    return DatasetManifest(
        num_classes=num_classes,
        class_names=tuple(f"class_{i}" for i in range(num_classes)),
        embedding_dim=dim,
        split=split,
        **kwargs,
    )


def make_detection(image_id="img-0", box=(0, 0, 10, 10), logits=(1.0, 0.0),
                   embedding=None, dim=4, score=None):
    if embedding is None:
        embedding = np.zeros(dim, dtype=np.float32)
    return DetectionRecord(
        image_id=image_id,
        box=BoundingBox(*box),
        logits=np.asarray(logits, dtype=np.float32),
        embedding=np.asarray(embedding, dtype=np.float32),
        detector_score=score,
    )


def make_gt(image_id="img-0", box=(0, 0, 10, 10), class_id=0):
    return GroundTruthRecord(image_id=image_id, box=BoundingBox(*box), class_id=class_id)


@pytest.fixture
def tiny_dataset():
    """Two images, two classes, every detection exactly on its ground truth."""
    manifest = make_manifest(num_classes=2, dim=4)
    detections, ground_truth = [], []
    rng = np.random.default_rng(0)
    for img in range(2):
        for j, cls in enumerate((0, 1)):
            box = (100.0 * j, 0.0, 100.0 * j + 50.0, 50.0)
            emb = rng.standard_normal(4) + (0.0 if cls == 0 else 8.0)
            detections.append(make_detection(f"img-{img}", box, (2.0 - cls, cls - 1.0),
                                             emb, score=0.9))
            ground_truth.append(make_gt(f"img-{img}", box, cls))
    return Dataset(manifest, detections, ground_truth)


@pytest.fixture
def separable_models():
    """Two well-separated 1-d classes: N(0, 1) and N(4, 1), equal priors."""
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((400, 1))
    x1 = 4.0 + rng.standard_normal((400, 1))
    m0 = fit_single_gaussian(x0, 800, class_id=0)
    m1 = fit_single_gaussian(x1, 800, class_id=1)
    return [m0, m1]


def two_cluster_models(dim=4, distance=12.0, n=300, seed=3, k=1):
    """Fitted models for two isotropic clusters a fixed distance apart."""
    rng = np.random.default_rng(seed)
    mu0 = np.zeros(dim)
    mu1 = np.zeros(dim)
    mu1[0] = distance
    x0 = mu0 + rng.standard_normal((n, dim))
    x1 = mu1 + rng.standard_normal((n, dim))
    if k == 1:
        models = [fit_single_gaussian(x0, 2 * n, class_id=0),
                  fit_single_gaussian(x1, 2 * n, class_id=1)]
    else:
        cfg = FitConfig(k=k, seed=seed)
        models = [fit_gmm_em(x0, cfg, total_count=2 * n, class_id=0),
                  fit_gmm_em(x1, cfg, total_count=2 * n, class_id=1)]
    return models, (mu0, mu1)
