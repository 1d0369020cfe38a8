"""Detector-agnostic open-set gating: density models, calibration, evaluation."""

from .interchange import (
    BoundingBox,
    CalibrationProfile,
    ClassDensityModel,
    Dataset,
    DatasetManifest,
    DetectionRecord,
    GroundTruthRecord,
    JointThresholds,
    ModelBundle,
    OOD_CLASS_ID,
    ValidationReference,
    load_models,
    read_dataset,
    save_models,
    write_dataset,
)
from .assignment import (
    MatchResult,
    collect_labeled_embeddings,
    hungarian_assign,
    iou,
    match_image,
)
from .density import (
    DensityEvaluator,
    FitConfig,
    fit_gmm_em,
    fit_single_gaussian,
    gmm_posterior,
    log_gaussian_pdf,
    per_class_loglik,
)
from .scoring import (
    ScoreBundle,
    ScoreTable,
    compute_scores,
    joint_decide,
    joint_fused_score,
    score_gmm_family,
    score_softmax_family,
    softmax,
)
from .calibration import (
    ModeConfig,
    ModeMatrix,
    build_mode_matrix,
    learn_temperature,
    prune,
    select_joint_thresholds,
)
from .metrics import (
    EvaluationReport,
    auroc,
    auroc_protocols,
    evaluate_mode,
    label_detections,
    map_50_95,
    roc_curve,
    tpr_at_osr,
)
from .synthgen import SynthSpec, generate, oracle_auroc

__version__ = "0.1.0"
