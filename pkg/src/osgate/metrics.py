"""Open-set evaluation metrics and per-mode report assembly.

AUROC is the Mann-Whitney rank statistic P(id > ood) + 0.5 P(id = ood),
exact under ties.  TPR at a given open-set-recognition level a is the
in-distribution acceptance rate at the smallest threshold admitting at most
an ``a`` fraction of OOD scores (acceptance is score >= threshold).  Two
protocols are reported: plain AUROC compares matched-ID against matched-OOD
detections only, while the background variant additionally counts unmatched
detections as OOD errors.  mAP follows the 101-point interpolated convention
averaged over IoU thresholds 0.50:0.05:0.95, greedy-matched by descending
confidence with at most one match per ground-truth box per threshold.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .assignment import group_by_image, iou_matrix, match_image
from .calibration import ModeConfig, prune_mask
from .errors import MetricUndefinedError
from .interchange import (
    Dataset,
    DetectionRecord,
    GroundTruthRecord,
    JointThresholds,
    OOD_CLASS_ID,
    ValidationReference,
)
from .scoring import (
    SCORE_ORIENTATION,
    ScoreTable,
    compute_scores,
    joint_decide_mask,
    joint_fused_score,
)

IOU_THRESHOLDS_50_95 = (0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95)
OSR_LEVELS = (0.05, 0.10, 0.20)

LABEL_ID = 0
LABEL_OOD = 1
LABEL_BACKGROUND = 2


def auroc(id_scores, ood_scores) -> float:
    """Rank-sum AUROC with half credit for ties; exact pair-counting semantics."""
    pos = np.asarray(id_scores, dtype=np.float64)
    neg = np.asarray(ood_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise MetricUndefinedError("auroc needs at least one ID and one OOD score")
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    rank_sum = ranks[: pos.size].sum()
    wins = rank_sum - pos.size * (pos.size + 1) / 2.0
    return float(wins / (pos.size * neg.size))


@dataclass(frozen=True, eq=False)
class RocCurve:
    """Operating points of the score threshold sweep, endpoints included."""

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auroc: float

    def trapezoid_area(self) -> float:
        trapezoid = getattr(np, "trapezoid", np.trapz)
        return float(trapezoid(self.tpr, self.fpr))


def roc_curve(id_scores, ood_scores) -> RocCurve:
    """Full ROC sweep over the unique observed score values."""
    pos = np.asarray(id_scores, dtype=np.float64)
    neg = np.asarray(ood_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise MetricUndefinedError("roc_curve needs at least one ID and one OOD score")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    tpr = [0.0]
    fpr = [0.0]
    for t in thresholds:
        tpr.append(float((pos >= t).mean()))
        fpr.append(float((neg >= t).mean()))
    return RocCurve(
        thresholds=thresholds,
        tpr=np.asarray(tpr),
        fpr=np.asarray(fpr),
        auroc=auroc(pos, neg),
    )


def tpr_at_osr(id_scores, ood_scores, levels: Sequence[float] = OSR_LEVELS) -> dict[float, float]:
    """ID acceptance rate at fixed false-accept budgets on the OOD set.

    For each level ``a`` the threshold is the smallest value such that at most
    ``floor(a * n_ood)`` OOD scores are accepted (score >= threshold); when
    even the top OOD score exceeds the budget the threshold moves strictly
    above it.
    """
    pos = np.asarray(id_scores, dtype=np.float64)
    neg = np.asarray(ood_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise MetricUndefinedError("tpr_at_osr needs at least one ID and one OOD score")
    unique_desc = np.unique(neg)[::-1]
    counts_at_or_above = np.array([(neg >= u).sum() for u in unique_desc])
    out = {}
    for level in levels:
        budget = int(np.floor(level * neg.size))
        admissible = np.flatnonzero(counts_at_or_above <= budget)
        if admissible.size:
            threshold = unique_desc[admissible[-1]]
            out[level] = float((pos >= threshold).mean())
        else:
            out[level] = float((pos > unique_desc[0]).mean())
    return out


@dataclass(frozen=True, eq=False)
class OodLabeling:
    """Mutually exclusive detection labels: matched-ID, matched-OOD, background."""

    labels: np.ndarray

    @property
    def id_mask(self) -> np.ndarray:
        return self.labels == LABEL_ID

    @property
    def ood_mask(self) -> np.ndarray:
        return self.labels == LABEL_OOD

    @property
    def background_mask(self) -> np.ndarray:
        return self.labels == LABEL_BACKGROUND

    def counts(self) -> dict[str, int]:
        return {
            "id_matched": int(self.id_mask.sum()),
            "ood_matched": int(self.ood_mask.sum()),
            "background": int(self.background_mask.sum()),
        }


def label_detections(
    detections: Sequence[DetectionRecord],
    ground_truth: Sequence[GroundTruthRecord],
    match_floor: float = 0.5,
) -> OodLabeling:
    """Assign each detection to ID (matched to a declared class), OOD (matched to
    the sentinel class), or background (unmatched)."""
    labels = np.full(len(detections), LABEL_BACKGROUND, dtype=np.int64)
    det_groups = group_by_image(detections)
    gt_groups = group_by_image(ground_truth)
    for image_id, det_indices in det_groups.items():
        gt_indices = gt_groups.get(image_id, [])
        if not gt_indices:
            continue
        dets = [detections[i] for i in det_indices]
        gts = [ground_truth[i] for i in gt_indices]
        result = match_image(dets, gts, match_floor)
        for det_idx, gt_idx, _ in result.pairs:
            is_ood = gts[gt_idx].class_id == OOD_CLASS_ID
            labels[det_indices[det_idx]] = LABEL_OOD if is_ood else LABEL_ID
    return OodLabeling(labels)


def auroc_protocols(labeling: OodLabeling, scores) -> tuple[float, float]:
    """(auroc, auroc_bd): plain protocol ignores background, _bd counts it as OOD."""
    values = np.asarray(scores, dtype=np.float64)
    id_scores = values[labeling.id_mask]
    ood_scores = values[labeling.ood_mask]
    plain = auroc(id_scores, ood_scores)
    bd = auroc(values[labeling.id_mask], values[labeling.ood_mask | labeling.background_mask])
    return plain, bd


# ---------------------------------------------------------------------------
# mAP 50:95


@dataclass(frozen=True)
class MapResult:
    value: float
    per_class: dict[int, float]
    excluded_classes: tuple[int, ...]


#: The 101 recall sample points of the interpolated-AP convention.
RECALL_SAMPLE_POINTS = tuple(np.arange(101) / 100.0)


def _average_precision(tp_flags: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from confidence-ordered true-positive flags."""
    if n_gt == 0 or tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(1 - tp_flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # Precision envelope from the right, then sample at the 101 recall points.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    indices = np.searchsorted(recall, RECALL_SAMPLE_POINTS, side="left")
    sampled = np.where(indices < recall.size,
                       envelope[np.minimum(indices, recall.size - 1)], 0.0)
    return float(sampled.mean())


def map_50_95(
    detections: Sequence[DetectionRecord],
    ground_truth: Sequence[GroundTruthRecord],
    class_ids: Sequence[int],
    confidence=None,
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS_50_95,
) -> MapResult:
    """COCO-style mAP averaged over classes and IoU thresholds.

    Detections carry their predicted class as the logit argmax; ``confidence``
    defaults to the detector-native score and falls back to the softmax
    confidence.  Ties in confidence break deterministically on the input
    record index.  Classes without ground truth are excluded from the mean
    and reported.
    """
    if confidence is None:
        conf = np.array([
            d.detector_score if d.detector_score is not None
            else float(np.exp(d.logits - d.logits.max()).max()
                       / np.exp(d.logits - d.logits.max()).sum())
            for d in detections
        ])
    else:
        conf = np.asarray(confidence, dtype=np.float64)
        if conf.shape[0] != len(detections):
            raise ValueError("confidence length disagrees with detections")

    pred_class = np.array([int(np.argmax(d.logits)) for d in detections]) \
        if detections else np.zeros(0, dtype=np.int64)

    gt_count = {c: 0 for c in class_ids}
    gt_by_image_class: dict[tuple[str, int], list[int]] = {}
    for gi, gt in enumerate(ground_truth):
        if gt.class_id in gt_count:
            gt_count[gt.class_id] += 1
            gt_by_image_class.setdefault((gt.image_id, gt.class_id), []).append(gi)

    evaluated = [c for c in class_ids if gt_count[c] > 0]
    excluded = tuple(c for c in class_ids if gt_count[c] == 0)
    if not evaluated:
        raise MetricUndefinedError("no evaluated class has ground truth")

    gt_boxes = np.stack([g.box.as_array() for g in ground_truth]) \
        if ground_truth else np.zeros((0, 4))
    per_class: dict[int, float] = {}
    for c in evaluated:
        det_indices = [i for i in range(len(detections)) if pred_class[i] == c]
        det_indices.sort(key=lambda i: (-conf[i], i))
        ap_per_threshold = []
        for threshold in iou_thresholds:
            matched_gt: set[int] = set()
            tp_flags = np.zeros(len(det_indices), dtype=np.int64)
            for rank, i in enumerate(det_indices):
                candidates = gt_by_image_class.get((detections[i].image_id, c), [])
                best_iou, best_gt = 0.0, None
                for gi in candidates:
                    if gi in matched_gt:
                        continue
                    value = float(iou_matrix(
                        detections[i].box.as_array()[None, :], gt_boxes[gi][None, :]
                    )[0, 0])
                    if value > best_iou:
                        best_iou, best_gt = value, gi
                if best_gt is not None and best_iou >= threshold:
                    matched_gt.add(best_gt)
                    tp_flags[rank] = 1
            ap_per_threshold.append(_average_precision(tp_flags, gt_count[c]))
        per_class[c] = float(np.mean(ap_per_threshold))
    return MapResult(
        value=float(np.mean([per_class[c] for c in evaluated])),
        per_class=per_class,
        excluded_classes=excluded,
    )


# ---------------------------------------------------------------------------
# per-mode evaluation


@dataclass(frozen=True)
class EvaluationReport:
    """Self-describing metric row for one (mode, score) pair."""

    mode: str
    score: str
    auroc: float | None
    auroc_bd: float | None
    tpr_at_osr: dict[float, float] | None
    cs_map: float | None
    os_map: float | None
    n_id_matched: int
    n_ood_matched: int
    n_background: int
    absent_reason: str | None
    config: dict = field(default_factory=dict)
    roc_points: list[tuple[float, float]] | None = None

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "score": self.score,
            "auroc": self.auroc,
            "auroc_bd": self.auroc_bd,
            "tpr_at_osr": {f"{k:.2f}": v for k, v in (self.tpr_at_osr or {}).items()} or None,
            "cs_map": self.cs_map,
            "os_map": self.os_map,
            "n_id_matched": self.n_id_matched,
            "n_ood_matched": self.n_ood_matched,
            "n_background": self.n_background,
            "absent_reason": self.absent_reason,
            "config": self.config,
            "roc_points": self.roc_points,
        }


CSV_COLUMNS = (
    "mode", "score", "auroc", "auroc_bd", "tpr_at_5", "tpr_at_10", "tpr_at_20",
    "cs_map", "os_map", "n_id_matched", "n_ood_matched", "n_background",
    "tau_soft", "tau_gmm", "t_model", "t_gmm", "prune_threshold", "match_floor",
    "soft_quantile", "gmm_quantile", "absent_reason",
)


def reports_to_csv(reports: Sequence[EvaluationReport]) -> str:
    """Flat CSV with one row per report; fixed, documented column order."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        tpr = r.tpr_at_osr or {}
        cfg = r.config
        writer.writerow([
            r.mode, r.score,
            "" if r.auroc is None else repr(r.auroc),
            "" if r.auroc_bd is None else repr(r.auroc_bd),
            "" if 0.05 not in tpr else repr(tpr[0.05]),
            "" if 0.10 not in tpr else repr(tpr[0.10]),
            "" if 0.20 not in tpr else repr(tpr[0.20]),
            "" if r.cs_map is None else repr(r.cs_map),
            "" if r.os_map is None else repr(r.os_map),
            r.n_id_matched, r.n_ood_matched, r.n_background,
            cfg.get("tau_soft", ""), cfg.get("tau_gmm", ""),
            cfg.get("t_model", ""), cfg.get("t_gmm", ""),
            cfg.get("prune_threshold", ""), cfg.get("match_floor", ""),
            cfg.get("soft_quantile", ""), cfg.get("gmm_quantile", ""),
            r.absent_reason or "",
        ])
    return buf.getvalue()


def _detection_arrays(detections: Sequence[DetectionRecord]):
    logits = np.stack([d.logits for d in detections]).astype(np.float64)
    embeddings = np.stack([d.embedding for d in detections]).astype(np.float64)
    return logits, embeddings


def _map_confidence(detections, scores: ScoreTable, source: str) -> np.ndarray:
    if source == "softmax":
        return scores.softmax_conf
    native = np.array([
        np.nan if d.detector_score is None else d.detector_score for d in detections
    ])
    return np.where(np.isnan(native), scores.softmax_conf, native)


def evaluate_mode(
    closed_test: Dataset,
    open_test: Dataset,
    single_models,
    multi_models,
    mode: ModeConfig,
    scores: Sequence[str],
    thresholds: JointThresholds | None = None,
    reference: ValidationReference | None = None,
    prune_threshold: float = 0.2,
    match_floor: float = 0.5,
    map_confidence: str = "detector",
    use_priors: bool = True,
    include_roc: bool = False,
) -> list[EvaluationReport]:
    """All requested score reports for one evaluation mode.

    Pruning (when the mode enables it) removes detections with raw softmax
    confidence under ``prune_threshold`` from every downstream computation,
    including mAP.  AUROC family metrics that are undefined on the pruned
    open split are reported as absent with a reason rather than as zeros.
    """
    config_echo = {
        "t_model": mode.t_model,
        "t_gmm": mode.t_gmm,
        "prune": mode.prune,
        "prune_threshold": prune_threshold,
        "match_floor": match_floor,
        "map_confidence": map_confidence,
        "use_priors": use_priors,
    }
    if thresholds is not None:
        config_echo["tau_soft"] = thresholds.tau_soft
        config_echo["tau_gmm"] = thresholds.tau_gmm
        config_echo["soft_quantile"] = thresholds.policy.soft_quantile
        config_echo["gmm_quantile"] = thresholds.policy.gmm_quantile

    def mode_view(dataset: Dataset):
        dets = dataset.detections
        if not dets:
            return [], None
        logits, embeddings = _detection_arrays(dets)
        if mode.prune:
            # Pruning always uses the untempered confidence, regardless of mode.
            shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
            raw_conf = shifted.max(axis=1) / shifted.sum(axis=1)
            keep = prune_mask(raw_conf, prune_threshold)
            dets = [d for d, k in zip(dets, keep) if k]
            if not dets:
                return [], None
            logits, embeddings = logits[keep], embeddings[keep]
        table = compute_scores(
            logits, embeddings, single_models, multi_models,
            t_model=mode.t_model, t_gmm=mode.t_gmm, use_priors=use_priors,
        )
        return dets, table

    closed_dets, closed_scores = mode_view(closed_test)
    open_dets, open_scores = mode_view(open_test)

    class_ids = range(closed_test.manifest.num_classes)
    cs_map = os_map = None
    try:
        cs_map = map_50_95(
            closed_dets, closed_test.ground_truth, class_ids,
            confidence=None if closed_scores is None
            else _map_confidence(closed_dets, closed_scores, map_confidence),
        ).value
    except MetricUndefinedError:
        cs_map = None
    id_open_gt = [g for g in open_test.ground_truth if g.class_id != OOD_CLASS_ID]
    try:
        os_map = map_50_95(
            open_dets, id_open_gt, class_ids,
            confidence=None if open_scores is None
            else _map_confidence(open_dets, open_scores, map_confidence),
        ).value
    except MetricUndefinedError:
        os_map = None

    labeling = label_detections(open_dets, open_test.ground_truth, match_floor)
    counts = labeling.counts()

    reports = []
    for score_name in scores:
        if score_name not in SCORE_ORIENTATION:
            raise KeyError(f"unknown score {score_name!r}")
        absent_reason = None
        plain = bd = None
        tpr = None
        roc_points = None
        if open_scores is None or counts["id_matched"] == 0 or counts["ood_matched"] == 0:
            absent_reason = (
                "open split has no scored detections" if open_scores is None else
                "open split lacks matched ID detections" if counts["id_matched"] == 0
                else "open split lacks matched OOD (sentinel) detections"
            )
        else:
            if score_name == "joint_fused":
                if reference is None:
                    absent_reason = "joint_fused requires a validation reference"
                else:
                    oriented = np.asarray(joint_fused_score(
                        open_scores.softmax_conf,
                        open_scores.gmm_posterior_entropy,
                        reference,
                    ))
            else:
                oriented = SCORE_ORIENTATION[score_name] * open_scores.column(score_name)
            if absent_reason is None:
                plain, bd = auroc_protocols(labeling, oriented)
                tpr = tpr_at_osr(oriented[labeling.id_mask], oriented[labeling.ood_mask])
                if include_roc:
                    curve = roc_curve(oriented[labeling.id_mask], oriented[labeling.ood_mask])
                    roc_points = [
                        (float(f), float(t)) for f, t in zip(curve.fpr, curve.tpr)
                    ]
        reports.append(EvaluationReport(
            mode=mode.name,
            score=score_name,
            auroc=plain,
            auroc_bd=bd,
            tpr_at_osr=tpr,
            cs_map=cs_map,
            os_map=os_map,
            n_id_matched=counts["id_matched"],
            n_ood_matched=counts["ood_matched"],
            n_background=counts["background"],
            absent_reason=absent_reason,
            config=dict(config_echo),
            roc_points=roc_points,
        ))
    return reports
