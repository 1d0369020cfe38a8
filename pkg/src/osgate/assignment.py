"""Prediction-to-ground-truth matching: IoU, Hungarian assignment, label transfer.

Matching minimizes ``1 - IoU`` per image with an exact O(n^3) shortest
augmenting path solver.  Pairs whose IoU falls below the match floor are
demoted to unmatched afterwards, and matched detections inherit the
ground-truth label of their partner.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .interchange import (
    BoundingBox,
    Dataset,
    DetectionRecord,
    GroundTruthRecord,
    OOD_CLASS_ID,
)

DEFAULT_MATCH_FLOOR = 0.5


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 by convention when the union has zero area."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for two (n, 4) corner-format box arrays."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def hungarian_assign(cost, n_rows: int | None = None, n_cols: int | None = None):
    """Minimum-cost bipartite assignment of size ``min(n_rows, n_cols)``.

    Shortest-augmenting-path solver run over (cost, tie-weight) pairs, where
    the tie weight is an exact big-integer encoding of the row-major pairing.
    Among equal-cost assignments this selects the lexicographically smallest
    (row, column) list, deterministically.  Intended for per-image matching
    scales (hundreds of boxes); the big-integer bookkeeping makes very large
    matrices slow.

    Returns a list of (row, col) pairs sorted by row.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be 2-d, got shape {c.shape}")
    rows, cols = c.shape
    if n_rows is not None and n_rows != rows:
        raise ValueError(f"n_rows={n_rows} disagrees with cost shape {c.shape}")
    if n_cols is not None and n_cols != cols:
        raise ValueError(f"n_cols={n_cols} disagrees with cost shape {c.shape}")
    if rows == 0 or cols == 0:
        return []
    if not np.isfinite(c).all():
        raise ValueError("cost matrix contains non-finite entries")

    # Pad with zero-cost dummy columns when rows exceed columns; every dummy is
    # used exactly once, so real-cost optimality is unaffected.
    width = max(rows, cols)
    base = cols + 2
    powers = [base ** (rows - 1 - i) for i in range(rows)]

    def cell(i: int, j: int) -> tuple[float, int]:
        if j < cols:
            return (c[i, j], (j + 1) * powers[i])
        return (0.0, (cols + 1) * powers[i])

    inf = (math.inf, 0)
    zero = (0.0, 0)
    # 1-indexed shortest augmenting path with potentials (Jonker-Volgenant family).
    u = [zero] * (rows + 1)
    v = [zero] * (width + 1)
    matched_row = [0] * (width + 1)
    way = [0] * (width + 1)
    for i in range(1, rows + 1):
        matched_row[0] = i
        j0 = 0
        minv = [inf] * (width + 1)
        used = [False] * (width + 1)
        while True:
            used[j0] = True
            i0 = matched_row[j0]
            delta = inf
            j1 = -1
            uo = u[i0]
            for j in range(1, width + 1):
                if used[j]:
                    continue
                cw = cell(i0 - 1, j - 1)
                vj = v[j]
                cur = (cw[0] - uo[0] - vj[0], cw[1] - uo[1] - vj[1])
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(width + 1):
                if used[j]:
                    ru = u[matched_row[j]]
                    u[matched_row[j]] = (ru[0] + delta[0], ru[1] + delta[1])
                    rv = v[j]
                    v[j] = (rv[0] - delta[0], rv[1] - delta[1])
                else:
                    mv = minv[j]
                    minv[j] = (mv[0] - delta[0], mv[1] - delta[1])
            j0 = j1
            if matched_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            matched_row[j0] = matched_row[j1]
            j0 = j1

    pairs = [
        (matched_row[j] - 1, j - 1)
        for j in range(1, width + 1)
        if matched_row[j] != 0 and j - 1 < cols
    ]
    pairs.sort()
    return pairs


@dataclass(frozen=True)
class MatchResult:
    """Per-image assignment outcome after applying the IoU floor."""

    pairs: tuple[tuple[int, int, float], ...]
    unmatched_detections: tuple[int, ...]
    unmatched_ground_truth: tuple[int, ...]


def match_image(
    detections: Sequence[DetectionRecord],
    ground_truth: Sequence[GroundTruthRecord],
    match_floor: float = DEFAULT_MATCH_FLOOR,
) -> MatchResult:
    """Hungarian assignment on cost 1 - IoU; pairs under the floor are demoted."""
    image_ids = {r.image_id for r in detections} | {r.image_id for r in ground_truth}
    if len(image_ids) > 1:
        raise ValueError(f"match_image received records from images {sorted(image_ids)}")
    if not detections or not ground_truth:
        return MatchResult((), tuple(range(len(detections))), tuple(range(len(ground_truth))))

    det_boxes = np.stack([d.box.as_array() for d in detections])
    gt_boxes = np.stack([g.box.as_array() for g in ground_truth])
    overlap = iou_matrix(det_boxes, gt_boxes)
    assignment = hungarian_assign(1.0 - overlap)

    pairs = []
    matched_dets, matched_gts = set(), set()
    for det_idx, gt_idx in assignment:
        pair_iou = float(overlap[det_idx, gt_idx])
        if pair_iou >= match_floor:
            pairs.append((det_idx, gt_idx, pair_iou))
            matched_dets.add(det_idx)
            matched_gts.add(gt_idx)
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_detections=tuple(i for i in range(len(detections)) if i not in matched_dets),
        unmatched_ground_truth=tuple(i for i in range(len(ground_truth)) if i not in matched_gts),
    )


@dataclass(frozen=True, eq=False)
class LabeledEmbedding:
    embedding: np.ndarray
    class_id: int
    source_image: str


def group_by_image(records: Sequence) -> dict[str, list[int]]:
    """Indices grouped by image id, preserving first-appearance order."""
    groups: dict[str, list[int]] = {}
    for idx, record in enumerate(records):
        groups.setdefault(record.image_id, []).append(idx)
    return groups


def collect_labeled_embeddings(
    dataset: Dataset, match_floor: float = DEFAULT_MATCH_FLOOR
) -> list[LabeledEmbedding]:
    """Transfer ground-truth labels onto matched detection embeddings.

    Sentinel-class ground truth is excluded before matching, so only
    in-distribution labels are ever produced.  Unmatched detections are
    dropped.
    """
    id_gt = [g for g in dataset.ground_truth if g.class_id != OOD_CLASS_ID]
    det_groups = group_by_image(dataset.detections)
    gt_groups = group_by_image(id_gt)

    labeled: list[LabeledEmbedding] = []
    for image_id, det_indices in det_groups.items():
        gt_indices = gt_groups.get(image_id, [])
        if not gt_indices:
            continue
        dets = [dataset.detections[i] for i in det_indices]
        gts = [id_gt[i] for i in gt_indices]
        result = match_image(dets, gts, match_floor)
        for det_idx, gt_idx, _ in result.pairs:
            labeled.append(
                LabeledEmbedding(
                    embedding=dets[det_idx].embedding,
                    class_id=gts[gt_idx].class_id,
                    source_image=image_id,
                )
            )
    return labeled


def matched_label_pairs(
    dataset: Dataset, match_floor: float = DEFAULT_MATCH_FLOOR
) -> list[tuple[int, int]]:
    """(detection index, ground-truth class) for every matched in-distribution pair.

    The detection index refers to ``dataset.detections``; used by calibration,
    which needs logits and embeddings aligned with true labels.
    """
    id_gt = [g for g in dataset.ground_truth if g.class_id != OOD_CLASS_ID]
    det_groups = group_by_image(dataset.detections)
    gt_groups = group_by_image(id_gt)

    out: list[tuple[int, int]] = []
    for image_id, det_indices in det_groups.items():
        gt_indices = gt_groups.get(image_id, [])
        if not gt_indices:
            continue
        dets = [dataset.detections[i] for i in det_indices]
        gts = [id_gt[i] for i in gt_indices]
        result = match_image(dets, gts, match_floor)
        for det_idx, gt_idx, _ in result.pairs:
            out.append((det_indices[det_idx], gts[gt_idx].class_id))
    out.sort()
    return out
