"""Evaluation metrics: frame-level AUC and AP, temporal IoU, and
class-labeled segment mAP over IoU thresholds.

Conventions: AUC is the rank statistic with ties contributing 0.5; AP is
the mean over positives of precision at that positive's rank (descending
score, ties broken by lower index); segments are inclusive frame
intervals; segment AP uses greedy highest-confidence-first matching with
one-to-one ground-truth assignment, and classes absent from the ground
truth are excluded from the mAP mean.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import NoPositives, LengthMismatch, SingleClassOnly

DEFAULT_IOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass
class EvalResult:
    auc: float
    ap: float
    map_at_iou: dict[float, float]
    avg_map: float

    def to_json(self) -> str:
        doc = {
            "auc": self.auc,
            "ap": self.ap,
            "map_at_iou": {f"{t:.1f}": v for t, v in sorted(self.map_at_iou.items())},
            "avg_map": self.avg_map,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def frame_auc(scores, labels) -> float:
    """Area under ROC via the Mann-Whitney rank statistic."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise LengthMismatch(f"{scores.shape} scores vs {labels.shape} labels")
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClassOnly("AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * ((i + 1) + (j + 1))  # average rank, 1-based
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def frame_ap(scores, labels) -> float:
    """Mean over positives of precision at that positive's rank."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise LengthMismatch(f"{scores.shape} scores vs {labels.shape} labels")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise NoPositives("AP needs at least one positive frame")
    order = np.argsort(-scores, kind="stable")  # ties: lower index first
    hits = labels[order] == 1
    cum_hits = np.cumsum(hits)
    ranks = np.arange(1, scores.size + 1)
    precisions = cum_hits[hits] / ranks[hits]
    return float(precisions.sum() / n_pos)


def iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """Temporal IoU of two inclusive frame intervals."""
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def _class_ap(
    dets: list,
    gts: dict[int, list[tuple[int, int]]],
    n_gt: int,
    threshold: float,
) -> float:
    """AP for one class at one IoU threshold.

    dets: (video_index, proposal) pairs, any order; gts: video_index ->
    list of inclusive segments of this class.
    """
    if n_gt == 0:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1].confidence, dets[i][0], dets[i][1].start_frame))
    matched: dict[int, np.ndarray] = {v: np.zeros(len(segs), dtype=bool) for v, segs in gts.items()}
    tp_flags = np.zeros(len(order), dtype=bool)
    for rank_pos, di in enumerate(order):
        video, prop = dets[di]
        best_iou, best_j = 0.0, -1
        for j, seg in enumerate(gts.get(video, [])):
            if matched[video][j]:
                continue
            val = iou((prop.start_frame, prop.end_frame), seg)
            if val > best_iou:
                best_iou, best_j = val, j
        if best_j >= 0 and best_iou >= threshold:
            matched[video][best_j] = True
            tp_flags[rank_pos] = True
    cum_tp = np.cumsum(tp_flags)
    ranks = np.arange(1, len(order) + 1)
    precisions = cum_tp[tp_flags] / ranks[tp_flags]
    return float(precisions.sum() / n_gt)


def segment_map(
    proposals_by_video: list[list],
    gt_by_video: list[list[tuple[int, int, int]]],
    thresholds=DEFAULT_IOU_THRESHOLDS,
) -> tuple[dict[float, float], float]:
    """mAP per IoU threshold plus the average over thresholds.

    Classes are pooled across videos; the mean runs over classes that
    appear in the ground truth.
    """
    if len(proposals_by_video) != len(gt_by_video):
        raise LengthMismatch("proposals and ground truth must align per video")
    if not thresholds:
        raise LengthMismatch("need at least one IoU threshold")

    classes = sorted({c for segs in gt_by_video for (_, _, c) in segs})
    result: dict[float, float] = {}
    for t in thresholds:
        if not classes:
            result[float(t)] = 0.0
            continue
        aps = []
        for cls in classes:
            dets = [
                (vi, p)
                for vi, props in enumerate(proposals_by_video)
                for p in props
                if p.category == cls
            ]
            gts = {
                vi: [(s, e) for (s, e, c) in segs if c == cls]
                for vi, segs in enumerate(gt_by_video)
            }
            gts = {vi: segs for vi, segs in gts.items() if segs}
            n_gt = sum(len(v) for v in gts.values())
            aps.append(_class_ap(dets, gts, n_gt, float(t)))
        result[float(t)] = float(np.sum(aps) / len(aps))
    avg = float(np.sum(list(result.values())) / len(result))
    return result, avg


def write_map_table_csv(map_at_iou: dict[float, float], avg_map: float, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iou_threshold", "map"])
        for t in sorted(map_at_iou):
            writer.writerow([f"{t:.1f}", repr(map_at_iou[t])])
        writer.writerow(["avg", repr(avg_map)])
