"""Inference: coarse scoring, hierarchical belief modulation, proposals.

Coarse prediction is the detection branch's score track alone; the
normality-modeling branch never runs at inference.  Fine-grained scores
distribute each frame's coarse score over the anomaly classes with a
softmax over the alignment row at temperature tau/beta:

    q_i    = softmax_{c>=1}( S_align[i, c] * beta / tau )
    out[i, c] = S_det[i] * q_i[c]          for c >= 1
    out[i, 0] = 1 - S_det[i]

so anomaly-class mass is conserved per frame and the per-frame argmax
anomaly class does not depend on beta.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .classify import CONTRASTIVE_TAU, AlignmentMap
from .detection import ScoreTrack
from .errors import BetaOutOfRange, SchemaViolation, ShapeMismatch
from .model import DSANet


@dataclass
class FineScoreMap:
    scores: np.ndarray  # N x C, entries in [0, 1]
    beta: float


@dataclass
class Proposal:
    start_frame: int
    end_frame: int
    category: int
    confidence: float


def coarse_scores(model: DSANet, frames: np.ndarray, video_id: str = "") -> ScoreTrack:
    """Detection-branch scores only; SG-NM is not executed."""
    t_text = model.encode_text()
    out = model.forward_video(frames, t_text, video_id=video_id, train=False)
    return out.s_det


def hierarchical_belief_modulation(
    s_det: ScoreTrack | np.ndarray,
    s_align: AlignmentMap | np.ndarray,
    beta: float,
    tau: float = CONTRASTIVE_TAU,
) -> FineScoreMap:
    if beta <= 0.0:
        raise BetaOutOfRange(f"beta must be > 0, got {beta}")
    det = s_det.numpy() if isinstance(s_det, ScoreTrack) else np.asarray(s_det, dtype=np.float64)
    align = s_align.m.values if isinstance(s_align, AlignmentMap) else np.asarray(s_align, dtype=np.float64)
    if align.ndim != 2 or align.shape[0] != det.shape[0]:
        raise ShapeMismatch(f"alignment {align.shape} vs scores {det.shape}")
    n, c = align.shape
    if c < 2:
        raise ShapeMismatch("need a normal class plus at least one anomaly class")
    logits = align[:, 1:] * (beta / tau)
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    q = e / e.sum(axis=1, keepdims=True)
    scores = np.empty((n, c), dtype=np.float64)
    scores[:, 0] = 1.0 - det
    scores[:, 1:] = det[:, None] * q
    return FineScoreMap(scores=scores, beta=beta)


def extract_proposals(fine: FineScoreMap, threshold: float = 0.5, min_len: int = 2) -> list[Proposal]:
    """Maximal per-class runs of frames at or above threshold."""
    if not 0.0 < threshold < 1.0:
        raise SchemaViolation(f"threshold must be in (0, 1), got {threshold}")
    n, c = fine.scores.shape
    proposals: list[Proposal] = []
    for cls in range(1, c):
        mask = fine.scores[:, cls] >= threshold
        i = 0
        while i < n:
            if not mask[i]:
                i += 1
                continue
            j = i
            while j + 1 < n and mask[j + 1]:
                j += 1
            if j - i + 1 >= min_len:
                conf = float(fine.scores[i : j + 1, cls].mean())
                proposals.append(Proposal(i, j, cls, conf))
            i = j + 1
        # runs are per class; order within a class is by start frame
    return proposals


@dataclass
class VideoEval:
    """Per-video inference artifacts kept around for exports."""

    s_det: np.ndarray
    alignment: np.ndarray
    fine: FineScoreMap
    proposals: list[Proposal]
    f_bkg: np.ndarray | None = None


def evaluate_dataset(
    model: DSANet,
    manifest,
    beta: float,
    threshold: float = 0.5,
    min_len: int = 2,
    iou_thresholds=None,
):
    """Run inference over a manifest and compute the full metric set.

    Returns (EvalResult, per-video VideoEval dict).  Raises
    SingleClassOnly / NoPositives when the ground truth cannot support
    the frame metrics.
    """
    from . import classify
    from .datamodel import frame_labels, load_features
    from .metrics import (
        DEFAULT_IOU_THRESHOLDS,
        EvalResult,
        frame_ap,
        frame_auc,
        segment_map,
    )

    if iou_thresholds is None:
        iou_thresholds = DEFAULT_IOU_THRESHOLDS
    t_text = model.encode_text()
    all_scores, all_labels = [], []
    proposals_by_video, gt_by_video = [], []
    per_video: dict[str, VideoEval] = {}
    for rec in manifest.videos:
        feats = load_features(rec)
        out = model.forward_video(feats.frames, t_text, video_id=rec.video_id, train=False)
        fine = hierarchical_belief_modulation(out.s_det, out.alignment, beta)
        props = extract_proposals(fine, threshold, min_len)
        binary, _ = frame_labels(rec)
        all_scores.append(out.s_det.numpy())
        all_labels.append(binary)
        proposals_by_video.append(props)
        gt_by_video.append(rec.gt_segments)
        pair = classify.decouple_prototypes(out.f_video, out.s_det)
        per_video[rec.video_id] = VideoEval(
            s_det=out.s_det.numpy(),
            alignment=out.alignment.m.values.copy(),
            fine=fine,
            proposals=props,
            f_bkg=pair.f_bkg.values.copy(),
        )
    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    map_at_iou, avg_map = segment_map(proposals_by_video, gt_by_video, iou_thresholds)
    result = EvalResult(
        auc=frame_auc(scores, labels),
        ap=frame_ap(scores, labels),
        map_at_iou=map_at_iou,
        avg_map=avg_map,
    )
    return result, per_video


def export_fine_csv(fine: FineScoreMap, path) -> None:
    n, c = fine.scores.shape
    lines = ["frame_index," + ",".join(f"class_{j}" for j in range(c))]
    for i in range(n):
        lines.append(f"{i}," + ",".join(repr(v) for v in fine.scores[i]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def export_proposals_json(proposals: list[Proposal], path) -> None:
    doc = [
        {
            "start": p.start_frame,
            "end": p.end_frame,
            "category": p.category,
            "confidence": p.confidence,
        }
        for p in proposals
    ]
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
