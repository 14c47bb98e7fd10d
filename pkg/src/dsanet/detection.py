"""MIL detection branch: per-frame anomaly probabilities and the
binary video-level loss.

A linear head maps contextualized frame features to logits; sigmoid
gives frame probabilities; the video-level prediction is the mean of the
top-k frame probabilities and is trained with binary cross-entropy
against the video label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nn
from .diffcore import DTensor, ParameterStore
from .prng import SplitMix64


@dataclass
class ScoreTrack:
    """Per-frame scalar scores in [0, 1]."""

    video_id: str
    scores: DTensor  # shape (N,)

    @property
    def n(self) -> int:
        return int(self.scores.shape[0])

    def numpy(self) -> np.ndarray:
        return self.scores.values.copy()


class DetectionHead:
    def __init__(
        self,
        store: ParameterStore,
        dim: int,
        rng: SplitMix64,
        k_fraction: float = 1.0 / 16.0,
    ):
        if not 0.0 < k_fraction <= 1.0:
            raise ValueError("k_fraction must be in (0, 1]")
        self.k_fraction = k_fraction
        self.proj = nn.init_linear(store, "detection.head", dim, 1, rng)

    def k_for(self, n: int) -> int:
        return max(1, math.ceil(self.k_fraction * n))

    def score_frames(self, f_video: DTensor, video_id: str = "") -> ScoreTrack:
        logits = nn.linear(f_video, self.proj)  # (N, 1)
        flat = dc.vsum(logits, axis=1)  # (N,)
        return ScoreTrack(video_id=video_id, scores=dc.sigmoid(flat))


def topk_mean(p: DTensor, k: int) -> DTensor:
    """Mean of the k largest scores; ties prefer the lower frame index."""
    return dc.topk_mean(p, k)


def mil_loss(p_bar: DTensor, y: int) -> DTensor:
    """Binary cross-entropy on the pooled video-level probability."""
    if y == 1:
        return -dc.log(p_bar)
    return -dc.log(dc.sub(dc.constant(1.0), p_bar))


def export_scores_csv(track: ScoreTrack, path) -> None:
    lines = ["frame_index,score"]
    for i, s in enumerate(track.numpy()):
        lines.append(f"{i},{s!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
