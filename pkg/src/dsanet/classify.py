"""Fine-grained classification branch.

Three stages: (1) vision-text enhancement injects a score-weighted
global visual cue into the class embeddings through a skip-connected
feed-forward; (2) a frame-class cosine alignment map, pooled per class
with the same top-k rule as detection, is trained with softmax
cross-entropy at temperature tau; (3) soft event/background decoupling:
frame features are aggregated with softmax(S_det) weights into an
event prototype and with the complement weights into a background
prototype, and a dual contrastive loss aligns the event prototype with
its class embedding and the background prototype with the "normal"
embedding.

The complement weights are used exactly as printed (not renormalized);
every downstream use is cosine-based, so the extra scale is harmless.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nn
from .detection import ScoreTrack
from .diffcore import DTensor, ParameterStore
from .errors import ShapeMismatch
from .prng import SplitMix64

CONTRASTIVE_TAU = 0.07


@dataclass
class AlignmentMap:
    """Frame-class similarities plus column-pooled video-level scores."""

    m: DTensor  # N x C, cosine entries in [-1, 1]
    video_scores: DTensor  # (C,), top-k mean per column

    @property
    def shape(self) -> tuple[int, int]:
        return self.m.shape  # type: ignore[return-value]


@dataclass
class PrototypePair:
    f_event: DTensor  # (D,)
    f_bkg: DTensor  # (D,)
    w_event: DTensor  # (N,), softmax of detection scores
    w_bkg: DTensor  # (N,), 1 - w_event


@dataclass
class DcsaTerms:
    l_event: DTensor
    l_bkg: DTensor
    event_target: int
    bkg_target: int
    bkg_skipped: bool

    @property
    def total(self) -> DTensor:
        return dc.add(self.l_event, self.l_bkg)


def visual_cue(f_video: DTensor, s_det: ScoreTrack) -> DTensor:
    """L2-normalized score-weighted sum of frame features.

    An all-zero score track would leave the normalization undefined;
    uniform weights stand in for that edge case.
    """
    scores = s_det.scores
    if np.all(scores.values == 0.0):
        scores = dc.constant(np.full(f_video.shape[0], 1.0 / f_video.shape[0]))
    return dc.l2_normalize(dc.matmul(scores, f_video))  # (D,)


class EnhanceHead:
    """Skip-connected feed-forward fusing a visual cue into text embeddings."""

    def __init__(self, store: ParameterStore, dim: int, rng: SplitMix64):
        self.dim = dim
        self.ffn = nn.init_ffn(store, "classify.enh", dim, dim, rng)

    def vision_text_enhance(
        self, t_text: DTensor, f_video: DTensor, s_det: ScoreTrack
    ) -> DTensor:
        if t_text.shape[1] != f_video.shape[1]:
            raise ShapeMismatch(f"text dim {t_text.shape} vs video dim {f_video.shape}")
        fused = dc.add(t_text, visual_cue(f_video, s_det))  # broadcast over classes
        return dc.add(t_text, nn.ffn(fused, self.ffn))


def alignment_map(f_video: DTensor, t_enh: DTensor, k: int) -> AlignmentMap:
    """Cosine frame-class map and its per-class top-k column means."""
    m = dc.matmul(dc.l2_normalize(f_video), dc.transpose(dc.l2_normalize(t_enh)))
    return AlignmentMap(m=m, video_scores=dc.topk_mean(m, k))


def align_loss(video_scores: DTensor, category: int, tau: float = CONTRASTIVE_TAU) -> DTensor:
    """Softmax cross-entropy of the pooled class scores at temperature tau."""
    probs = dc.row_softmax(video_scores, temperature=tau)
    return -dc.log(dc.vsum(dc.gather(probs, np.array([category]))))


def decouple_prototypes(f_video: DTensor, s_det: ScoreTrack) -> PrototypePair:
    w_event = dc.row_softmax(s_det.scores)
    w_bkg = dc.sub(dc.constant(np.ones(w_event.shape)), w_event)
    return PrototypePair(
        f_event=dc.matmul(w_event, f_video),
        f_bkg=dc.matmul(w_bkg, f_video),
        w_event=w_event,
        w_bkg=w_bkg,
    )


def _contrast(prototype: DTensor, t_text: DTensor, target: int, tau: float) -> DTensor:
    sims = dc.matmul(dc.l2_normalize(t_text), dc.l2_normalize(prototype))  # (C,)
    probs = dc.row_softmax(sims, temperature=tau)
    return -dc.log(dc.vsum(dc.gather(probs, np.array([target]))))


def dcsa_terms(
    pair: PrototypePair, t_text: DTensor, category: int, tau: float = CONTRASTIVE_TAU
) -> DcsaTerms:
    """Event loss targets the video's class (t_0 for normal videos); the
    background loss always targets the normal embedding.  A zero
    background prototype (single-frame video) skips the background term
    with a warning.
    """
    l_event = _contrast(pair.f_event, t_text, category, tau)
    if np.linalg.norm(pair.f_bkg.values) == 0.0:
        warnings.warn("background prototype is zero (N=1); skipping background term")
        return DcsaTerms(l_event, dc.constant(0.0), category, 0, bkg_skipped=True)
    l_bkg = _contrast(pair.f_bkg, t_text, 0, tau)
    return DcsaTerms(l_event, l_bkg, category, 0, bkg_skipped=False)


def dcsa_loss(
    pair: PrototypePair, t_text: DTensor, category: int, tau: float = CONTRASTIVE_TAU
) -> DTensor:
    return dcsa_terms(pair, t_text, category, tau).total


def export_alignment_csv(amap: AlignmentMap, path) -> None:
    n, c = amap.m.shape
    lines = ["frame_index," + ",".join(f"class_{j}" for j in range(c))]
    for i in range(n):
        lines.append(f"{i}," + ",".join(repr(v) for v in amap.m.values[i]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
