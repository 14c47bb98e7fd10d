"""Assembles the three branches into one parameterized model.

A DSANet instance owns a ParameterStore plus the branch heads.  Per
video it produces the detection score track, the alignment map, and (in
training mode) the normality-modeling artifacts and all per-video loss
terms; the inter-class separation loss lives at the step level because
it depends only on the text embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import classify, detection, sgnm, temporal, textenc
from . import diffcore as dc
from .diffcore import DTensor, ParameterStore
from .errors import ShapeMismatch
from .prng import SplitMix64, child_seed


@dataclass
class ModelConfig:
    dim: int
    class_names: list[str]
    temporal: temporal.TemporalConfig = field(default_factory=temporal.TemporalConfig)
    sgnm: sgnm.SGNMConfig = field(default_factory=sgnm.SGNMConfig)
    textenc: textenc.TextEncoderConfig = field(default_factory=textenc.TextEncoderConfig)
    k_fraction: float = 1.0 / 16.0
    tau: float = classify.CONTRASTIVE_TAU
    sgnm_enabled: bool = True
    dcsa_enabled: bool = True

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


@dataclass
class VideoOutputs:
    video_id: str
    f_video: DTensor
    s_det: detection.ScoreTrack
    alignment: classify.AlignmentMap
    losses: dict[str, DTensor]
    dnps: sgnm.DNPSet | None = None
    s_rec: detection.ScoreTrack | None = None
    prototypes: classify.PrototypePair | None = None


class DSANet:
    def __init__(self, cfg: ModelConfig, seed: int):
        if cfg.n_classes < 2:
            raise ShapeMismatch("need >= 2 classes")
        self.cfg = cfg
        self.store = ParameterStore()
        rng = SplitMix64(child_seed(seed, "model-init"))
        self.temporal = temporal.TemporalEncoder(self.store, cfg.temporal, cfg.dim, rng.child("temporal"))
        self.detection = detection.DetectionHead(
            self.store, cfg.dim, rng.child("detection"), k_fraction=cfg.k_fraction
        )
        self.normality = sgnm.NormalityModel(self.store, cfg.sgnm, cfg.dim, rng.child("sgnm"))
        self.text = textenc.TextEncoder(self.store, cfg.textenc, cfg.dim, rng.child("textenc"))
        self.enhance = classify.EnhanceHead(self.store, cfg.dim, rng.child("classify"))

    def encode_text(self) -> DTensor:
        """Class embeddings; compute once per step and share."""
        return self.text.encode_classes(self.cfg.class_names)

    def forward_video(
        self,
        frames: np.ndarray,
        t_text: DTensor,
        video_id: str = "",
        y: int = 0,
        category: int = 0,
        train: bool = True,
    ) -> VideoOutputs:
        if frames.shape[1] != self.cfg.dim:
            raise ShapeMismatch(f"features are {frames.shape[1]}-d, model wants {self.cfg.dim}")
        f_clip = dc.constant(frames.astype(np.float64))
        f_video = self.temporal(f_clip)
        s_det = self.detection.score_frames(f_video, video_id)
        k = self.detection.k_for(s_det.n)

        t_enh = self.enhance.vision_text_enhance(t_text, f_video, s_det)
        amap = classify.alignment_map(f_video, t_enh, k)

        losses: dict[str, DTensor] = {}
        out = VideoOutputs(video_id=video_id, f_video=f_video, s_det=s_det, alignment=amap, losses=losses)
        if not train:
            return out

        p_bar = detection.topk_mean(s_det.scores, k)
        losses["L_det"] = detection.mil_loss(p_bar, y)
        losses["L_align"] = classify.align_loss(amap.video_scores, category, self.cfg.tau)

        if self.cfg.sgnm_enabled:
            m = self.cfg.sgnm.m_for(s_det.n)
            f_n, _ = sgnm.select_normal_candidates(f_video, s_det, m)
            dnps = self.normality.extract_dnps(f_n)
            losses["L_compact"] = sgnm.compact_loss(f_n, dnps.patterns)
            f_rec = self.normality.reconstruct(f_video, dnps)
            s_rec = sgnm.reconstruction_score(f_video, f_rec, video_id)
            losses["L_consist"] = sgnm.consistency_loss(s_det, s_rec)
            out.dnps = dnps
            out.s_rec = s_rec
        else:
            losses["L_compact"] = dc.constant(0.0)
            losses["L_consist"] = dc.constant(0.0)

        if self.cfg.dcsa_enabled:
            pair = classify.decouple_prototypes(f_video, s_det)
            losses["L_dcsa"] = classify.dcsa_loss(pair, t_text, category, self.cfg.tau)
            out.prototypes = pair
        else:
            losses["L_dcsa"] = dc.constant(0.0)
        return out

    def dnp_min_distances(self, frames: np.ndarray) -> np.ndarray:
        """Diagnostic: per-frame minimum cosine distance to the video's
        distilled patterns (no gradients)."""
        t_text = self.encode_text()
        out = self.forward_video(frames, t_text, train=False)
        m = self.cfg.sgnm.m_for(out.s_det.n)
        f_n, _ = sgnm.select_normal_candidates(out.f_video, out.s_det, m)
        patterns = self.normality.extract_dnps(f_n).patterns.values
        f = out.f_video.values
        fu = f / np.linalg.norm(f, axis=1, keepdims=True)
        pu = patterns / np.linalg.norm(patterns, axis=1, keepdims=True)
        return (1.0 - fu @ pu.T).min(axis=1)

    def save(self, path) -> None:
        self.store.save(path)

    def load(self, path) -> None:
        self.store.load(path)
