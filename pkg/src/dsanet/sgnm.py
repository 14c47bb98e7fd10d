"""Self-guided normality modeling (training-only branch).

Pipeline per video: take the M frames with the lowest detection scores
as normal candidates, distill K prototypes from them with learnable
queries and single-layer cross-attention (projected queries/keys, raw
candidate features as values, so the prototypes live in feature space),
pull candidates toward prototypes with a compactness loss, reconstruct
the full video from the prototypes with a cross-attention decoder, score
frames by reconstruction cosine distance, and tie the reconstruction
score track to the detection track with an MSE consistency loss.

The first decoder layer is a pure cross-attention read with no residual
path and no feed-forward, so a depth-1 reconstruction lies exactly in
the span of the prototypes and anomalous content cannot leak around the
bottleneck; deeper layers use the standard residual attention +
feed-forward form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nn
from .detection import ScoreTrack
from .diffcore import DTensor, ParameterStore
from .errors import LengthMismatch, MOutOfRange, ShapeMismatch, ZeroVector
from .prng import SplitMix64


@dataclass
class SGNMConfig:
    n_prototypes: int = 16
    m_fraction: float = 0.8
    decoder_layers: int = 8

    def validate(self) -> None:
        if self.n_prototypes < 1:
            raise ShapeMismatch("n_prototypes must be >= 1")
        if not 0.0 < self.m_fraction <= 1.0:
            raise ShapeMismatch("m_fraction must be in (0, 1]")
        if self.decoder_layers < 1:
            raise ShapeMismatch("decoder_layers must be >= 1")

    def m_for(self, n: int) -> int:
        return max(1, math.ceil(self.m_fraction * n))


@dataclass
class DNPSet:
    """Learnable queries plus the per-video distilled patterns."""

    queries: DTensor  # K x D, learnable
    patterns: DTensor  # K x D, derived per video

    @property
    def k(self) -> int:
        return int(self.patterns.shape[0])


def select_normal_candidates(
    f_video: DTensor, s_det: ScoreTrack, m: int
) -> tuple[DTensor, np.ndarray]:
    """The m lowest-scoring frames, temporal order preserved.

    Selection indices come from the detached score values (ties keep the
    lower frame index); gradients flow through the selected features
    only.
    """
    n = f_video.shape[0]
    if not 1 <= m <= n:
        raise MOutOfRange(f"M={m} outside [1, {n}]")
    order = np.argsort(s_det.scores.values, kind="stable")
    chosen = np.sort(order[:m])
    return dc.gather(f_video, chosen), chosen


def compact_loss(f_n: DTensor, patterns: DTensor) -> DTensor:
    """Mean over candidates of the minimum cosine distance to a pattern."""
    if np.any(np.linalg.norm(f_n.values, axis=1) == 0.0) or np.any(
        np.linalg.norm(patterns.values, axis=1) == 0.0
    ):
        raise ZeroVector("cosine distance undefined for zero-norm rows")
    cos = dc.matmul(dc.l2_normalize(f_n), dc.transpose(dc.l2_normalize(patterns)))
    dist = dc.sub(dc.constant(np.ones(cos.shape)), cos)
    return dc.mean(dc.min_axis(dist, axis=1))


def reconstruction_score(f_video: DTensor, f_rec: DTensor, video_id: str = "") -> ScoreTrack:
    """Per-frame (1 - cos)/2, mapped into [0, 1]."""
    if f_video.shape != f_rec.shape:
        raise ShapeMismatch(f"reconstruction {f_rec.shape} vs input {f_video.shape}")
    cos = dc.cosine_similarity(f_video, f_rec)
    # clip guards against cos(v, v) rounding a hair past 1
    return ScoreTrack(
        video_id=video_id,
        scores=dc.clip01(dc.scale(dc.sub(dc.constant(np.ones(cos.shape)), cos), 0.5)),
    )


def consistency_loss(s_det: ScoreTrack, s_rec: ScoreTrack) -> DTensor:
    """MSE between the two anomaly views; gradients reach both tracks."""
    if s_det.n != s_rec.n:
        raise LengthMismatch(f"tracks of length {s_det.n} vs {s_rec.n}")
    diff = dc.sub(s_det.scores, s_rec.scores)
    return dc.mean(dc.mul(diff, diff))


class NormalityModel:
    """Prototype extraction + reconstruction decoder parameters."""

    def __init__(self, store: ParameterStore, cfg: SGNMConfig, dim: int, rng: SplitMix64):
        cfg.validate()
        self.cfg = cfg
        self.dim = dim
        self.queries = store.register(
            "sgnm.queries", rng.normal(cfg.n_prototypes * dim).reshape(cfg.n_prototypes, dim) / np.sqrt(dim)
        )
        self.dnp_q = nn.init_linear(store, "sgnm.dnp.wq", dim, dim, rng, bias=False)
        self.dnp_k = nn.init_linear(store, "sgnm.dnp.wk", dim, dim, rng, bias=False)
        self.in_mlp = nn.FFNParams(
            fc1=nn.init_linear(store, "sgnm.dec.mlp.fc1", dim, dim, rng),
            fc2=nn.init_linear(store, "sgnm.dec.mlp.fc2", dim, dim, rng),
        )
        self.layers: list[tuple[nn.AttnParams, nn.FFNParams | None]] = []
        for i in range(cfg.decoder_layers):
            attn = nn.init_attention(store, f"sgnm.dec{i}.attn", dim, rng)
            ffn = (
                None
                if i == 0
                else nn.init_ffn(store, f"sgnm.dec{i}.ffn", dim, 2 * dim, rng)
            )
            self.layers.append((attn, ffn))

    def extract_dnps(self, f_n: DTensor) -> DNPSet:
        """softmax(Q' K'^T / sqrt(D)) F_n with projected queries/keys."""
        q = nn.linear(self.queries, self.dnp_q)
        k = nn.linear(f_n, self.dnp_k)
        scores = dc.scale(dc.matmul(q, dc.transpose(k)), 1.0 / np.sqrt(self.dim))
        patterns = dc.matmul(dc.row_softmax(scores), f_n)
        return DNPSet(queries=self.queries, patterns=patterns)

    def reconstruct(self, f_video: DTensor, dnps: DNPSet) -> DTensor:
        h = nn.ffn(f_video, self.in_mlp)
        for i, (attn, ffn_p) in enumerate(self.layers):
            read = nn.cross_attention(h, dnps.patterns, attn)
            if i == 0:
                h = read  # no residual: output spans only the patterns
            else:
                h = dc.add(h, read)
                h = dc.add(h, nn.ffn(h, ffn_p))
        return h
