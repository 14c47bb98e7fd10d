"""Two-stage temporal context: windowed self-attention, then a
dual-channel graph convolution.

Stage 1 partitions the video into consecutive non-overlapping windows
and runs multi-head self-attention independently inside each (residual +
layer norm); nothing crosses a window boundary.  Stage 2 builds two
row-stochastic adjacencies over the stage-1 output — one from pairwise
feature cosine similarity (softmax at temperature 1), one from relative
temporal distance exp(-|i-j|/sigma) row-normalized — and applies
gcn_layers rounds of: per-channel linear transform, channel concat,
projection back to D, GELU, residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import nn
from .diffcore import DTensor, ParameterStore
from .errors import ShapeMismatch
from .prng import SplitMix64

GRAPH_SOFTMAX_TEMPERATURE = 1.0  # fixed, kept off the tuning surface


@dataclass
class TemporalConfig:
    window: int = 8
    n_heads: int = 4
    sigma: float = 2.0
    gcn_layers: int = 1

    def validate(self, dim: int) -> None:
        if self.window < 1:
            raise ShapeMismatch("window must be >= 1")
        if dim % self.n_heads != 0:
            raise ShapeMismatch(f"n_heads={self.n_heads} must divide dim={dim}")
        if self.sigma <= 0:
            raise ShapeMismatch("sigma must be > 0")
        if self.gcn_layers < 1:
            raise ShapeMismatch("gcn_layers must be >= 1")


@dataclass
class AdjacencyPair:
    a_sim: DTensor  # N x N, row-stochastic, from feature cosine similarity
    a_dist: DTensor  # N x N, row-stochastic, from temporal distance


@dataclass
class GCNLayerParams:
    w_sim: nn.LinearParams
    w_dist: nn.LinearParams
    w_out: nn.LinearParams


def build_adjacency(f: DTensor, cfg: TemporalConfig) -> AdjacencyPair:
    """Both graph channels over the rows of f (N x D)."""
    n = f.shape[0]
    cos = dc.matmul(dc.l2_normalize(f), dc.transpose(dc.l2_normalize(f)))
    a_sim = dc.row_softmax(cos, temperature=GRAPH_SOFTMAX_TEMPERATURE)

    idx = np.arange(n)
    dist = np.exp(-np.abs(idx[:, None] - idx[None, :]) / cfg.sigma)
    a_dist = dc.constant(dist / dist.sum(axis=1, keepdims=True))
    return AdjacencyPair(a_sim=a_sim, a_dist=a_dist)


class TemporalEncoder:
    """Owns the attention and GCN parameters; callable on an N x D tensor."""

    def __init__(self, store: ParameterStore, cfg: TemporalConfig, dim: int, rng: SplitMix64):
        cfg.validate(dim)
        self.cfg = cfg
        self.dim = dim
        self.attn = nn.init_attention(store, "temporal.attn", dim, rng)
        self.ln = nn.init_layer_norm(store, "temporal.attn.ln", dim)
        self.gcn_layers: list[GCNLayerParams] = []
        for i in range(cfg.gcn_layers):
            self.gcn_layers.append(
                GCNLayerParams(
                    w_sim=nn.init_linear(store, f"temporal.gcn{i}.w_sim", dim, dim, rng, bias=False),
                    w_dist=nn.init_linear(store, f"temporal.gcn{i}.w_dist", dim, dim, rng, bias=False),
                    w_out=nn.init_linear(store, f"temporal.gcn{i}.w_out", 2 * dim, dim, rng),
                )
            )

    def local_window_attention(self, f: DTensor) -> DTensor:
        """Window-partitioned self-attention with residual + layer norm."""
        n = f.shape[0]
        w = self.cfg.window
        outs = []
        for start in range(0, n, w):
            stop = min(start + w, n)
            chunk = dc.gather(f, np.arange(start, stop))
            outs.append(nn.multi_head_self_attention(chunk, self.attn, self.cfg.n_heads))
        attended = outs[0] if len(outs) == 1 else dc.concat(outs, axis=0)
        return nn.layer_norm(dc.add(f, attended), self.ln)

    def dual_gcn(self, f: DTensor, adj: AdjacencyPair) -> DTensor:
        if adj.a_sim.shape != (f.shape[0], f.shape[0]):
            raise ShapeMismatch(f"adjacency {adj.a_sim.shape} vs features {f.shape}")
        h = f
        for layer in self.gcn_layers:
            h_sim = dc.matmul(adj.a_sim, nn.linear(h, layer.w_sim))
            h_dist = dc.matmul(adj.a_dist, nn.linear(h, layer.w_dist))
            mixed = nn.linear(dc.concat([h_sim, h_dist], axis=1), layer.w_out)
            h = dc.add(h, dc.gelu(mixed))
        return h

    def __call__(self, f_clip: DTensor) -> DTensor:
        """f_clip (N x D) -> temporally contextualized features (N x D)."""
        f = self.local_window_attention(f_clip)
        return self.dual_gcn(f, build_adjacency(f, self.cfg))

    def n_windows(self, n: int) -> int:
        return math.ceil(n / self.cfg.window)
