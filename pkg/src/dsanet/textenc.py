"""Byte-level toy text encoder with lightweight adapters.

A stand-in for a large frozen text tower: class names are tokenized as
raw UTF-8 bytes, embedded, run through a small transformer whose base
weights are frozen after random initialization, mean-pooled and
L2-normalized into one embedding per class.  Only the adapters train.

Adapters sit in the first `adapter_layers` blocks.  Each is a bottleneck
(down-projection, GELU, up-projection, up zero-initialized) fed by the
block input, running in parallel with the frozen block; its output joins
the block output and the pair is fused as

    x_out = (1 - omega) * x + omega * Norm(x_adapt)

where Norm rescales each row of x_adapt to the norm of the matching row
of x.  The fusion therefore never grows activation norms, and with
zero-initialized adapters x_adapt == x, so the encoder starts exactly at
the frozen path for any omega.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nn
from .diffcore import DTensor, ParameterStore
from .errors import EmptyClassName, ShapeMismatch, ZeroVector
from .prng import SplitMix64

_VOCAB = 256


@dataclass
class TextEncoderConfig:
    n_layers: int = 4
    adapter_layers: int = 3  # L: adapters in the first L blocks
    omega_t: float = 0.1
    n_heads: int = 4
    max_tokens: int = 32

    def validate(self, dim: int) -> None:
        if not 0 <= self.adapter_layers <= self.n_layers:
            raise ShapeMismatch("adapter_layers must lie in [0, n_layers]")
        if not 0.0 <= self.omega_t <= 1.0:
            raise ShapeMismatch("omega_t must lie in [0, 1]")
        if dim % self.n_heads != 0:
            raise ShapeMismatch(f"n_heads={self.n_heads} must divide dim={dim}")


@dataclass
class _Block:
    attn: nn.AttnParams
    ln1: nn.LNParams
    ffn: nn.FFNParams
    ln2: nn.LNParams
    adapter: nn.FFNParams | None


def adapter_fuse(x: DTensor, x_adapt: DTensor, omega_t: float) -> DTensor:
    """Norm-preserving fusion of frozen and adapted activations.

    Written as x + omega * (Norm(x_adapt) - x), which equals the convex
    combination (1-omega) x + omega Norm(x_adapt) but collapses to x
    bit-exactly when the adapter path matches the frozen path.
    """
    if x.shape != x_adapt.shape:
        raise ShapeMismatch(f"adapter_fuse {x.shape} vs {x_adapt.shape}")
    if omega_t == 0.0:
        return x
    normed = dc.rescale_rows_to(x_adapt, x)
    return dc.add(x, dc.scale(dc.sub(normed, x), omega_t))


def separation_loss(t_text: DTensor) -> DTensor:
    """Sum of |cos(t_0, t_a)| over the anomaly classes a >= 1."""
    c = t_text.shape[0]
    if c < 2:
        raise ShapeMismatch("separation needs >= 2 classes")
    if np.any(np.linalg.norm(t_text.values, axis=1) == 0.0):
        raise ZeroVector("separation_loss with a zero-norm embedding")
    unit = dc.l2_normalize(t_text)
    t0 = dc.gather(unit, np.array([0]))
    rest = dc.gather(unit, np.arange(1, c))
    sims = dc.matmul(rest, dc.transpose(t0))  # (C-1, 1)
    return dc.vsum(dc.vabs(sims))


class TextEncoder:
    def __init__(self, store: ParameterStore, cfg: TextEncoderConfig, dim: int, rng: SplitMix64):
        cfg.validate(dim)
        self.cfg = cfg
        self.dim = dim
        # frozen base: random init, never trained
        self.embed = store.register(
            "textenc.embed", rng.normal(_VOCAB * dim).reshape(_VOCAB, dim) / np.sqrt(dim), trainable=False
        )
        self.pos = store.register(
            "textenc.pos", rng.normal(cfg.max_tokens * dim).reshape(cfg.max_tokens, dim) / np.sqrt(dim),
            trainable=False,
        )
        self.blocks: list[_Block] = []
        bottleneck = max(1, dim // 4)
        for i in range(cfg.n_layers):
            adapter = None
            if i < cfg.adapter_layers:
                adapter = nn.FFNParams(
                    fc1=nn.init_linear(store, f"textenc.adapter{i}.down", dim, bottleneck, rng),
                    fc2=nn.init_linear(store, f"textenc.adapter{i}.up", bottleneck, dim, rng, scale=0.0),
                )
            self.blocks.append(
                _Block(
                    attn=nn.init_attention(store, f"textenc.blk{i}.attn", dim, rng, trainable=False),
                    ln1=nn.init_layer_norm(store, f"textenc.blk{i}.ln1", dim, trainable=False),
                    ffn=nn.init_ffn(store, f"textenc.blk{i}.ffn", dim, 2 * dim, rng, trainable=False),
                    ln2=nn.init_layer_norm(store, f"textenc.blk{i}.ln2", dim, trainable=False),
                    adapter=adapter,
                )
            )

    def tokenize(self, name: str) -> np.ndarray:
        raw = name.encode("utf-8")[: self.cfg.max_tokens]
        if not raw:
            raise EmptyClassName("class names must contain at least one byte")
        return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    def _encode_one(self, name: str) -> DTensor:
        tokens = self.tokenize(name)
        x = dc.add(dc.gather(self.embed, tokens), dc.gather(self.pos, np.arange(len(tokens))))
        for block in self.blocks:
            x_in = x
            attended = nn.multi_head_self_attention(x_in, block.attn, self.cfg.n_heads)
            x = nn.layer_norm(dc.add(x_in, attended), block.ln1)
            x = nn.layer_norm(dc.add(x, nn.ffn(x, block.ffn)), block.ln2)
            if block.adapter is not None:
                x_adapt = dc.add(x, nn.ffn(x_in, block.adapter))
                x = adapter_fuse(x, x_adapt, self.cfg.omega_t)
        pooled = dc.mean(x, axis=0)
        return dc.l2_normalize(pooled)

    def encode_classes(self, names: list[str]) -> DTensor:
        """C x D matrix of unit-norm class embeddings."""
        if len(names) < 2:
            raise ShapeMismatch("need at least 2 classes")
        return dc.stack_rows([self._encode_one(n) for n in names])
