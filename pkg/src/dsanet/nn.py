"""Shared neural building blocks over the diffcore substrate.

Linear layers, multi-head self-attention, single-head cross-attention,
feed-forward blocks, and their parameter initialization.  Branch modules
compose these; none of them owns trainable state directly — everything
lives in a ParameterStore under dotted names.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DTensor, ParameterStore
from .errors import ShapeMismatch
from .prng import SplitMix64


@dataclass
class LinearParams:
    w: DTensor
    b: DTensor | None


@dataclass
class AttnParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams


@dataclass
class FFNParams:
    fc1: LinearParams
    fc2: LinearParams


@dataclass
class LNParams:
    gamma: DTensor
    beta: DTensor


def init_linear(
    store: ParameterStore,
    name: str,
    d_in: int,
    d_out: int,
    rng: SplitMix64,
    scale: float | None = None,
    bias: bool = True,
    trainable: bool = True,
) -> LinearParams:
    if scale is None:
        scale = 1.0 / np.sqrt(d_in)
    w = store.register(name + ".w", rng.normal(d_in * d_out).reshape(d_in, d_out) * scale, trainable)
    b = store.register(name + ".b", np.zeros(d_out), trainable) if bias else None
    return LinearParams(w, b)


def init_attention(
    store: ParameterStore,
    name: str,
    dim: int,
    rng: SplitMix64,
    trainable: bool = True,
) -> AttnParams:
    return AttnParams(
        q=init_linear(store, name + ".wq", dim, dim, rng, trainable=trainable),
        k=init_linear(store, name + ".wk", dim, dim, rng, trainable=trainable),
        v=init_linear(store, name + ".wv", dim, dim, rng, trainable=trainable),
        o=init_linear(store, name + ".wo", dim, dim, rng, trainable=trainable),
    )


def init_ffn(
    store: ParameterStore,
    name: str,
    dim: int,
    hidden: int,
    rng: SplitMix64,
    trainable: bool = True,
) -> FFNParams:
    return FFNParams(
        fc1=init_linear(store, name + ".fc1", dim, hidden, rng, trainable=trainable),
        fc2=init_linear(store, name + ".fc2", hidden, dim, rng, trainable=trainable),
    )


def init_layer_norm(
    store: ParameterStore, name: str, dim: int, trainable: bool = True
) -> LNParams:
    return LNParams(
        gamma=store.register(name + ".gamma", np.ones(dim), trainable),
        beta=store.register(name + ".beta", np.zeros(dim), trainable),
    )


def linear(x: DTensor, p: LinearParams) -> DTensor:
    out = dc.matmul(x, p.w)
    return dc.add(out, p.b) if p.b is not None else out


def ffn(x: DTensor, p: FFNParams) -> DTensor:
    return linear(dc.gelu(linear(x, p.fc1)), p.fc2)


def layer_norm(x: DTensor, p: LNParams) -> DTensor:
    return dc.layer_norm(x, p.gamma, p.beta)


def _attend(q: DTensor, k: DTensor, v: DTensor) -> DTensor:
    """softmax(q k^T / sqrt(d_k)) v"""
    d_k = q.shape[-1]
    scores = dc.scale(dc.matmul(q, dc.transpose(k)), 1.0 / np.sqrt(d_k))
    return dc.matmul(dc.row_softmax(scores), v)


def multi_head_self_attention(x: DTensor, p: AttnParams, n_heads: int) -> DTensor:
    """Full self-attention over the rows of x (T x D)."""
    dim = x.shape[-1]
    if dim % n_heads != 0:
        raise ShapeMismatch(f"n_heads={n_heads} must divide dim={dim}")
    dh = dim // n_heads
    q, k, v = linear(x, p.q), linear(x, p.k), linear(x, p.v)
    heads = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        heads.append(
            _attend(dc.slice_cols(q, lo, hi), dc.slice_cols(k, lo, hi), dc.slice_cols(v, lo, hi))
        )
    merged = heads[0] if n_heads == 1 else dc.concat(heads, axis=1)
    return linear(merged, p.o)


def cross_attention(
    queries: DTensor, memory: DTensor, p: AttnParams, raw_values: bool = False
) -> DTensor:
    """Single-head cross-attention: queries attend to memory rows.

    raw_values skips the value/output projections so outputs are convex
    combinations of the memory rows themselves.
    """
    q = linear(queries, p.q)
    k = linear(memory, p.k)
    if raw_values:
        return _attend(q, k, memory)
    return linear(_attend(q, k, linear(memory, p.v)), p.o)
