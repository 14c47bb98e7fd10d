"""Windowed attention locality, adjacency structure, dual-channel GCN."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsanet import diffcore as dc
from dsanet import nn
from dsanet.diffcore import ParameterStore
from dsanet.prng import SplitMix64
from dsanet.temporal import AdjacencyPair, TemporalConfig, TemporalEncoder, build_adjacency


def make_encoder(dim=8, window=3, n_heads=2, sigma=2.0, gcn_layers=1, seed=0):
    store = ParameterStore()
    cfg = TemporalConfig(window=window, n_heads=n_heads, sigma=sigma, gcn_layers=gcn_layers)
    enc = TemporalEncoder(store, cfg, dim, SplitMix64(seed))
    return enc, store


def rand_frames(n, d, seed=0):
    rng = SplitMix64(seed)
    f = rng.normal(n * d).reshape(n, d)
    return f / np.linalg.norm(f, axis=1, keepdims=True)


# --- windowed attention -------------------------------------------------------


def test_single_frame_video():
    enc, _ = make_encoder()
    out = enc.local_window_attention(dc.constant(rand_frames(1, 8)))
    assert out.shape == (1, 8)
    again = enc.local_window_attention(dc.constant(rand_frames(1, 8)))
    assert np.array_equal(out.values, again.values)


def reference_full_attention(x, enc):
    """Unwindowed multi-head attention oracle in plain numpy."""
    p = enc.attn

    def lin(v, lp):
        return v @ lp.w.values + lp.b.values

    q, k, v = lin(x, p.q), lin(x, p.k), lin(x, p.v)
    dh = x.shape[1] // enc.cfg.n_heads
    heads = []
    for h in range(enc.cfg.n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        scores -= scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(axis=1, keepdims=True)
        heads.append(att @ v[:, sl])
    merged = np.concatenate(heads, axis=1) @ p.o.w.values + p.o.b.values
    res = x + merged
    mu = res.mean(axis=1, keepdims=True)
    var = ((res - mu) ** 2).mean(axis=1, keepdims=True)
    xhat = (res - mu) / np.sqrt(var + 1e-5)
    return enc.ln.gamma.values * xhat + enc.ln.beta.values


def test_window_covering_video_equals_full_attention():
    enc, _ = make_encoder(window=6)
    x = rand_frames(6, 8, seed=5)
    out = enc.local_window_attention(dc.constant(x))
    assert np.allclose(out.values, reference_full_attention(x, enc), atol=1e-10)


def test_attention_never_crosses_window_boundary():
    enc, _ = make_encoder(window=3)
    a = rand_frames(6, 8, seed=1)
    b = a.copy()
    b[4] = rand_frames(1, 8, seed=99)[0]  # perturb only window 1
    out_a = enc.local_window_attention(dc.constant(a)).values
    out_b = enc.local_window_attention(dc.constant(b)).values
    assert np.array_equal(out_a[:3], out_b[:3])  # window 0 untouched
    assert not np.allclose(out_a[3:], out_b[3:])


@given(st.integers(min_value=1, max_value=9))
@settings(max_examples=12, deadline=None)
def test_output_shape_any_length(n):
    enc, _ = make_encoder(window=4)
    out = enc.local_window_attention(dc.constant(rand_frames(n, 8, seed=n)))
    assert out.shape == (n, 8)
    assert np.all(np.isfinite(out.values))


# --- adjacency ------------------------------------------------------------------


def test_identical_frames_give_uniform_similarity_rows():
    f = np.tile(rand_frames(1, 8, seed=3), (5, 1))
    adj = build_adjacency(dc.constant(f), TemporalConfig())
    assert np.allclose(adj.a_sim.values, 1.0 / 5.0, atol=1e-12)


def test_large_sigma_gives_uniform_distance_rows():
    adj = build_adjacency(dc.constant(rand_frames(3, 8)), TemporalConfig(sigma=1e9))
    assert np.allclose(adj.a_dist.values, 1.0 / 3.0, atol=1e-6)


def test_two_frame_distance_adjacency_hand_value():
    adj = build_adjacency(dc.constant(rand_frames(2, 8)), TemporalConfig(sigma=1.0))
    expected = np.exp(-1.0) / (1.0 + np.exp(-1.0))
    assert adj.a_dist.values[0, 1] == pytest.approx(expected, abs=1e-12)
    assert adj.a_dist.values[0, 0] == pytest.approx(0.7311, abs=1e-4)
    assert adj.a_dist.values[0, 1] == pytest.approx(0.2689, abs=1e-4)


@given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=100))
@settings(max_examples=20, deadline=None)
def test_adjacencies_are_row_stochastic(n, seed):
    adj = build_adjacency(dc.constant(rand_frames(n, 8, seed=seed)), TemporalConfig(sigma=1.5))
    for mat in (adj.a_sim.values, adj.a_dist.values):
        assert np.all(mat >= 0.0)
        assert np.allclose(mat.sum(axis=1), 1.0, atol=1e-6)


def test_single_frame_adjacency_is_one():
    adj = build_adjacency(dc.constant(rand_frames(1, 8)), TemporalConfig())
    assert np.array_equal(adj.a_sim.values, [[1.0]])
    assert np.array_equal(adj.a_dist.values, [[1.0]])


# --- dual GCN ---------------------------------------------------------------------


def test_identity_initialized_layer_is_identity():
    enc, store = make_encoder(dim=6, n_heads=2)
    layer = enc.gcn_layers[0]
    layer.w_sim.w.values = np.eye(6)
    layer.w_dist.w.values = np.eye(6)
    layer.w_out.w.values = np.zeros((12, 6))  # zero residual branch
    layer.w_out.b.values = np.zeros(6)
    f = rand_frames(4, 6, seed=2)
    eye = dc.constant(np.eye(4))
    out = enc.dual_gcn(dc.constant(f), AdjacencyPair(a_sim=eye, a_dist=eye))
    assert np.array_equal(out.values, f)


def test_gcn_permutation_equivariance():
    enc, _ = make_encoder(dim=6, n_heads=2, seed=4)
    f = rand_frames(4, 6, seed=8)
    adj = build_adjacency(dc.constant(f), enc.cfg)
    out = enc.dual_gcn(dc.constant(f), adj).values

    perm = np.array([2, 0, 3, 1])
    p = np.eye(4)[perm]
    adj_p = AdjacencyPair(
        a_sim=dc.constant(p @ adj.a_sim.values @ p.T),
        a_dist=dc.constant(p @ adj.a_dist.values @ p.T),
    )
    out_p = enc.dual_gcn(dc.constant(f[perm]), adj_p).values
    assert np.allclose(out_p, out[perm], atol=1e-10)


def test_single_frame_gcn():
    enc, _ = make_encoder(dim=6, n_heads=2)
    f = rand_frames(1, 6, seed=9)
    adj = build_adjacency(dc.constant(f), enc.cfg)
    out = enc.dual_gcn(dc.constant(f), adj)
    assert out.shape == (1, 6)
    assert np.all(np.isfinite(out.values))


def test_full_pipeline_shape_and_finiteness():
    enc, _ = make_encoder(dim=8, window=3, seed=6)
    out = enc(dc.constant(rand_frames(7, 8, seed=12)))
    assert out.shape == (7, 8)
    assert np.all(np.isfinite(out.values))
