"""Normality modeling: candidate selection, prototypes, reconstruction."""

import numpy as np
import pytest

from dsanet import diffcore as dc
from dsanet.detection import ScoreTrack
from dsanet.diffcore import ParameterStore
from dsanet.errors import LengthMismatch, MOutOfRange, ZeroVector
from dsanet.prng import SplitMix64
from dsanet.sgnm import (
    NormalityModel,
    SGNMConfig,
    compact_loss,
    consistency_loss,
    reconstruction_score,
    select_normal_candidates,
)


def track(values):
    return ScoreTrack("v", dc.constant(np.asarray(values, dtype=np.float64)))


def unit_rows(n, d, seed=0):
    f = SplitMix64(seed).normal(n * d).reshape(n, d)
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def make_model(dim=8, k=2, layers=1, seed=0):
    store = ParameterStore()
    cfg = SGNMConfig(n_prototypes=k, m_fraction=0.8, decoder_layers=layers)
    return NormalityModel(store, cfg, dim, SplitMix64(seed)), store


# --- candidate selection --------------------------------------------------------


def test_select_lowest_scores_in_order():
    f = dc.constant(np.arange(20.0).reshape(5, 4))
    sel, idx = select_normal_candidates(f, track([0.1, 0.2, 0.3, 0.4, 0.5]), 2)
    assert idx.tolist() == [0, 1]
    assert np.array_equal(sel.values, f.values[:2])


def test_select_preserves_temporal_order():
    f = dc.constant(np.arange(20.0).reshape(5, 4))
    sel, idx = select_normal_candidates(f, track([0.5, 0.1, 0.4, 0.2, 0.3]), 3)
    assert idx.tolist() == [1, 3, 4]  # sorted by frame index, not by score


def test_select_all_is_identity():
    f = dc.constant(np.arange(12.0).reshape(3, 4))
    sel, idx = select_normal_candidates(f, track([0.9, 0.1, 0.5]), 3)
    assert np.array_equal(sel.values, f.values)


def test_select_tie_prefers_lower_index():
    f = dc.constant(np.arange(16.0).reshape(4, 4))
    sel, idx = select_normal_candidates(f, track([0.2, 0.1, 0.2, 0.3]), 2)
    assert idx.tolist() == [0, 1]


def test_select_m_out_of_range():
    f = dc.constant(np.ones((3, 4)))
    with pytest.raises(MOutOfRange):
        select_normal_candidates(f, track([0.1, 0.2, 0.3]), 4)


def test_selection_indices_carry_no_gradient_but_features_do():
    f = dc.leaf(np.arange(12.0).reshape(3, 4))
    sel, _ = select_normal_candidates(f, track([0.3, 0.1, 0.2]), 2)
    dc.backward(dc.vsum(sel))
    assert np.array_equal(f.grad, [[0.0] * 4, [1.0] * 4, [1.0] * 4])


# --- prototype extraction --------------------------------------------------------


def test_single_candidate_yields_that_frame_everywhere():
    model, _ = make_model(k=3)
    f_n = dc.constant(unit_rows(1, 8, seed=1))
    patterns = model.extract_dnps(f_n).patterns.values
    assert np.allclose(patterns, np.tile(f_n.values, (3, 1)), atol=1e-12)


def test_identical_candidates_give_identical_prototypes():
    model, _ = make_model(k=4)
    f_n = dc.constant(np.tile(unit_rows(1, 8, seed=2), (5, 1)))
    patterns = model.extract_dnps(f_n).patterns.values
    assert np.allclose(patterns, patterns[0], atol=1e-12)


def test_prototypes_bit_stable():
    model, _ = make_model(k=2, seed=5)
    f_n = dc.constant(unit_rows(6, 8, seed=3))
    a = model.extract_dnps(f_n).patterns.values
    b = model.extract_dnps(f_n).patterns.values
    assert np.array_equal(a, b)


# --- compactness loss --------------------------------------------------------------


def test_compact_loss_zero_when_candidates_equal_prototypes():
    rows = np.eye(8)[:3] * 2.0  # axis-aligned: cosine arithmetic is exact
    assert compact_loss(dc.constant(rows), dc.constant(rows)).item() == 0.0


def test_compact_loss_orthogonal_single_pair():
    f_n = dc.constant(np.eye(8)[:1])
    p = dc.constant(np.eye(8)[1:2])
    assert compact_loss(f_n, p).item() == 1.0


def test_compact_loss_hand_value():
    p = dc.constant(np.array([[1.0, 0.0]]))
    f_n = dc.constant(np.array([[2.0, 0.0], [1.0, np.sqrt(3.0)]]))  # cos 1.0 and 0.5
    assert compact_loss(f_n, p).item() == pytest.approx(0.25, abs=1e-12)


def test_compact_loss_zero_vector_raises():
    with pytest.raises(ZeroVector):
        compact_loss(dc.constant(np.zeros((1, 4))), dc.constant(np.eye(4)[:1]))


# --- reconstruction ------------------------------------------------------------------


def test_depth_one_reconstruction_spans_prototypes():
    model, _ = make_model(dim=8, k=2, layers=1, seed=7)
    f = dc.constant(unit_rows(6, 8, seed=11))
    dnps = model.extract_dnps(dc.constant(unit_rows(4, 8, seed=12)))
    rec = model.reconstruct(f, dnps).values
    sv = np.linalg.svd(rec, compute_uv=False)
    assert sv[2] < 1e-4 * sv[0]  # rank <= K


def test_identical_prototypes_give_rank_one_reconstruction():
    model, _ = make_model(dim=8, k=3, layers=1, seed=8)
    one = unit_rows(1, 8, seed=13)
    dnps = model.extract_dnps(dc.constant(np.tile(one, (4, 1))))
    rec = model.reconstruct(dc.constant(unit_rows(5, 8, seed=14)), dnps).values
    sv = np.linalg.svd(rec, compute_uv=False)
    assert sv[1] < 1e-10 * sv[0]


def test_reconstruction_deterministic():
    model, _ = make_model(dim=8, k=2, layers=3, seed=9)
    f = dc.constant(unit_rows(5, 8, seed=15))
    dnps = model.extract_dnps(dc.constant(unit_rows(4, 8, seed=16)))
    assert np.array_equal(model.reconstruct(f, dnps).values, model.reconstruct(f, dnps).values)


# --- reconstruction score / consistency ------------------------------------------------


def test_perfect_reconstruction_scores_zero():
    exact = dc.constant(np.eye(8)[:4] * 2.0)
    assert np.array_equal(reconstruction_score(exact, exact).numpy(), np.zeros(4))
    f = dc.constant(unit_rows(4, 8, seed=17))
    s = reconstruction_score(f, f).numpy()
    assert np.all((s >= 0.0) & (s < 1e-14))


def test_antiparallel_reconstruction_scores_one():
    f = dc.constant(np.eye(4)[:3])
    s = reconstruction_score(f, dc.constant(-np.eye(4)[:3])).numpy()
    assert np.array_equal(s, np.ones(3))


def test_orthogonal_reconstruction_scores_half():
    f = dc.constant(np.eye(4)[:2])
    g = dc.constant(np.eye(4)[2:4])
    assert np.array_equal(reconstruction_score(f, g).numpy(), [0.5, 0.5])


def test_score_range_always_unit_interval():
    for seed in range(5):
        f = dc.constant(unit_rows(6, 8, seed=seed))
        g = dc.constant(unit_rows(6, 8, seed=seed + 50))
        s = reconstruction_score(f, g).numpy()
        assert np.all((s >= 0.0) & (s <= 1.0))


def test_consistency_loss_identity_and_hand_value():
    assert consistency_loss(track([0.2, 0.8]), track([0.2, 0.8])).item() == 0.0
    assert consistency_loss(track([1.0, 0.0]), track([0.0, 0.0])).item() == 0.5


def test_consistency_loss_symmetric():
    a, b = track([0.9, 0.3, 0.4]), track([0.1, 0.5, 0.7])
    assert consistency_loss(a, b).item() == consistency_loss(b, a).item()


def test_consistency_loss_length_mismatch():
    with pytest.raises(LengthMismatch):
        consistency_loss(track([0.1]), track([0.1, 0.2]))


def test_consistency_gradients_reach_both_tracks():
    a = dc.leaf(np.array([0.9, 0.2]))
    b = dc.leaf(np.array([0.1, 0.4]))
    loss = consistency_loss(ScoreTrack("a", a), ScoreTrack("b", b))
    dc.backward(loss)
    assert np.any(a.grad != 0.0) and np.any(b.grad != 0.0)
    assert np.allclose(a.grad, -b.grad, atol=1e-15)
