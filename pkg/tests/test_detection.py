"""Detection head scores, top-k pooling, and the MIL loss."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsanet import diffcore as dc
from dsanet.detection import DetectionHead, mil_loss, topk_mean
from dsanet.diffcore import ParameterStore
from dsanet.errors import KOutOfRange
from dsanet.prng import SplitMix64

scores_vec = st.lists(
    st.floats(min_value=0.001, max_value=0.999, allow_nan=False), min_size=1, max_size=12
)


def make_head(dim=8, k_fraction=0.25, seed=0):
    store = ParameterStore()
    return DetectionHead(store, dim, SplitMix64(seed), k_fraction=k_fraction), store


def test_zero_initialized_head_scores_half():
    head, store = make_head()
    store["detection.head.w"].values[:] = 0.0
    store["detection.head.b"].values[:] = 0.0
    track = head.score_frames(dc.constant(np.random.default_rng(0).normal(size=(5, 8))))
    assert np.array_equal(track.numpy(), np.full(5, 0.5))


def test_saturated_logits():
    head, store = make_head(dim=1)
    store["detection.head.w"].values[:] = 1.0
    store["detection.head.b"].values[:] = 0.0
    track = head.score_frames(dc.constant(np.array([[30.0], [-30.0]])))
    s = track.numpy()
    assert s[0] > 1.0 - 1e-9 and s[1] < 1e-9
    assert np.all((s > 0.0) & (s < 1.0))


def test_scores_bit_stable():
    head, _ = make_head(seed=3)
    x = dc.constant(SplitMix64(5).normal(40).reshape(5, 8))
    a = head.score_frames(x).numpy()
    b = head.score_frames(x).numpy()
    assert np.array_equal(a, b)


def test_k_for_rounds_up():
    head, _ = make_head(k_fraction=1.0 / 16.0)
    assert head.k_for(1) == 1
    assert head.k_for(16) == 1
    assert head.k_for(17) == 2
    assert head.k_for(64) == 4


# --- top-k pooling -----------------------------------------------------------


def test_topk_mean_matches_sort_oracle():
    p = dc.constant([0.9, 0.1, 0.8, 0.2])
    got = topk_mean(p, 2).item()
    oracle = float(np.sort([0.9, 0.1, 0.8, 0.2])[::-1][:2].sum() / 2)
    assert got == oracle
    assert got == pytest.approx(0.85, abs=1e-12)


def test_topk_full_is_mean():
    vals = [0.3, 0.7, 0.5]
    assert topk_mean(dc.constant(vals), 3).item() == pytest.approx(np.mean(vals), abs=1e-15)


def test_topk_constant_track():
    assert topk_mean(dc.constant([0.25] * 6), 4).item() == 0.25


def test_topk_out_of_range():
    with pytest.raises(KOutOfRange):
        topk_mean(dc.constant([0.5]), 2)
    with pytest.raises(KOutOfRange):
        topk_mean(dc.constant([0.5]), 0)


def test_topk_tie_prefers_lower_index():
    p = dc.leaf(np.array([0.5, 0.5, 0.1]))
    dc.backward(topk_mean(p, 1))
    assert np.array_equal(p.grad, [1.0, 0.0, 0.0])


@given(scores_vec)
@settings(max_examples=40, deadline=None)
def test_topk_permutation_invariant(vals):
    k = max(1, len(vals) // 2)
    base = topk_mean(dc.constant(vals), k).item()
    rng = np.random.default_rng(len(vals))
    for _ in range(3):
        perm = rng.permutation(len(vals))
        assert topk_mean(dc.constant(np.asarray(vals)[perm]), k).item() == pytest.approx(base, abs=1e-12)


@given(scores_vec, st.integers(min_value=0, max_value=11))
@settings(max_examples=40, deadline=None)
def test_topk_monotone(vals, idx):
    if idx >= len(vals):
        return
    k = max(1, len(vals) // 3)
    before = topk_mean(dc.constant(vals), k).item()
    bumped = list(vals)
    bumped[idx] = min(1.0, bumped[idx] + 0.3)
    after = topk_mean(dc.constant(bumped), k).item()
    assert after >= before - 1e-12


# --- MIL loss ----------------------------------------------------------------


def test_mil_loss_confident_correct_is_tiny():
    assert mil_loss(dc.constant(1.0 - 1e-9), 1).item() < 1e-8
    assert mil_loss(dc.constant(1e-9), 0).item() < 1e-8


def test_mil_loss_half_is_log_two():
    expected = -float(np.log(0.5))
    assert mil_loss(dc.constant(0.5), 1).item() == expected
    assert mil_loss(dc.constant(0.5), 0).item() == expected


def test_mil_loss_symmetry_dyadic():
    # 1 - p is exact for dyadic p, so the symmetry holds bitwise
    for p in (0.25, 0.125, 0.75):
        assert mil_loss(dc.constant(p), 1).item() == mil_loss(dc.constant(1.0 - p), 0).item()


@given(st.floats(min_value=1e-6, max_value=1.0 - 1e-6))
def test_mil_loss_nonnegative(p):
    assert mil_loss(dc.constant(p), 1).item() >= 0.0
    assert mil_loss(dc.constant(p), 0).item() >= 0.0


def test_positive_video_gradient_only_at_topk_frames():
    logits = dc.leaf(np.array([2.0, -1.0, 1.5, 0.0, -2.0]))
    p = dc.sigmoid(logits)
    loss = mil_loss(topk_mean(p, 2), 1)
    dc.backward(loss)
    nonzero = np.nonzero(logits.grad)[0].tolist()
    assert nonzero == [0, 2]  # the two largest logits
