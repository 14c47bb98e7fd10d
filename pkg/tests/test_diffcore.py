"""Tensor ops, reverse-mode gradients, checkpoints, finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsanet import diffcore as dc
from dsanet.errors import (
    BadMagic,
    DimensionMismatch,
    KOutOfRange,
    NonFiniteResult,
    NonScalarLoss,
    ShapeMismatch,
    ZeroVector,
)
from dsanet.prng import SplitMix64

finite_vec = st.lists(
    st.floats(min_value=-10, max_value=10, allow_nan=False), min_size=2, max_size=8
)


def rand(shape, seed=0, scale=1.0):
    rng = SplitMix64(seed)
    return rng.normal(int(np.prod(shape))).reshape(shape) * scale


# --- forward semantics -------------------------------------------------------


def test_row_softmax_symmetric_input():
    out = dc.row_softmax(dc.constant([0.0, 0.0]), temperature=1.0)
    assert np.array_equal(out.values, [0.5, 0.5])


def test_row_softmax_rows_sum_to_one():
    x = dc.constant(rand((5, 7), seed=3, scale=4.0))
    out = dc.row_softmax(x, temperature=0.5)
    assert np.all(out.values >= 0.0)
    assert np.allclose(out.values.sum(axis=1), 1.0, atol=1e-6)


def test_cosine_similarity_self_is_one():
    v = dc.constant([0.0, 2.0, 0.0])
    assert dc.cosine_similarity(v, v).item() == 1.0


@given(finite_vec)
def test_cosine_similarity_self_is_one_everywhere(vals):
    v = np.asarray(vals)
    if np.linalg.norm(v) < 1e-6:
        return
    t = dc.constant(v)
    assert dc.cosine_similarity(t, t).item() == pytest.approx(1.0, abs=1e-12)


def test_l2_normalize_three_four_five():
    out = dc.l2_normalize(dc.constant([3.0, 4.0]))
    assert np.array_equal(out.values, [0.6, 0.8])


def test_l2_normalize_zero_vector_raises():
    with pytest.raises(ZeroVector):
        dc.l2_normalize(dc.constant([0.0, 0.0]))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dc.matmul(dc.constant(np.ones((2, 3))), dc.constant(np.ones((2, 3))))


def test_non_finite_result_detected():
    with np.errstate(over="ignore"):
        with pytest.raises(NonFiniteResult):
            dc.exp(dc.constant([1000.0]))


def test_log_is_clamped():
    out = dc.log(dc.constant([0.0, 1.0]))
    assert out.values[0] == np.log(1e-8)
    assert out.values[1] == 0.0


def test_topk_mean_out_of_range():
    with pytest.raises(KOutOfRange):
        dc.topk_mean(dc.constant([1.0, 2.0]), 3)


def test_min_axis_first_argmin_on_ties():
    x = dc.leaf(np.array([[2.0, 1.0, 1.0]]))
    out = dc.min_axis(x, axis=1)
    dc.backward(dc.vsum(out))
    assert np.array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_clip01_bounds_and_gradient():
    x = dc.leaf(np.array([-0.5, 0.25, 1.5]))
    out = dc.clip01(x)
    assert np.array_equal(out.values, [0.0, 0.25, 1.0])
    dc.backward(dc.vsum(out))
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_rescale_rows_to_preserves_target_norms():
    a = dc.constant(rand((4, 6), seed=1))
    t = dc.constant(rand((4, 6), seed=2, scale=3.0))
    out = dc.rescale_rows_to(a, t)
    assert np.allclose(
        np.linalg.norm(out.values, axis=1), np.linalg.norm(t.values, axis=1), atol=1e-12
    )


# --- backward semantics ---------------------------------------------------------


def test_backward_of_sum_is_ones():
    x = dc.leaf(np.array([1.0, 2.0, 3.0]))
    dc.backward(dc.vsum(x))
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_disconnected_input_gets_no_gradient():
    x = dc.leaf(np.array([1.0, 2.0]))
    y = dc.leaf(np.array([3.0, 4.0]))
    dc.backward(dc.vsum(y))
    assert x.grad is None  # no path: gradient is identically zero
    assert np.array_equal(y.grad, [1.0, 1.0])


def test_backward_requires_scalar():
    x = dc.leaf(np.array([1.0, 2.0]))
    with pytest.raises(NonScalarLoss):
        dc.backward(dc.scale(x, 2.0))


def test_backward_accumulates_exactly_double():
    x = dc.leaf(np.array([1.0, -2.0, 3.0]))
    loss = dc.vsum(dc.mul(x, x))
    dc.backward(loss)
    once = x.grad.copy()
    dc.backward(loss)
    assert np.array_equal(x.grad, 2.0 * once)


def test_backward_shared_subgraph_no_double_count():
    # two losses sharing an intermediate: grads must add, not compound
    x = dc.leaf(np.array([1.0, 2.0]))
    shared = dc.scale(x, 3.0)
    dc.backward(dc.vsum(shared))
    dc.backward(dc.vsum(dc.mul(shared, shared)))
    expected = np.array([3.0, 3.0]) + 2.0 * 9.0 * x.values
    assert np.allclose(x.grad, expected, atol=1e-12)


def test_cosine_gradient_matches_finite_differences():
    c = dc.constant(rand(5, seed=8))
    x = dc.leaf(rand(5, seed=9))
    report = dc.finite_diff_check(
        lambda: dc.cosine_similarity(x, c), {"x": x}, step=1e-4, tol=1e-4
    )
    assert report.deterministic
    assert report.max_rel_err < 1e-4


def test_quadratic_finite_differences_are_tight():
    x = dc.leaf(rand(6, seed=4))
    report = dc.finite_diff_check(
        lambda: dc.vsum(dc.mul(x, x)), {"x": x}, step=1e-4, tol=1e-6
    )
    assert report.max_rel_err < 1e-6


def test_finite_diff_flags_nondeterministic_fn():
    x = dc.leaf(np.array([1.0]))
    state = {"n": 0}

    def fn():
        state["n"] += 1
        return dc.vsum(dc.scale(x, float(state["n"])))

    report = dc.finite_diff_check(fn, {"x": x})
    assert not report.deterministic
    assert not report.passed


@pytest.mark.parametrize(
    "build",
    [
        lambda x: dc.vsum(dc.mul(dc.row_softmax(x, 0.7), dc.constant(rand((3, 4), seed=21)))),
        lambda x: dc.vsum(dc.mul(dc.gelu(x), dc.constant(rand((3, 4), seed=22)))),
        lambda x: dc.vsum(dc.mul(dc.sigmoid(x), dc.constant(rand((3, 4), seed=23)))),
        lambda x: dc.vsum(dc.mul(dc.l2_normalize(x), dc.constant(rand((3, 4), seed=24)))),
        lambda x: dc.vsum(dc.mul(dc.relu(x), dc.constant(rand((3, 4), seed=25)))),
        lambda x: dc.mean(dc.min_axis(x, axis=1)),
        lambda x: dc.topk_mean(dc.vsum(x, axis=1), 2),
        lambda x: dc.vsum(dc.mul(dc.rescale_rows_to(x, dc.constant(rand((3, 4), seed=26))), dc.constant(rand((3, 4), seed=27)))),
    ],
)
def test_op_gradients_match_finite_differences(build):
    x = dc.leaf(rand((3, 4), seed=20, scale=0.8) + 0.05)
    report = dc.finite_diff_check(lambda: build(x), {"x": x}, step=1e-5, tol=1e-4)
    assert report.deterministic
    assert report.max_rel_err < 1e-4, report.entries[0].max_rel_err


def test_layer_norm_gradients_match_finite_differences():
    x = dc.leaf(rand((4, 6), seed=30))
    gamma = dc.leaf(rand(6, seed=31, scale=0.3) + 1.0)
    beta = dc.leaf(rand(6, seed=32, scale=0.3))
    w = dc.constant(rand((4, 6), seed=33))
    report = dc.finite_diff_check(
        lambda: dc.vsum(dc.mul(dc.layer_norm(x, gamma, beta), w)),
        {"x": x, "gamma": gamma, "beta": beta},
        step=1e-5,
        tol=1e-4,
    )
    assert report.max_rel_err < 1e-4


def test_matmul_concat_transpose_gradients():
    a = dc.leaf(rand((3, 4), seed=40))
    b = dc.leaf(rand((4, 2), seed=41))
    w = dc.constant(rand((3, 6), seed=42))

    def fn():
        prod = dc.matmul(a, b)  # 3x2
        both = dc.concat([prod, dc.transpose(dc.matmul(dc.transpose(b), dc.transpose(a)))], axis=1)
        return dc.vsum(dc.mul(both, dc.constant(w.values[:, :4])))

    report = dc.finite_diff_check(fn, {"a": a, "b": b}, step=1e-5, tol=1e-4)
    assert report.max_rel_err < 1e-4


# --- parameter store / checkpoints ----------------------------------------------


def test_parameters_are_float32_representable():
    store = dc.ParameterStore()
    t = store.register("w", np.array([0.1, 0.2, 1.0 / 3.0]))
    assert np.array_equal(t.values, t.values.astype(np.float32).astype(np.float64))


def test_duplicate_registration_rejected():
    store = dc.ParameterStore()
    store.register("w", np.zeros(2))
    with pytest.raises(ValueError):
        store.register("w", np.zeros(2))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    store = dc.ParameterStore()
    store.register("a.w", rand((3, 4), seed=50))
    store.register("b", rand(7, seed=51), trainable=False)
    path = tmp_path / "model.dsck"
    store.save(path)

    other = dc.ParameterStore()
    other.register("a.w", np.zeros((3, 4)))
    other.register("b", np.zeros(7), trainable=False)
    other.load(path)
    assert np.array_equal(other["a.w"].values, store["a.w"].values)
    assert np.array_equal(other["b"].values, store["b"].values)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "x.dsck"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(BadMagic):
        dc.ParameterStore.read_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    store = dc.ParameterStore()
    store.register("w", rand((5, 5), seed=52))
    path = tmp_path / "x.dsck"
    store.save(path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(DimensionMismatch):
        dc.ParameterStore.read_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path):
    store = dc.ParameterStore()
    store.register("w", rand((5, 5), seed=53))
    path = tmp_path / "x.dsck"
    store.save(path)
    other = dc.ParameterStore()
    other.register("w", np.zeros((4, 5)))
    with pytest.raises(DimensionMismatch):
        other.load(path)
