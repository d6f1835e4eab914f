import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from selfaux.exceptions import ConfigurationError, NonFiniteError, ShapeError
from selfaux.tensor import (
    Tape,
    Tensor,
    affine,
    avg_pool,
    backward,
    extract_patches,
    finite_diff_gradcheck,
    gradient_errors,
    mse_loss,
    mul,
    relu,
    softmax_xent_loss,
    total,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def matmul_loops(x, w, b):
    out = np.zeros((x.shape[0], w.shape[1]))
    for i in range(x.shape[0]):
        for j in range(w.shape[1]):
            acc = b[j]
            for k in range(x.shape[1]):
                acc += x[i, k] * w[k, j]
            out[i, j] = acc
    return out


# --- Tensor ---------------------------------------------------------------


def test_tensor_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_tensor_is_read_only_copy():
    src = np.arange(3.0)
    t = Tensor(src)
    src[0] = 99
    assert t.data[0] == 0
    with pytest.raises(ValueError):
        t.data[0] = 1


def test_size_matches_shape():
    t = Tensor(np.zeros((3, 4, 2)))
    assert t.size == math.prod(t.shape) == 24


def test_non_finite_op_output_flagged():
    with pytest.raises(NonFiniteError):
        mul(Tensor([1e200]), Tensor([1e200]))


# --- affine ---------------------------------------------------------------


def test_affine_identity():
    out = affine(np.eye(2), np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(out.data, np.eye(2))


def test_affine_hand_sum():
    out = affine([[1.0, 2.0]], [[1.0], [1.0]], [3.0])
    assert out.data.tolist() == [[6.0]]


def test_affine_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    assert np.max(np.abs(affine(x, w, b).data - matmul_loops(x, w, b))) < 1e-12


def test_affine_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        affine(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))


def test_affine_records_on_tape():
    tape = Tape()
    w = tape.leaf(np.ones((2, 1)), "w")
    out = affine(np.ones((1, 2)), w, np.zeros(1))
    assert out.tape is tape and len(tape) == 2


# --- relu -----------------------------------------------------------------


def test_relu_values():
    assert relu([-1.0, 0.0, 2.0]).data.tolist() == [0.0, 0.0, 2.0]
    assert not relu(-np.ones(5)).data.any()


def test_relu_gradient_matches_finite_differences():
    for x0, expected in ((-1.0, 0.0), (2.0, 1.0)):
        tape = Tape()
        x = tape.leaf(np.array([x0]), "x")
        g = backward(total(relu(x)))["x"][0]
        h = 1e-5
        fd = (max(0, x0 + h) - max(0, x0 - h)) / (2 * h)
        assert g == expected and abs(g - fd) < 1e-9


def test_relu_subgradient_at_zero_is_zero():
    tape = Tape()
    x = tape.leaf(np.zeros(3), "x")
    assert not backward(total(relu(x)))["x"].any()


# --- avg_pool -------------------------------------------------------------


def test_avg_pool_examples():
    assert avg_pool(np.array([[1.0, 3.0, 5.0, 7.0]]), 2).data.tolist() == [[2.0, 6.0]]
    x = np.array([[1.0, 3.0, 5.0, 7.0]])
    np.testing.assert_array_equal(avg_pool(x, 1).data, x)
    assert avg_pool(x, 4).data.tolist() == [[4.0]]


def test_avg_pool_rejects_non_divisor():
    with pytest.raises(ConfigurationError):
        avg_pool(np.zeros((1, 5)), 2)


@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_avg_pool_preserves_mean(pool, groups, data):
    x = data.draw(arrays(np.float64, (2, pool * groups), elements=finite))
    out = avg_pool(x, pool).data
    np.testing.assert_allclose(out.mean(axis=1), x.mean(axis=1), atol=1e-12, rtol=0)


# --- mse ------------------------------------------------------------------


def test_mse_examples():
    assert float(mse_loss([[1.0]], [[1.0]])) == 0.0
    p, t = [[1.0], [1.0]], [[0.0], [0.0]]
    assert float(mse_loss(p, t, "mean")) == 1.0
    assert float(mse_loss(p, t, "sum")) == 2.0


def test_mse_matches_loop_oracle():
    rng = np.random.default_rng(1)
    p, t = rng.normal(size=(10, 1)), rng.normal(size=(10, 1))
    acc = 0.0
    for i in range(10):
        acc += (p[i, 0] - t[i, 0]) ** 2
    assert abs(float(mse_loss(p, t)) - acc / 10) < 1e-12


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        mse_loss(np.zeros((2, 1)), np.zeros((3, 1)))


# --- softmax cross-entropy ------------------------------------------------


def test_xent_uniform_is_log_c():
    assert abs(float(softmax_xent_loss(np.zeros((4, 10)), np.arange(4))) - math.log(10)) < 1e-12


def test_xent_saturated():
    logits = np.zeros((1, 10))
    logits[0, 3] = 50
    assert float(softmax_xent_loss(logits, [3])) < 1e-9


def test_xent_temperature_identity():
    rng = np.random.default_rng(2)
    logits, labels = rng.normal(size=(6, 5)) * 3, rng.integers(5, size=6)
    a = float(softmax_xent_loss(logits, labels, temperature=2.0))
    b = float(softmax_xent_loss(logits / 2, labels, temperature=1.0))
    assert abs(a - b) < 1e-12


def test_xent_is_stable_for_huge_logits():
    assert np.isfinite(float(softmax_xent_loss([[1000.0, -1000.0]], [1])))


def test_xent_errors():
    with pytest.raises(ValueError):
        softmax_xent_loss(np.zeros((1, 3)), [3])
    with pytest.raises(ValueError):
        softmax_xent_loss(np.zeros((1, 3)), [-1])
    with pytest.raises(ValueError):
        softmax_xent_loss(np.zeros((1, 3)), [0], temperature=0.0)


@given(arrays(np.float64, (3, 4), elements=finite), st.lists(st.integers(0, 3), min_size=3, max_size=3))
def test_xent_non_negative(logits, labels):
    assert float(softmax_xent_loss(logits, labels)) >= 0


# --- backward -------------------------------------------------------------


def test_backward_square():
    tape = Tape()
    th = tape.leaf(np.array([3.0]), "theta")
    assert backward(total(mul(th, th)))["theta"][0] == 6.0


def test_backward_unreached_leaf_is_zero():
    tape = Tape()
    th = tape.leaf(np.array([3.0]), "theta")
    other = tape.leaf(np.array([1.0, 2.0]), "other")
    grads = backward(total(mul(th, th)))
    assert grads["other"].tolist() == [0.0, 0.0]


def test_backward_non_scalar_rejected():
    tape = Tape()
    x = tape.leaf(np.ones(3), "x")
    with pytest.raises(ShapeError):
        backward(relu(x))


def test_backward_seed_for_non_scalar():
    tape = Tape()
    x = tape.leaf(np.array([1.0, -1.0, 2.0]), "x")
    g = backward(relu(x), seed=np.array([1.0, 1.0, 3.0]))["x"]
    assert g.tolist() == [1.0, 0.0, 3.0]


def test_tape_is_topological_and_single_adjoint_per_leaf():
    tape = Tape()
    w = tape.leaf(np.ones((2, 2)), "w")
    x = affine(np.ones((1, 2)), w, np.zeros(2))
    y = affine(x, w, np.zeros(2))  # w used twice: adjoints accumulate into one entry
    grads = backward(total(y))
    for i, node in enumerate(tape.nodes):
        assert all(p is None or p < i for p in node.parents)
    assert set(grads) == {"w"} and grads["w"].shape == (2, 2)


def test_duplicate_leaf_name_rejected():
    tape = Tape()
    tape.leaf(np.zeros(1), "a")
    with pytest.raises(ValueError):
        tape.leaf(np.zeros(1), "a")


def test_mixed_tapes_rejected():
    a, b = Tape().leaf(np.ones(1), "a"), Tape().leaf(np.ones(1), "b")
    with pytest.raises(ValueError):
        mul(a, b)


def _mlp_loss(x, y):
    def fn(p):
        h = relu(affine(x, p["w1"], p["b1"]))
        return mse_loss(affine(h, p["w2"], p["b2"]), y)

    return fn


def test_two_layer_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    params = {
        "w1": rng.normal(size=(4, 6)),
        "b1": rng.normal(size=6) * 0.1,
        "w2": rng.normal(size=(6, 2)),
        "b2": rng.normal(size=2) * 0.1,
    }
    x, y = rng.normal(size=(8, 4)), rng.normal(size=(8, 2))
    assert finite_diff_gradcheck(_mlp_loss(x, y), params, h=1e-5) < 1e-4


def test_patches_gradient():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 6 * 6 * 2))

    def fn(p):
        cols = extract_patches(p["x"], (6, 6, 2), 3, 2)
        return total(mul(cols, Tensor(np.linspace(-1, 1, cols.size).reshape(cols.shape))))

    assert finite_diff_gradcheck(fn, {"x": x}) < 1e-7


def test_patches_layout():
    x = np.arange(4 * 4 * 1, dtype=float).reshape(1, 16)
    cols = extract_patches(x, (4, 4, 1), 2, 2).data
    # four non-overlapping 2x2 windows in row-major order
    assert cols.shape == (4, 4)
    assert cols[0].tolist() == [0, 1, 4, 5]
    assert cols[3].tolist() == [10, 11, 14, 15]


# --- gradcheck ------------------------------------------------------------


def test_gradcheck_quadratic():
    def fn(p):
        return total(mul(p["a"], p["a"]))

    assert finite_diff_gradcheck(fn, {"a": np.array([0.5, -2.0, 3.0])}) < 1e-8


def test_gradcheck_dead_relu_entry_is_zero_both_ways():
    x = np.array([[1.0]])

    def fn(p):
        return total(relu(affine(x, p["w"], p["b"])))

    params = {"w": np.array([[1.0, 1.0]]), "b": np.array([-5.0, 0.5])}  # first unit dead
    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in params.items()}
    assert backward(fn(leaves))["w"][0, 0] == 0.0
    errs = gradient_errors(fn, params)
    assert max(errs.values()) < 1e-9


def test_gradcheck_skips_kinks():
    x = np.array([[1.0]])

    def fn(p):
        return total(relu(affine(x, p["w"], np.zeros(1))))

    skipped = {}
    errs = gradient_errors(fn, {"w": np.array([[1e-7]])}, skipped=skipped)  # +-h straddles 0
    assert skipped["w"] == 1 and errs["w"] == 0.0


def test_gradcheck_detects_wrong_rule(monkeypatch):
    from selfaux import tensor

    monkeypatch.setattr(tensor.ReLU, "backward", staticmethod(lambda ctx, g: (np.where(ctx["mask"], 1.1 * g, 0.0),)))
    rng = np.random.default_rng(5)
    params = {"w1": rng.normal(size=(3, 4)), "b1": np.zeros(4), "w2": rng.normal(size=(4, 1)), "b2": np.zeros(1)}
    assert finite_diff_gradcheck(_mlp_loss(rng.normal(size=(5, 3)), rng.normal(size=(5, 1))), params) > 1e-2


def test_gradcheck_rejects_bad_h():
    with pytest.raises(ValueError):
        finite_diff_gradcheck(lambda p: total(p["a"]), {"a": np.ones(1)}, h=0)


# --- determinism & concurrency --------------------------------------------


@settings(max_examples=25)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_bit_identical_outputs(x, w):
    b = np.zeros(2)
    a1 = relu(affine(x, w, b)).data
    a2 = relu(affine(x, w, b)).data
    assert a1.tobytes() == a2.tobytes()


def test_tapes_on_threads_are_independent():
    results = {}

    def work(i):
        tape = Tape()
        th = tape.leaf(np.array([float(i)]), "t")
        results[i] = backward(total(mul(th, th)))["t"][0]

    threads = [threading.Thread(target=work, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {i: 2.0 * i for i in range(8)}
