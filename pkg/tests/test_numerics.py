import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tsexperts.errors import DivergenceError, ShapeError
from tsexperts.numerics import ParamStore, as_matrix, finite_diff_check, loss_and_grads, matmul


def quadratic(name="w"):
    def fn(params, backward=True):
        w = params[name]
        return float(np.sum(w * w)), ({name: 2 * w} if backward else None)

    return fn


def linear(coeffs, name="w"):
    coeffs = np.asarray(coeffs, dtype=float)

    def fn(params, backward=True):
        return float(coeffs @ params[name]), ({name: coeffs.copy()} if backward else None)

    return fn


def test_matmul_identity_and_zero(rng):
    m = rng.normal(size=(2, 3))
    assert np.array_equal(matmul(np.eye(2), m), m)
    assert np.array_equal(matmul(np.zeros((2, 2)), m), np.zeros((2, 3)))


def test_matmul_rank_one_by_hand():
    assert np.array_equal(matmul([[3.0], [4.0]], [[1.0, 2.0]]), [[3.0, 6.0], [4.0, 8.0]])


def test_matmul_shape_mismatch_reports_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


small = arrays(np.float64, (3, 3), elements=st.floats(-10, 10))


@given(small, small, small)
def test_matmul_associative(a, b, c):
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    assert np.max(np.abs(left - right)) <= 1e-10 * max(1.0, np.max(np.abs(left)))


def test_as_matrix_rejects_nonfinite():
    with pytest.raises(ValueError):
        as_matrix([[1.0, np.nan]])
    m = as_matrix([[1, 2], [3, 4]], 2, 2)
    assert not m.flags.writeable


def test_loss_and_grads_quadratic():
    p = ParamStore()
    p.add("w", [3.0])
    loss, grads = loss_and_grads(quadratic(), p)
    assert loss == 9.0
    assert grads["w"].tolist() == [6.0]
    assert p.grads["w"].tolist() == [6.0]


def test_loss_and_grads_linear_and_constant():
    p = ParamStore()
    p.add("w", [0.7, -1.1])
    _, grads = loss_and_grads(linear([2.0, 5.0]), p)
    assert grads["w"].tolist() == [2.0, 5.0]

    q = ParamStore()
    q.add("w", [1.0, 2.0])
    _, grads = loss_and_grads(lambda params, backward=True: (4.0, {}), q)
    assert grads["w"].tolist() == [0.0, 0.0]


def test_gradients_accumulate_until_zeroed():
    p = ParamStore()
    p.add("w", [3.0])
    loss_and_grads(quadratic(), p)
    loss_and_grads(quadratic(), p)
    assert p.grads["w"].tolist() == [12.0]
    p.zero_grad()
    assert p.grads["w"].tolist() == [0.0]


def test_frozen_tensors_never_accumulate():
    p = ParamStore()
    p.add("w", [3.0])
    p.add("v", [1.0, 2.0], trainable=False)

    def fn(params, backward=True):
        w, v = params["w"], params["v"]
        return float(w @ w + v @ v), {"w": 2 * w, "v": 2 * v}

    for _ in range(5):
        _, grads = loss_and_grads(fn, p)
    assert "v" not in grads
    assert np.array_equal(p.grads["v"], [0.0, 0.0])
    assert p.grads["w"].tolist() == [30.0]


def test_nonfinite_loss_aborts():
    p = ParamStore()
    p.add("w", [1.0])
    with pytest.raises(DivergenceError):
        loss_and_grads(lambda params, backward=True: (float("nan"), {}), p)


def test_loss_and_grads_is_repeatable():
    p = ParamStore()
    p.add("w", [0.3, -0.2])
    a = loss_and_grads(linear([2.0, 5.0]), p)
    b = loss_and_grads(linear([2.0, 5.0]), p)
    assert a[0] == b[0] and np.array_equal(a[1]["w"], b[1]["w"])


def test_finite_diff_quadratic_and_constant(rng):
    p = ParamStore()
    p.add("w", rng.normal(size=5))
    assert finite_diff_check(quadratic(), p, 1e-5) < 1e-7
    assert finite_diff_check(lambda params, backward=True: (2.5, {}), p, 1e-5) == 0.0


def test_finite_diff_catches_wrong_gradient(rng):
    p = ParamStore()
    p.add("w", rng.normal(size=3))

    def wrong(params, backward=True):
        w = params["w"]
        return float(np.sum(w * w)), {"w": 3 * w}

    assert finite_diff_check(wrong, p, 1e-5) > 1e-2


def test_finite_diff_restores_parameters(rng):
    p = ParamStore()
    w0 = rng.normal(size=4)
    p.add("w", w0)
    finite_diff_check(quadratic(), p, 1e-5)
    assert np.array_equal(p["w"], w0)


def test_finite_diff_rejects_bad_step():
    p = ParamStore()
    p.add("w", [1.0])
    with pytest.raises(ValueError):
        finite_diff_check(quadratic(), p, 0.0)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-5, 5)))
def test_finite_diff_quadratic_property(w):
    p = ParamStore()
    p.add("w", w)
    assert finite_diff_check(quadratic(), p, 1e-5) < 1e-7


def test_param_store_counts_and_flags():
    p = ParamStore()
    p.add("a", np.zeros((2, 3)))
    p.add("b", np.zeros(4), trainable=False)
    assert p.count() == 10
    assert p.count(trainable_only=True) == 6
    p.only_trainable(["b"])
    assert p.trainable_names() == ["b"]
    with pytest.raises(KeyError):
        p.add("a", [1.0])
