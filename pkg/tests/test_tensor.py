import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pranet import tensor as tn
from pranet.exceptions import ContractError, DimensionError, DomainError, NumericError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def leaf(a):
    return tn.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def grad_of(fn, *arrays):
    leaves = [leaf(a) for a in arrays]
    tn.backward(fn(*leaves))
    return [t.grad for t in leaves]


def test_matmul_gradient_matches_closed_form(rng):
    A, B, R = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    gA, gB = grad_of(lambda a, b: tn.reduce("sum", tn.reduce("sum", tn.mul(tn.matmul(a, b), R), 1), 0), A, B)
    np.testing.assert_allclose(gA, R @ B.T, rtol=1e-12)
    np.testing.assert_allclose(gB, A.T @ R, rtol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        tn.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))


def test_bmm_transpose(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4))
    out = tn.bmm(tn.Tensor(a), tn.Tensor(b), transpose_b=True)
    np.testing.assert_allclose(out.data, np.einsum("pik,pjk->pij", a, b), rtol=1e-12)


def test_gradients_accumulate_over_shared_use():
    x = leaf([2.0])
    tn.backward(tn.reduce("sum", tn.add(tn.mul(x, x), x), 0))
    np.testing.assert_allclose(x.grad, [5.0])


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        tn.backward(tn.add(leaf([1.0, 2.0]), 1.0))


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with tn.no_grad():
        y = tn.mul(x, x)
    assert y._backward is None and not tn.needs_grad(y)
    assert tn.is_grad_enabled()


def test_leaky_relu_values_and_gradient():
    x = leaf([-2.0, 0.0, 3.0])
    y = tn.leaky_relu(x, 0.2)
    np.testing.assert_allclose(y.data, [-0.4, 0.0, 3.0])
    tn.backward(tn.reduce("sum", y, 0))
    np.testing.assert_allclose(x.grad, [0.2, 0.2, 1.0])


def test_reduce_max_sends_gradient_to_first_maximum():
    x = leaf([[1.0, 3.0, 3.0]])
    tn.backward(tn.reduce("sum", tn.reduce("max", x, 1), 0))
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_reduce_rejects_empty_axis_and_bad_axis():
    with pytest.raises(DomainError):
        tn.reduce("sum", tn.Tensor(np.ones((2, 0))), 1)
    with pytest.raises(DimensionError):
        tn.reduce("sum", tn.Tensor(np.ones((2, 2))), 2)


@given(arrays(np.float64, (5, 7), elements=finite))
def test_order_invariant_mean_is_bit_identical_under_permutation(x):
    perm = np.random.default_rng(0).permutation(5)
    a = tn.reduce("mean", tn.Tensor(x), 0, order_invariant=True).data
    b = tn.reduce("mean", tn.Tensor(x[perm]), 0, order_invariant=True).data
    assert np.array_equal(a, b)


@given(arrays(np.float64, (4, 6), elements=finite), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    p = tn.softmax_rows(tn.Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(tn.softmax_rows(tn.Tensor(x + c)).data, p, atol=1e-9)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        tn.softmax(tn.Tensor([[1.0, np.inf]]))


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.normal(size=(3, 5)) * 10
    np.testing.assert_allclose(tn.log_softmax(tn.Tensor(x)).data, np.log(tn.softmax(tn.Tensor(x)).data), atol=1e-12)


def test_gather_scatters_duplicates():
    x = leaf(np.arange(6.0).reshape(3, 2))
    out = tn.gather(x, np.array([0, 0, 2]))
    tn.backward(tn.reduce("sum", tn.reduce("sum", out, 1), 0))
    np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])


def test_gather_index_out_of_range():
    with pytest.raises(IndexError):
        tn.gather(tn.Tensor(np.ones((2, 2))), np.array([2]))


def test_weighted_gather_matches_loop(rng):
    X = rng.normal(size=(6, 4))
    idx = rng.integers(0, 6, size=(5, 3))
    w = rng.random((5, 3))
    out = tn.weighted_gather(tn.Tensor(X), idx, w).data
    ref = np.array([[sum(w[v, u] * X[idx[v, u], c] for u in range(3)) for c in range(4)] for v in range(5)])
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_concat_and_reshape_round_trip(rng):
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 1)))
    out = tn.reshape(tn.concat([a, b], axis=-1), (8,))
    tn.backward(tn.reduce("sum", tn.mul(out, np.arange(8.0)), 0))
    np.testing.assert_array_equal(a.grad, [[0, 1, 2], [4, 5, 6]])
    np.testing.assert_array_equal(b.grad, [[3], [7]])


def test_batchnorm_train_normalises_and_updates_buffers(rng):
    X = rng.normal(3.0, 2.0, size=(50, 4))
    rm, rv = np.zeros(4), np.ones(4)
    out = tn.batchnorm(tn.Tensor(X), tn.Tensor(np.ones(4)), tn.Tensor(np.zeros(4)), rm, rv, training=True)
    np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=0), X.var(axis=0) / (X.var(axis=0) + tn.BN_EPS), rtol=1e-9)
    np.testing.assert_allclose(rm, 0.1 * X.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * X.var(axis=0, ddof=1), rtol=1e-12)


def test_batchnorm_train_needs_two_rows():
    with pytest.raises(DomainError):
        tn.batchnorm(tn.Tensor(np.ones((1, 2))), tn.Tensor(np.ones(2)), tn.Tensor(np.zeros(2)),
                     np.zeros(2), np.ones(2), training=True)


def test_dropout_identity_in_eval_and_needs_rng_in_train():
    x = tn.Tensor(np.ones((3, 3)))
    assert tn.dropout(x, 0.5, None, training=False) is x
    with pytest.raises(ContractError):
        tn.dropout(x, 0.5, None, training=True)


def test_float32_is_preserved():
    x = tn.Tensor(np.ones((2, 2), dtype=np.float32))
    assert tn.sigmoid(tn.matmul(x, x)).dtype == np.float32


def test_record_branches_logs_discrete_choices():
    with tn.record_branches() as log:
        tn.leaky_relu(tn.Tensor([-1.0, 1.0]))
        tn.reduce("max", tn.Tensor([[0.0, 2.0]]), 1)
    assert len(log) == 2
    np.testing.assert_array_equal(log[0], [True, False])
    np.testing.assert_array_equal(log[1], [1])
