import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mdsrec.errors import GraphError, MaskError, NonDeterministicError, ShapeError
from mdsrec.numkit import (SparseMatrix, Tensor, backward, concat, dot, embedding_lookup, gelu, grad_check,
                           layer_norm, log_softmax, matmul, no_grad, parameter, relu, row_softmax,
                           sparse_dense_matmul, tsum)
from mdsrec.seqenc import init_encoder, transformer_forward

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_matmul_identity_returns_operand(rng):
    a = rng.standard_normal((3, 4))
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_uniform_logits_give_uniform_softmax():
    out = row_softmax(Tensor(np.zeros((1, 3)))).data
    assert np.allclose(out, 1 / 3, atol=0, rtol=1e-15)


def test_masked_softmax_zeroes_forbidden_entries():
    out = row_softmax(Tensor(np.array([[1.0, 2.0, 3.0]])), np.array([[True, False, True]])).data
    assert out[0, 1] == 0.0
    assert out.sum() == pytest.approx(1.0, abs=1e-15)


def test_all_forbidden_softmax_row_is_an_error():
    with pytest.raises(MaskError):
        row_softmax(Tensor(np.zeros((2, 3))), np.array([[True, True, True], [False, False, False]]))


@given(arrays(np.float64, (4, 6), elements=finite), arrays(bool, (4, 6)))
def test_softmax_rows_are_probability_vectors(x, mask):
    mask[:, 0] = True
    out = row_softmax(Tensor(x), mask).data
    assert np.all((out >= 0) & (out <= 1))
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_sum_gradient_is_all_ones(rng):
    x = parameter(rng.standard_normal((3, 4)))
    backward(tsum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_dot_gradient_is_other_operand(rng):
    x, y = parameter(rng.standard_normal(5)), Tensor(rng.standard_normal(5))
    backward(dot(x, y))
    assert np.array_equal(x.grad, y.data)


def test_two_backward_passes_accumulate_exactly_double(rng):
    w = parameter(rng.standard_normal((3, 3)))
    x = Tensor(rng.standard_normal((4, 3)))
    loss = tsum(gelu(x @ w))
    backward(loss)
    once = w.grad.copy()
    backward(loss)
    assert np.array_equal(w.grad, 2 * once)


def test_backward_on_constant_is_a_graph_error():
    with pytest.raises(GraphError):
        backward(tsum(Tensor(np.ones(3))))


def test_backward_needs_scalar(rng):
    with pytest.raises(ShapeError):
        backward(parameter(rng.standard_normal(3)) * 2.0)


def test_no_grad_records_nothing(rng):
    w = parameter(rng.standard_normal(3))
    with no_grad():
        out = tsum(w * 2.0)
    assert not out.requires_grad


def test_embedding_lookup_scatters_repeated_ids(rng):
    table = parameter(rng.standard_normal((4, 2)))
    backward(tsum(embedding_lookup(table, np.array([[1, 1, 3]]))))
    assert np.array_equal(table.grad, np.array([[0, 0], [2, 2], [0, 0], [1, 1]], dtype=float))


def test_concat_splits_gradient(rng):
    a, b = parameter(rng.standard_normal((2, 3))), parameter(rng.standard_normal((1, 3)))
    backward(tsum(concat([a, b], axis=0) * np.arange(3.0)))
    assert np.array_equal(a.grad, np.tile(np.arange(3.0), (2, 1)))
    assert np.array_equal(b.grad, np.arange(3.0)[None])


def test_sparse_dense_matmul_matches_dense_oracle(rng):
    for _ in range(20):
        dense = rng.standard_normal((6, 6)) * (rng.random((6, 6)) < 0.4)
        d = rng.standard_normal((6, 3))
        s = SparseMatrix.from_dense(dense)
        assert np.allclose(sparse_dense_matmul(s, Tensor(d)).data, dense @ d, rtol=1e-14, atol=1e-14)


@given(arrays(np.int64, (6, 6), elements=st.integers(-3, 3)), arrays(np.int64, (6, 2), elements=st.integers(-5, 5)))
def test_sparse_dense_matmul_exact_on_integers(a, d):
    s = SparseMatrix.from_dense(a.astype(float))
    assert np.array_equal(sparse_dense_matmul(s, Tensor(d.astype(float))).data, (a @ d).astype(float))


def test_sparse_matmul_gradient_is_transpose_product(rng):
    dense = rng.standard_normal((5, 4)) * (rng.random((5, 4)) < 0.5)
    d = parameter(rng.standard_normal((4, 3)))
    g = rng.standard_normal((5, 3))
    backward(tsum(sparse_dense_matmul(SparseMatrix.from_dense(dense), d) * g))
    assert np.allclose(d.grad, dense.T @ g)


def test_sparse_rejects_duplicates():
    with pytest.raises(ShapeError):
        SparseMatrix.from_coo(2, 2, [0, 0], [1, 1], [1.0, 2.0])


def test_sparse_rejects_non_finite():
    with pytest.raises(Exception):
        SparseMatrix.from_coo(2, 2, [0], [1], [np.inf])


def test_sparse_round_trip_and_sorted_columns(rng):
    dense = rng.standard_normal((5, 7)) * (rng.random((5, 7)) < 0.5)
    s = SparseMatrix.from_dense(dense)
    assert np.array_equal(s.to_dense(), dense)
    assert np.array_equal(s.transpose().to_dense(), dense.T)
    for i in range(5):
        cols, _ = s.row(i)
        assert np.all(np.diff(cols) > 0)


def test_linear_least_squares_grad_check_is_exact(rng):
    w = parameter(rng.standard_normal((3, 2)), name="w")
    x, y = Tensor(rng.standard_normal((5, 3))), Tensor(rng.standard_normal((5, 2)))

    def closure():
        r = x @ w - y
        return tsum(r * r)

    report = grad_check(closure, {"w": w}, step=1e-5, tol=1e-9)
    assert report.passed, report.lines()


def test_transformer_block_grad_check(rng):
    enc = init_encoder(rng, d=8, n_layers=1, n_heads=1, dtype=np.float64)
    params = enc.named("enc")
    for name, p in params.items():
        p.data[...] = rng.standard_normal(p.shape) * 0.5 + (1.0 if name.endswith("_g") else 0.0)
    x = Tensor(rng.standard_normal((2, 4, 8)))
    mask = np.array([[False, True, True, True], [True, True, True, True]])
    target = rng.standard_normal((2, 4, 8))

    def closure():
        return tsum(transformer_forward(x, mask, enc)[-1] * target)

    report = grad_check(closure, params, step=1e-5, tol=1e-4)
    assert report.passed, report.lines()


def test_layer_norm_and_activations_grad_check(rng):
    x = parameter(rng.standard_normal((3, 5)))
    g, b = parameter(rng.standard_normal(5)), parameter(rng.standard_normal(5))
    w = rng.standard_normal((3, 5))

    def closure():
        h = layer_norm(x, g, b)
        return tsum((gelu(h) + relu(h * 0.7 + 0.1)) * w) + tsum(log_softmax(x) * w)

    assert grad_check(closure, {"x": x, "g": g, "b": b}).passed


def test_non_deterministic_closure_is_rejected(rng):
    w = parameter(rng.standard_normal(3))
    noise = np.random.default_rng(0)
    with pytest.raises(NonDeterministicError):
        grad_check(lambda: tsum(w * noise.standard_normal(3)), {"w": w})
