"""Finite-difference checks and graph semantics for the autodiff core."""
import numpy as np
import pytest

import graphncd.autodiff as ad
from graphncd.autodiff import (SparseMatrix, Tensor, backward, constant,
                               grad_check, parameter)
from graphncd.graph import build_graph, mean_adjacency, normalize_adjacency
from graphncd.optim import adam_init, adam_step

TOL = 1e-4


def _p(rng, rows, cols, scale=1.0):
    return parameter(scale * rng.standard_normal((rows, cols)))


# ---------------------------------------------------------------- shapes

def test_tensor_shapes_normalize():
    assert Tensor(3.0).shape == (1, 1)
    assert Tensor([1.0, 2.0, 3.0]).shape == (1, 3)
    assert Tensor([[1.0], [2.0]]).shape == (2, 1)
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 2, 2)))


def test_item_requires_scalar():
    with pytest.raises(ValueError):
        Tensor([[1.0, 2.0]]).item()
    assert Tensor([[4.5]]).item() == 4.5


def test_add_rejects_incompatible_shapes():
    with pytest.raises(ValueError):
        ad.add(constant(np.zeros((2, 3))), constant(np.zeros((3, 3))))


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        ad.log(constant([[1.0, 0.0]]))


# ------------------------------------------------------- per-op gradients

def test_matmul_grad():
    rng = np.random.default_rng(0)
    a, b = _p(rng, 3, 4), _p(rng, 4, 2)
    assert grad_check(lambda: ad.sum(ad.matmul(a, b)), [a, b]) < TOL


def test_add_broadcast_bias_grad():
    rng = np.random.default_rng(1)
    x, b = _p(rng, 5, 3), _p(rng, 1, 3)
    assert grad_check(lambda: ad.sum(ad.mul(ad.add(x, b), x)), [x, b]) < TOL


def test_sub_grad():
    rng = np.random.default_rng(2)
    a, b = _p(rng, 4, 3), _p(rng, 4, 3)
    assert grad_check(lambda: ad.sum(ad.mul(ad.sub(a, b), ad.sub(a, b))), [a, b]) < TOL


def test_mul_broadcast_grad():
    rng = np.random.default_rng(3)
    x, s = _p(rng, 4, 3), _p(rng, 1, 1)
    assert grad_check(lambda: ad.sum(ad.mul(x, s)), [x, s]) < TOL


def test_scalar_ops_grad():
    rng = np.random.default_rng(4)
    x = _p(rng, 3, 3)
    f = lambda: ad.sum(ad.add_scalar(ad.mul_scalar(x, 2.5), -1.0))
    assert grad_check(f, [x]) < TOL


def test_relu_grad_away_from_kink():
    rng = np.random.default_rng(5)
    x = parameter(rng.standard_normal((4, 4)) + np.sign(rng.standard_normal((4, 4))))
    assert grad_check(lambda: ad.sum(ad.relu(x)), [x]) < TOL


def test_sigmoid_grad():
    rng = np.random.default_rng(6)
    x = _p(rng, 3, 5)
    assert grad_check(lambda: ad.sum(ad.sigmoid(x)), [x]) < TOL


def test_log_grad():
    rng = np.random.default_rng(7)
    x = parameter(np.abs(rng.standard_normal((3, 3))) + 0.5)
    assert grad_check(lambda: ad.sum(ad.log(x)), [x]) < TOL


def test_clamp_grad_interior_and_flat():
    x = parameter([[0.5, 2.0, -3.0]])
    (g,) = backward(ad.sum(ad.clamp(x, 0.0, 1.0)), [x])
    assert np.array_equal(g, [[1.0, 0.0, 0.0]])
    y = parameter([[0.2, 0.7, 0.4]])
    assert grad_check(lambda: ad.sum(ad.mul(ad.clamp(y, 0.0, 1.0), y)), [y]) < TOL


def test_softmax_and_log_softmax_grad():
    rng = np.random.default_rng(8)
    x = _p(rng, 4, 6)
    w = constant(rng.standard_normal((4, 6)))
    assert grad_check(lambda: ad.sum(ad.mul(ad.softmax_rows(x), w)), [x]) < TOL
    assert grad_check(lambda: ad.sum(ad.mul(ad.log_softmax_rows(x), w)), [x]) < TOL


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(9)
    p = ad.softmax_rows(constant(rng.standard_normal((5, 7)) * 30)).data
    assert np.allclose(p.sum(axis=1), 1.0)
    assert p.min() >= 0.0


def test_gather_rows_grad_with_repeats():
    rng = np.random.default_rng(10)
    x = _p(rng, 5, 3)
    idx = np.array([0, 2, 2, 4])
    w = constant(rng.standard_normal((4, 3)))
    assert grad_check(lambda: ad.sum(ad.mul(ad.gather_rows(x, idx), w)), [x]) < TOL


def test_concat_rows_grad():
    rng = np.random.default_rng(11)
    a, b = _p(rng, 4, 2), _p(rng, 4, 3)
    w = constant(rng.standard_normal((4, 5)))
    assert grad_check(lambda: ad.sum(ad.mul(ad.concat_rows(a, b), w)), [a, b]) < TOL


def test_reductions_grad():
    rng = np.random.default_rng(12)
    x = _p(rng, 3, 4)
    assert grad_check(lambda: ad.mean(ad.mul(x, x)), [x]) < TOL
    assert grad_check(lambda: ad.sum(ad.mul(x, x)), [x]) < TOL


def test_mse_grad_and_value():
    rng = np.random.default_rng(13)
    a, b = _p(rng, 4, 3), _p(rng, 4, 3)
    loss = ad.mse(a, b)
    assert abs(loss.item() - np.mean((a.data - b.data) ** 2)) < 1e-12
    assert grad_check(lambda: ad.mse(a, b), [a, b]) < TOL


def test_l2_row_norm_grad_and_zero_row():
    rng = np.random.default_rng(14)
    x = parameter(rng.standard_normal((4, 3)) + 2.0)
    assert grad_check(lambda: ad.sum(ad.l2_row_norm(x)), [x]) < TOL
    z = parameter(np.zeros((2, 3)))
    (g,) = backward(ad.sum(ad.l2_row_norm(z)), [z])
    assert np.array_equal(g, np.zeros((2, 3)))


def test_nll_rows_grad_and_value():
    rng = np.random.default_rng(15)
    x = _p(rng, 5, 4)
    y = np.array([0, 3, 1, 1, 2])
    loss = ad.nll_rows(ad.log_softmax_rows(x), y)
    logp = x.data - x.data.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    assert abs(loss.item() + logp[np.arange(5), y].mean()) < 1e-12
    assert grad_check(lambda: ad.nll_rows(ad.log_softmax_rows(x), y), [x]) < TOL


def test_transpose_grad():
    rng = np.random.default_rng(16)
    u = _p(rng, 4, 3)
    f = lambda: ad.sum(ad.sigmoid(ad.matmul(u, ad.transpose(u))))
    assert grad_check(f, [u]) < TOL


def _toy_graph(n=6, seed=0):
    rng = np.random.default_rng(seed)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.5]
    pairs = pairs or [(0, 1)]
    feats = rng.standard_normal((n, 3))
    return build_graph(n, np.array(pairs), feats, np.zeros(n, dtype=np.int64))


def test_spmm_grad_symmetric_operator():
    g = _toy_graph(seed=1)
    adj = normalize_adjacency(g)
    rng = np.random.default_rng(17)
    x = _p(rng, g.num_nodes, 3)
    assert grad_check(lambda: ad.sum(ad.mul(ad.spmm(adj, x), x)), [x]) < TOL


def test_spmm_grad_asymmetric_operator():
    # row-mean aggregation is not symmetric, so the backward pass must use
    # the transpose rather than the matrix itself
    g = _toy_graph(seed=2)
    adj = mean_adjacency(g)
    assert not np.array_equal(adj.toarray(), adj.toarray().T)
    rng = np.random.default_rng(18)
    x = _p(rng, g.num_nodes, 3)
    w = constant(rng.standard_normal((g.num_nodes, 3)))
    assert grad_check(lambda: ad.sum(ad.mul(ad.spmm(adj, x), w)), [x]) < TOL


def test_spmm_matches_dense():
    g = _toy_graph(seed=3)
    adj = normalize_adjacency(g)
    x = np.random.default_rng(19).standard_normal((g.num_nodes, 4))
    out = ad.spmm(adj, constant(x)).data
    assert np.allclose(out, adj.toarray() @ x, atol=1e-12)


# --------------------------------------------------------- graph semantics

def test_backward_twice_raises():
    x = parameter([[1.0, 2.0]])
    loss = ad.sum(ad.mul(x, x))
    backward(loss, [x])
    with pytest.raises(RuntimeError):
        backward(loss, [x])


def test_unreached_param_gets_zeros():
    x = parameter([[1.0]])
    y = parameter([[2.0]])
    gx, gy = backward(ad.sum(ad.mul(x, x)), [x, y])
    assert gx[0, 0] == 2.0
    assert np.array_equal(gy, np.zeros((1, 1)))


def test_shared_subexpression_accumulates():
    x = parameter([[3.0]])
    y = ad.mul(x, x)                       # x used twice
    (g,) = backward(ad.sum(ad.add(y, x)), [x])
    assert abs(g[0, 0] - 7.0) < 1e-12      # d(x^2 + x)/dx = 2x + 1


def test_detach_blocks_gradient():
    x = parameter([[2.0]])
    d = x.detach()
    loss = ad.sum(ad.mul(x, constant(d.data)))
    (g,) = backward(loss, [x])
    assert abs(g[0, 0] - 2.0) < 1e-12      # only the live factor contributes


def test_constant_branch_is_dropped():
    c = ad.mul(constant([[1.0]]), constant([[2.0]]))
    assert c._parents == () and c._vjp is None and not c.requires_grad


def test_grad_check_flags_wrong_gradient():
    # a deliberately broken derivative must be caught, otherwise the whole
    # suite's FD checks prove nothing
    x = parameter([[1.3]])

    def broken_square():
        return ad.sum(ad._make(x.data ** 2, (x,),
                               lambda g: [3.0 * x.data * g]))  # wrong: 3x not 2x

    assert grad_check(broken_square, [x]) > 1e-2


# ----------------------------------------------------------------- adam

def test_adam_first_step_hand_case():
    # unit gradient, defaults: m_hat = 1, v_hat = 1, so the update is
    # -lr * 1 / (1 + eps) regardless of the parameter value
    p = parameter([[0.5]])
    st = adam_init([p], lr=0.01, weight_decay=0.0)
    adam_step([p], [np.array([[1.0]])], st)
    assert abs(p.data[0, 0] - (0.5 - 0.01 / (1.0 + 1e-8))) < 1e-15
    assert st.step == 1


def test_adam_weight_decay_enters_gradient():
    p_plain = parameter([[1.0]])
    p_decay = parameter([[1.0]])
    st0 = adam_init([p_plain], lr=0.01, weight_decay=0.0)
    st1 = adam_init([p_decay], lr=0.01, weight_decay=0.1)
    adam_step([p_plain], [np.array([[0.0]])], st0)
    adam_step([p_decay], [np.array([[0.0]])], st1)
    assert p_plain.data[0, 0] == 1.0            # no force at all
    assert p_decay.data[0, 0] < 1.0             # pulled toward zero


def test_adam_trajectory_matches_reference_loop():
    # hand-rolled reference implementation, several steps, random grads
    rng = np.random.default_rng(20)
    p = parameter(rng.standard_normal((3, 2)))
    ref = p.data.copy()
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    st = adam_init([p], lr=0.05, weight_decay=0.02)
    for t in range(1, 8):
        g = rng.standard_normal((3, 2))
        adam_step([p], [g.copy()], st)
        ge = g + 0.02 * ref
        m = 0.9 * m + 0.1 * ge
        v = 0.999 * v + 0.001 * ge * ge
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        ref = ref - 0.05 * mh / (np.sqrt(vh) + 1e-8)
    assert np.allclose(p.data, ref, atol=1e-12)


def test_sparse_matrix_transposed_cache():
    g = _toy_graph(seed=4)
    sym = normalize_adjacency(g)
    asym = mean_adjacency(g)
    assert sym.transposed is sym.mat
    assert np.allclose(asym.transposed.toarray(), asym.toarray().T)
