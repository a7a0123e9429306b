import numpy as np
import pytest

from gdis.nn import (Adam, AttentionGraph, AttentionLayer, Parameter, Tensor, add, gaussian_kernel,
                     hsic, matmul, median_bandwidth, row_softmax, scale, total)

from gradcases import OPS, check_op, full_loss_error


@pytest.mark.parametrize("name", OPS)
def test_op_gradients(name):
    assert check_op(name, seed=0) < 1e-4


def test_full_loss_gradient():
    assert full_loss_error(0) < 1e-4
    assert full_loss_error(1, hsic_weight=0.0) < 1e-4


def test_forward_values():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(matmul(x, np.eye(4)).value, x)
    p = row_softmax(x).value
    assert np.allclose(p.sum(axis=1), 1.0)
    masked = np.ones((3, 4), dtype=bool)
    masked[:, 1] = False
    assert np.all(row_softmax(x, masked).value[:, 1] == 0)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ValueError, match=r"\(3, 4\).*\(2, 2\)"):
        matmul(np.zeros((3, 4)), np.zeros((2, 2)))
    with pytest.raises(ValueError, match=r"\(3, 4\) vs \(2, 4\)"):
        add(np.zeros((3, 4)), np.zeros((2, 4)))


def test_non_finite_values_trip():
    with pytest.raises(FloatingPointError):
        with np.errstate(over="ignore"):
            scale(Tensor([1e308]), 1e10)


def test_backward_accumulates_and_zero_grad_resets():
    p = Parameter(np.array([[1.0, 2.0]]))
    total(scale(p, 3.0)).backward()
    total(scale(p, 3.0)).backward()
    assert np.array_equal(p.grad, [[6.0, 6.0]])
    p.zero_grad()
    assert np.array_equal(p.grad, [[0.0, 0.0]])


# -- attention ------------------------------------------------------------------

def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(1)
    for _ in range(5):
        m = int(rng.integers(1, 20))
        rows, cols = np.nonzero(np.triu(rng.random((m, m)) < 0.3, 1))
        graph = AttentionGraph.from_pairs(m, np.r_[rows, cols], np.r_[cols, rows])
        layer = AttentionLayer(3, 5, rng)
        alpha, _ = layer.attention(rng.normal(size=(m, 3)), graph)
        sums = np.bincount(graph.rows, weights=alpha.value[:, 0], minlength=m)
        assert np.allclose(sums, 1.0, atol=1e-9)


def test_attention_single_node_is_self_only():
    rng = np.random.default_rng(2)
    layer = AttentionLayer(2, 3, rng)
    h = rng.normal(size=(1, 2))
    graph = AttentionGraph.from_pairs(1, [], [])
    alpha, z = layer.attention(h, graph)
    assert alpha.value[0, 0] == 1.0
    wh = h @ layer.weight.value
    assert np.allclose(layer(h, graph).value, np.where(wh > 0, wh, np.expm1(wh)))
    with pytest.raises(ValueError):
        AttentionGraph.from_pairs(0, [], [])


def test_attention_symmetric_neighbours_share_weight():
    rng = np.random.default_rng(3)
    layer = AttentionLayer(2, 3, rng)
    h = np.array([[0.3, -1.0], [1.0, 2.0], [1.0, 2.0]])
    graph = AttentionGraph.from_pairs(3, [0, 0, 1, 2], [1, 2, 0, 0])
    alpha, _ = layer.attention(h, graph)
    a = dict(zip(zip(graph.rows, graph.cols), alpha.value[:, 0]))
    assert a[(0, 1)] == pytest.approx(a[(0, 2)], abs=1e-15)


def test_attention_matches_loop_implementation():
    rng = np.random.default_rng(4)
    layer = AttentionLayer(3, 2, rng)
    h = rng.normal(size=(3, 3))
    graph = AttentionGraph.from_pairs(3, [0, 1, 1, 2], [1, 0, 2, 1])  # path 0-1-2
    W, A = layer.weight.value, layer.attn_vector.value[:, 0]
    nbrs = {0: [0, 1], 1: [0, 1, 2], 2: [1, 2]}
    expected = np.zeros((3, 2))
    for i in range(3):
        scores = []
        for j in nbrs[i]:
            s = A @ np.concatenate([W.T @ h[i], W.T @ h[j]])
            scores.append(s if s > 0 else 0.2 * s)
        e = np.exp(np.array(scores) - max(scores))
        alpha = e / e.sum()
        agg = sum(a * (W.T @ h[j]) for a, j in zip(alpha, nbrs[i]))
        expected[i] = np.where(agg > 0, agg, np.exp(agg) - 1)
    assert np.allclose(layer(h, graph).value, expected, atol=1e-12)


# -- kernels and HSIC -------------------------------------------------------------

def test_gaussian_kernel_hand_values():
    m = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    assert median_bandwidth(m) == pytest.approx(2.0)
    k = gaussian_kernel(m).value
    expected = np.exp(-np.array([[0, 1, 4], [1, 0, 5], [4, 5, 0]]) / 8.0)
    assert np.allclose(k, expected)


def test_kernel_bounds_and_identical_rows():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(8, 3))
    m[3] = m[1]
    k = gaussian_kernel(m).value
    assert np.allclose(k, k.T) and np.all(np.diag(k) == 1.0)
    assert np.all(k > 0) and np.all(k <= 1)
    assert k[1, 3] == 1.0
    assert median_bandwidth(np.ones((4, 2))) == 1e-8
    with pytest.raises(ValueError):
        gaussian_kernel(np.ones((1, 2)))


def test_hsic_properties():
    rng = np.random.default_rng(6)
    h = rng.normal(size=(20, 3))
    assert abs(hsic(h, np.ones((20, 4))).value) < 1e-12
    assert hsic(h, h).value > 0
    perm = rng.permutation(20)
    hp = rng.normal(size=(20, 2))
    assert hsic(h, hp).value == pytest.approx(hsic(h[perm], hp[perm]).value, abs=1e-9)
    assert hsic(h, hp).value >= -1e-12
    with pytest.raises(ValueError):
        hsic(h, hp[:5])
    with pytest.raises(ValueError):
        hsic(h[:1], hp[:1])


# -- Adam -------------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_parameters():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    opt.step()
    assert np.array_equal(p.value, [1.0, -2.0])


def test_adam_first_step_by_hand():
    p = Parameter(np.array([0.0, 0.0]))
    opt = Adam([p], lr=0.1)
    p.grad = np.array([0.5, -2.0])
    opt.step()
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    expected = -0.1 * np.array([0.5, -2.0]) / (np.array([0.5, 2.0]) + 1e-8)
    assert np.allclose(p.value, expected, rtol=0, atol=1e-15)
    p.grad = np.array([0.5, -2.0])
    opt.step()
    m = 0.9 * 0.05 + 0.1 * 0.5
    v = 0.999 * 0.00025 + 0.001 * 0.25
    step = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert p.value[0] == pytest.approx(expected[0] - step, abs=1e-15)


def test_adam_nan_gradient_names_parameter():
    p = Parameter(np.zeros(2), name="head.bias")
    opt = Adam([p])
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(FloatingPointError, match="head.bias"):
        opt.step()


def test_adam_deterministic():
    def run():
        p = Parameter(np.array([3.0, -1.0]))
        opt = Adam([p], lr=0.05)
        out = []
        for _ in range(20):
            opt.zero_grad()
            total(p * p).backward()
            opt.step()
            out.append(p.value.copy())
        return np.array(out)

    a, b = run(), run()
    assert np.array_equal(a, b)
    assert np.all(np.abs(a[-1]) < np.abs(a[0]))
