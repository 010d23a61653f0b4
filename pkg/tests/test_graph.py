import math

import numpy as np
import pytest
from gradcheck import param_grad_errors

from agtcnsd import autodiff as ad
from agtcnsd.autodiff import ShapeError, Tensor
from agtcnsd.graph import (
    AdaptiveGraphParams,
    StaticGraphSpec,
    adaptive_adjacency,
    adaptive_gcn_forward,
    gcn_layer_stack,
    standard_gcn_forward,
)

SEEDS = (0, 1, 2)


def graph_params(rng, N, c_in, c_out, d_e=3, d_z=3, std=1.0):
    return AdaptiveGraphParams.init(rng, N, c_in, c_out, d_e, d_z, std)


def adjacency_oracle(E):
    N = len(E)
    A = np.empty((N, N))
    for i in range(N):
        logits = [max(0.0, sum(E[i, d] * E[j, d] for d in range(E.shape[1]))) for j in range(N)]
        top = max(logits)
        ex = [math.exp(v - top) for v in logits]
        A[i] = [v / sum(ex) for v in ex]
    return A


def gcn_loop_oracle(X, p, A):
    """Explicit per-node weights: theta_n = sum_d E_z[n,d] W_z[d], b_n likewise."""
    E_z, W_z, b_z = p.E_z.data, p.W_z.data, p.b_z.data
    N, c_in = X.shape
    c_out = W_z.shape[2]
    H = X + A @ X
    Z = np.zeros((N, c_out))
    for n in range(N):
        theta = sum(E_z[n, d] * W_z[d] for d in range(E_z.shape[1]))
        bias = sum(E_z[n, d] * b_z[d] for d in range(E_z.shape[1]))
        for o in range(c_out):
            Z[n, o] = sum(H[n, i] * theta[i, o] for i in range(c_in)) + bias[o]
    return Z


def static_gcn_loop_oracle(X, A, theta, b):
    N = len(A)
    deg = [sum(A[i]) for i in range(N)]
    M = [[(1.0 if i == j else 0.0) + A[i][j] / math.sqrt(deg[i] * deg[j]) for j in range(N)] for i in range(N)]
    MX = [[sum(M[i][k] * X[k][c] for k in range(N)) for c in range(X.shape[1])] for i in range(N)]
    return np.array([[sum(MX[i][c] * theta[c][o] for c in range(X.shape[1])) + b[o] for o in range(theta.shape[1])] for i in range(N)])


# ---------------------------------------------------------------- adjacency

def test_adjacency_examples():
    np.testing.assert_allclose(adaptive_adjacency(np.zeros((4, 3))).data, np.full((4, 4), 0.25), atol=1e-15)
    np.testing.assert_array_equal(adaptive_adjacency(np.array([[0.7, -2.0]])).data, [[1.0]])


def test_adjacency_rows_stochastic_including_large_entries():
    rng = np.random.default_rng(0)
    for i in range(100):
        N, d = rng.integers(1, 9), rng.integers(1, 8)
        scale = 1e3 if i % 2 else 1.0
        E = rng.normal(scale=scale, size=(N, d))
        A = adaptive_adjacency(E).data
        assert np.all(np.isfinite(A)) and np.all(A >= 0)
        assert np.max(np.abs(A.sum(axis=1) - 1)) <= 1e-9
    E = rng.normal(size=(5, 3))
    np.testing.assert_allclose(adaptive_adjacency(E).data, adjacency_oracle(E), atol=1e-14)


@pytest.mark.parametrize("seed", SEEDS)
def test_adjacency_gradient(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(5, 5)))
    E = Tensor(rng.normal(size=(5, 3)))
    assert ad.finite_difference_check(lambda t: ad.sum(adaptive_adjacency(t) * w), E) < 1e-5


# ---------------------------------------------------------------- static oracle

def test_standard_gcn_examples():
    X = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_allclose(standard_gcn_forward(X, StaticGraphSpec(np.eye(4), np.eye(3), np.zeros(3))), 2 * X, atol=1e-15)
    c = np.array([1.0, -1.0])
    out = standard_gcn_forward(X, StaticGraphSpec(np.ones((4, 4)), np.zeros((3, 2)), c))
    np.testing.assert_array_equal(out, np.tile(c, (4, 1)))


def test_standard_gcn_matches_element_loop():
    rng = np.random.default_rng(1)
    for _ in range(20):
        N = rng.integers(1, 6)
        A = rng.uniform(0.1, 2.0, size=(N, N))
        X = rng.normal(size=(N, 3))
        theta = rng.normal(size=(3, 2))
        b = rng.normal(size=2)
        got = standard_gcn_forward(X, StaticGraphSpec(A, theta, b))
        assert np.max(np.abs(got - static_gcn_loop_oracle(X, A, theta, b))) <= 1e-12


def test_standard_gcn_zero_degree():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    with pytest.raises(ValueError):
        standard_gcn_forward(np.ones((2, 1)), StaticGraphSpec(A, np.eye(1), np.zeros(1)))
    spec = StaticGraphSpec(np.array([[1.0, 2.0], [2.0, 3.0]]), np.eye(1), np.zeros(1))
    np.testing.assert_array_equal(spec.degree, np.diag([3.0, 5.0]))


# ---------------------------------------------------------------- adaptive layer

def test_adaptive_matches_per_node_loop():
    rng = np.random.default_rng(2)
    for _ in range(20):
        N = int(rng.integers(1, 6))
        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        p = graph_params(rng, N, c_in, c_out, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        X = rng.normal(size=(N, c_in))
        A = adaptive_adjacency(p.E_A).data
        got = adaptive_gcn_forward(X, p).data
        assert np.max(np.abs(got - gcn_loop_oracle(X, p, A))) <= 1e-10


def test_adaptive_identity_recovery():
    N, C = 3, 2
    p = graph_params(np.random.default_rng(0), N, C, C, d_z=N)
    p.E_z.data = np.eye(N)
    p.W_z.data = np.stack([np.eye(C)] * N)
    p.b_z.data = np.zeros((N, C))
    X = np.random.default_rng(1).normal(size=(N, C))
    out = adaptive_gcn_forward(X, p, adjacency=Tensor(np.zeros((N, N)))).data
    np.testing.assert_allclose(out, X, atol=1e-15)


def test_adaptive_bias_only():
    rng = np.random.default_rng(3)
    p = graph_params(rng, 4, 2, 3)
    p.W_z.data[:] = 0
    out = adaptive_gcn_forward(rng.normal(size=(4, 2)), p).data
    np.testing.assert_allclose(out, p.E_z.data @ p.b_z.data, atol=1e-15)


def test_adaptive_permutation_equivariance():
    rng = np.random.default_rng(4)
    p = graph_params(rng, 5, 2, 3)
    X = rng.normal(size=(7, 5, 2))
    perm = rng.permutation(5)
    q = AdaptiveGraphParams(Tensor(p.E_A.data[perm]), Tensor(p.E_z.data[perm]), p.W_z, p.b_z)
    np.testing.assert_allclose(adaptive_gcn_forward(X[:, perm], q).data, adaptive_gcn_forward(X, p).data[:, perm], atol=1e-10)


def test_shared_factor_reduces_to_static_graph():
    # identical E_z rows -> one shared theta; a symmetric A with unit degrees makes the normalized static rule use A directly
    rng = np.random.default_rng(5)
    N = 4
    p = graph_params(rng, N, 3, 2)
    p.E_z.data = np.tile(rng.normal(size=(1, 3)), (N, 1))
    S = rng.uniform(0.1, 1.0, size=(N, N))
    S = S + S.T
    for _ in range(200):  # Sinkhorn: symmetric doubly stochastic
        S = S / S.sum(axis=1, keepdims=True)
        S = (S + S.T) / 2
    X = rng.normal(size=(N, 3))
    theta = np.einsum("d,dio->io", p.E_z.data[0], p.W_z.data)
    b = p.E_z.data[0] @ p.b_z.data
    got = adaptive_gcn_forward(X, p, adjacency=Tensor(S)).data
    ref = standard_gcn_forward(X, StaticGraphSpec(S, theta, b))
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_adaptive_shape_errors_name_axis():
    p = graph_params(np.random.default_rng(0), 4, 2, 3)
    with pytest.raises(ShapeError, match="node axis"):
        adaptive_gcn_forward(np.ones((5, 2)), p)
    with pytest.raises(ShapeError, match="channel axis"):
        adaptive_gcn_forward(np.ones((4, 3)), p)


def test_adaptive_batched_time_steps():
    rng = np.random.default_rng(6)
    p = graph_params(rng, 4, 2, 3)
    X = rng.normal(size=(2, 5, 4, 2))
    out = adaptive_gcn_forward(X, p).data
    assert out.shape == (2, 5, 4, 3)
    A = adaptive_adjacency(p.E_A).data
    np.testing.assert_allclose(out[1, 3], gcn_loop_oracle(X[1, 3], p, A), atol=1e-12)


def test_default_init_std():
    p = AdaptiveGraphParams.init(np.random.default_rng(0), 200, 8, 8)
    assert p.W_z.data.std() == pytest.approx(0.1, rel=0.05)


# ---------------------------------------------------------------- stack

def test_stack_single_layer_and_zero_input():
    rng = np.random.default_rng(7)
    p = graph_params(rng, 3, 2, 2)
    X = rng.normal(size=(4, 3, 2))
    np.testing.assert_array_equal(gcn_layer_stack(X, [p]).data, adaptive_gcn_forward(X, p).data)
    q = graph_params(rng, 3, 2, 2)
    for layer in (p, q):
        layer.b_z.data[:] = 0
    np.testing.assert_array_equal(gcn_layer_stack(np.zeros((4, 3, 2)), [p, q]).data, 0.0)
    with pytest.raises(ValueError):
        gcn_layer_stack(X, [])


def test_stack_relu_between_layers_only():
    rng = np.random.default_rng(8)
    p, q = graph_params(rng, 3, 2, 2), graph_params(rng, 3, 2, 2)
    X = rng.normal(size=(5, 3, 2))
    manual = adaptive_gcn_forward(ad.relu(adaptive_gcn_forward(X, p)), q).data
    np.testing.assert_array_equal(gcn_layer_stack(X, [p, q]).data, manual)
    assert (manual < 0).any()


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_and_stack_gradients(seed):
    rng = np.random.default_rng(seed)
    p = graph_params(rng, 4, 2, 3)
    q = graph_params(rng, 4, 3, 2)
    X = rng.normal(size=(3, 4, 2))
    w1 = Tensor(rng.normal(size=(3, 4, 3)))
    w2 = Tensor(rng.normal(size=(3, 4, 2)))
    layer = param_grad_errors(p.named(), lambda: ad.sum(adaptive_gcn_forward(X, p) * w1))
    assert max(layer.values()) < 1e-5, layer
    assert ad.finite_difference_check(lambda t: ad.sum(adaptive_gcn_forward(t, p) * w1), Tensor(X)) < 1e-5
    named = {**p.named("0."), **q.named("1.")}
    stack = param_grad_errors(named, lambda: ad.sum(gcn_layer_stack(X, [p, q]) * w2))
    assert max(stack.values()) < 1e-4, stack
