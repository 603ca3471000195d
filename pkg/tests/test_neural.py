import math

import numpy as np
import pytest

from kinodrive.neural import (Adam, MlpParams, StaleTape, canonical_graph, encode_state_vector, gnn_backward,
                              gnn_encode, graph_conv_layer, init_gnn, init_mlp, init_state_encoder, mlp_backward,
                              mlp_forward, mlp_from_lines, mlp_to_text, polyak)
from kinodrive.selftest import _fd_check, check_gnn_gradients, check_gnn_permutation, check_mlp_gradients, random_graph
from kinodrive.world import GraphObs


def zero_mlp(sizes, act="relu"):
    return MlpParams([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])], [np.zeros(b) for b in sizes[1:]],
                     act, act)


# -- MLP ---------------------------------------------------------------------------------

def test_zero_net_outputs_zero():
    y, _ = mlp_forward(zero_mlp([3, 5, 2]), np.array([1.0, -2.0, 3.0]))
    assert np.array_equal(y, np.zeros(2))


def test_identity_layer():
    p = MlpParams([np.eye(4)], [np.zeros(4)], "identity", "identity")
    x = np.array([0.5, -1.0, 2.0, 3.0])
    assert np.array_equal(mlp_forward(p, x)[0], x)


def test_fixed_tanh_net_scalar_oracle():
    W0 = np.array([[0.5, -0.3], [0.2, 0.8]])
    b0 = np.array([0.1, -0.2])
    W1 = np.array([[1.5], [-0.7]])
    b1 = np.array([0.05])
    p = MlpParams([W0, W1], [b0, b1], "tanh", "identity")
    x = (0.3, -1.2)
    h0 = math.tanh(0.5 * x[0] + 0.2 * x[1] + 0.1)
    h1 = math.tanh(-0.3 * x[0] + 0.8 * x[1] - 0.2)
    assert mlp_forward(p, np.array(x))[0][0] == pytest.approx(1.5 * h0 - 0.7 * h1 + 0.05, abs=1e-15)


def test_linear_one_one_chain_rule():
    p = MlpParams([np.array([[2.5]])], [np.array([0.7])], "identity", "identity")
    y, tape = mlp_forward(p, np.array([3.0]))
    dx, grads = mlp_backward(p, tape, np.array([1.0]))
    assert y[0] == pytest.approx(8.2)
    assert grads[0][0, 0] == 3.0 and grads[1][0] == 1.0 and dx[0] == 2.5


def test_zero_dy_zero_grads():
    rng = np.random.default_rng(0)
    p = init_mlp([4, 6, 3], rng)
    _, tape = mlp_forward(p, rng.normal(size=(5, 4)))
    dx, grads = mlp_backward(p, tape, np.zeros((5, 3)))
    assert not dx.any() and not any(g.any() for g in grads)


def test_stale_tape():
    rng = np.random.default_rng(0)
    p = init_mlp([2, 3, 1], rng)
    _, tape = mlp_forward(p, np.ones(2))
    opt = Adam(p.params(), lr=1e-2)
    opt.step([np.ones_like(a) for a in p.params()])
    p.touch()
    with pytest.raises(StaleTape):
        mlp_backward(p, tape, np.ones(1))


def test_dim_mismatch():
    p = init_mlp([3, 2], np.random.default_rng(0))
    with pytest.raises(ValueError):
        mlp_forward(p, np.ones(4))
    with pytest.raises(ValueError):
        MlpParams([np.ones((3, 2)), np.ones((3, 1))], [np.ones(2), np.ones(1)])


def test_mlp_fd_oracle():
    ok, detail = check_mlp_gradients()
    assert ok, detail


def test_batch_matches_single():
    rng = np.random.default_rng(1)
    p = init_mlp([3, 8, 2], rng, activation="tanh")
    X = rng.normal(size=(4, 3))
    Y, _ = mlp_forward(p, X)
    for i in range(4):
        assert np.allclose(mlp_forward(p, X[i])[0], Y[i], atol=1e-15)


def test_polyak_exact():
    rng = np.random.default_rng(2)
    t = [rng.normal(size=(3, 3)), rng.normal(size=3)]
    o = [rng.normal(size=(3, 3)), rng.normal(size=3)]
    old = [a.copy() for a in t]
    polyak(t, o, 0.005)
    for a, b, c in zip(t, old, o):
        assert np.abs(a - (0.995 * b + 0.005 * c)).max() <= 1e-12


def test_adam_minimizes_quadratic():
    x = np.array([3.0, -2.0])
    opt = Adam([x], lr=0.05)
    for _ in range(2000):
        opt.step([2 * x])
    assert np.abs(x).max() < 1e-3


def test_mlp_text_round_trip():
    rng = np.random.default_rng(3)
    p = init_mlp([5, 7, 3], rng, activation="tanh", out_activation="relu")
    q = mlp_from_lines(iter(mlp_to_text(p).splitlines()))
    assert q.sizes == p.sizes and q.activation == "tanh" and q.out_activation == "relu"
    assert all(np.array_equal(a, b) for a, b in zip(p.params(), q.params()))
    assert mlp_to_text(p).splitlines()[0] == "5 7 3 tanh relu"


# -- graph layer ---------------------------------------------------------------------------

def one_vehicle_graph(rng):
    v = rng.normal(size=(2, 4))
    return v, rng.normal(size=(1, 4)), np.array([1]), np.array([0])


def test_conv_zero_params_zero_output():
    rng = np.random.default_rng(0)
    v, e, src, dst = one_vehicle_graph(rng)
    nv, ne, _ = graph_conv_layer(v, e, src, dst, zero_mlp([12, 8, 6]), zero_mlp([10, 8, 6]))
    assert not nv.any() and not ne.any()


def test_conv_single_vehicle_hand_composition():
    rng = np.random.default_rng(1)
    v, e, src, dst = one_vehicle_graph(rng)
    phi_e = init_mlp([12, 8, 6], rng)
    phi_v = init_mlp([10, 8, 6], rng)
    nv, ne, _ = graph_conv_layer(v, e, src, dst, phi_e, phi_v)
    e_new = mlp_forward(phi_e, np.concatenate([e[0], v[1], v[0]]))[0]
    ego = mlp_forward(phi_v, np.concatenate([v[0], e_new]))[0]
    other = mlp_forward(phi_v, np.concatenate([v[1], np.zeros(6)]))[0]
    assert np.allclose(ne[0], e_new, atol=1e-15)
    assert np.allclose(nv[0], ego, atol=1e-15)
    assert np.allclose(nv[1], other, atol=1e-15)


def test_conv_no_edges():
    rng = np.random.default_rng(2)
    v = rng.normal(size=(1, 4))
    phi_e = init_mlp([12, 8, 6], rng)
    phi_v = init_mlp([10, 8, 6], rng)
    nv, ne, _ = graph_conv_layer(v, np.zeros((0, 4)), np.zeros(0, int), np.zeros(0, int), phi_e, phi_v)
    assert ne.shape == (0, 6)
    assert np.allclose(nv[0], mlp_forward(phi_v, np.concatenate([v[0], np.zeros(6)]))[0])


def test_conv_dim_mismatch():
    rng = np.random.default_rng(3)
    v, e, src, dst = one_vehicle_graph(rng)
    with pytest.raises(ValueError):
        graph_conv_layer(v, e, src, dst, init_mlp([11, 6], rng), init_mlp([10, 6], rng))


# -- GNN encoder ---------------------------------------------------------------------------

def test_empty_road_encoding():
    p = init_gnn(np.random.default_rng(0))
    g = GraphObs(np.array([[0.1, 0.0, 6.0, 0.0]]), np.zeros(0, int), np.zeros((0, 4)))
    a, _ = gnn_encode(g, p)
    b, _ = gnn_encode(g, p)
    assert a.shape == (64,) and np.all(np.isfinite(a)) and np.array_equal(a, b)


def test_permutation_invariance_exact():
    ok, detail = check_gnn_permutation()
    assert ok, detail


def test_canonical_graph_is_order_free():
    rng = np.random.default_rng(4)
    g = random_graph(rng, 6)
    perm = rng.permutation(6)
    h = GraphObs(np.concatenate([g.vertex_features[:1], g.vertex_features[1:][perm]]), np.arange(1, 7),
                 g.edge_features[perm])
    cg, ch = canonical_graph(g), canonical_graph(h)
    assert np.array_equal(cg.vertex_features, ch.vertex_features)
    assert np.array_equal(cg.edge_features, ch.edge_features)


@pytest.mark.parametrize("n", [0, 1, 2, 5, 10, 37, 100])
def test_variable_arity(n):
    p = init_gnn(np.random.default_rng(5))
    feat, tape = gnn_encode(random_graph(np.random.default_rng(n), n), p)
    assert feat.shape == (64,) and np.all(np.isfinite(feat))
    grads = gnn_backward(p, tape, np.ones(64))
    assert len(grads) == len(p.params())


def test_gnn_fd_oracle():
    ok, detail = check_gnn_gradients()
    assert ok, detail


def test_gnn_batch_gradients_fd():
    rng = np.random.default_rng(6)
    p = init_gnn(rng, hidden=6, width=5, out_dim=7)
    graphs = [random_graph(rng, n) for n in (0, 3, 1, 4)]
    w = rng.normal(size=(4, 7))

    def value():
        return float(np.sum(gnn_encode(graphs, p)[0] * w))
    _, tape = gnn_encode(graphs, p)
    grads = gnn_backward(p, tape, w)
    assert _fd_check(p.params(), grads, value, rng, per_array=3) < 1e-4


def test_batch_encoding_matches_single():
    rng = np.random.default_rng(7)
    p = init_gnn(rng)
    graphs = [random_graph(rng, n) for n in (2, 0, 5)]
    batch, _ = gnn_encode(graphs, p)
    for g, row in zip(graphs, batch):
        assert np.allclose(gnn_encode(g, p)[0], row, atol=1e-12)


def test_locality_of_influence():
    rng = np.random.default_rng(8)
    p = init_gnn(rng)
    for net in p.networks():
        for b in net.biases:
            b[:] = 0.0
    # phi_e ignores the target vertex, so a zero edge from a zero vertex maps to zero
    for phi_e, _ in p.layers:
        e_dim = phi_e.sizes[0] // 3
        phi_e.weights[0][2 * e_dim:] = 0.0
    g = random_graph(rng, 5)
    zeroed = GraphObs(g.vertex_features.copy(), g.edge_src, g.edge_features.copy())
    zeroed.vertex_features[3] = 0.0
    zeroed.edge_features[2] = 0.0
    keep = [0, 1, 3, 4]
    removed = GraphObs(np.concatenate([g.vertex_features[:1], g.vertex_features[1:][keep]]), np.arange(1, 5),
                       g.edge_features[keep])
    assert np.allclose(gnn_encode(zeroed, p)[0], gnn_encode(removed, p)[0], atol=1e-12)
    assert not np.allclose(gnn_encode(g, p)[0], gnn_encode(removed, p)[0])


# -- state-vector encoder -----------------------------------------------------------------

def test_state_encoder_zero_input():
    p = init_state_encoder(np.random.default_rng(0))
    _, tape = encode_state_vector(np.zeros(43), p)
    assert all(not z.any() for z in tape.pre)


def test_state_encoder_delegates():
    rng = np.random.default_rng(1)
    p = init_state_encoder(rng)
    x = rng.normal(size=43)
    assert np.array_equal(encode_state_vector(x, p)[0], mlp_forward(p, x)[0])
    assert p.sizes == [43, 128, 128, 64]


def test_state_encoder_gradients():
    rng = np.random.default_rng(2)
    p = init_state_encoder(rng, hidden=16, out_dim=8)
    for b in p.biases:
        b[:] = rng.normal(size=b.shape) * 0.1
    x = rng.normal(size=(3, 43))
    w = rng.normal(size=(3, 8))

    def value():
        return float(np.sum(encode_state_vector(x, p)[0] * w))
    _, tape = encode_state_vector(x, p)
    dx, grads = mlp_backward(p, tape, w)
    assert _fd_check(p.params(), grads, value, rng) < 1e-4


def test_state_encoder_dim_check():
    with pytest.raises(ValueError):
        encode_state_vector(np.zeros(40), init_state_encoder(np.random.default_rng(0)))
