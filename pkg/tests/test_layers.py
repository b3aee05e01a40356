import numpy as np
import pytest

from conftest import M, finite_difference, rel_err
from oracles import tca_oracle
from gia.core import Tape, backward, mul, sum_all
from gia.errors import ConfigError, ShapeError
from gia.graph import make_graph
from gia.layers import (ModelConfig, gcn_layer, init_params, mean_adjacency, model_forward,
                        normalize_adjacency)


def random_graph(rng, n, n_edges, in_dim=3, n_classes=2):
    edges = rng.integers(0, n, size=(n_edges, 2))
    labels = np.arange(n) % n_classes
    return make_graph(edges, rng.standard_normal((n, in_dim)), rng.uniform(size=(n, 2)), labels,
                      n_classes=n_classes)


def dense_adjacency(graph):
    n = graph.n_nodes
    a = np.zeros((n, n))
    for s, t in graph.edges:
        if s != t:
            a[s, t] = a[t, s] = 1.0
    return a + np.eye(n)


def dense_gcn(graph):
    a = dense_adjacency(graph)
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


class TestAdjacency:
    def test_single_node(self):
        g = make_graph(np.zeros((0, 2), int), np.ones((1, 1)), np.zeros((1, 2)), np.zeros(1, int))
        np.testing.assert_array_equal(normalize_adjacency(g).to_dense(), [[1.0]])

    def test_two_nodes(self):
        g = make_graph(np.array([[0, 1]]), np.ones((2, 1)), np.zeros((2, 2)), np.array([0, 1]))
        np.testing.assert_allclose(normalize_adjacency(g).to_dense(), np.full((2, 2), 0.5), rtol=0, atol=1e-16)

    def test_dense_oracle(self, rng):
        g = random_graph(rng, 5, 6)
        assert np.max(np.abs(normalize_adjacency(g).to_dense() - dense_gcn(g))) < 1e-14

    def test_duplicates_and_reversals_collapse(self):
        e = np.array([[0, 1], [1, 0], [0, 1], [2, 2]])
        g = make_graph(e, np.ones((3, 1)), np.zeros((3, 2)), np.array([0, 1, 0]))
        want = dense_gcn(make_graph(np.array([[0, 1]]), np.ones((3, 1)), np.zeros((3, 2)), np.array([0, 1, 0])))
        np.testing.assert_allclose(normalize_adjacency(g).to_dense(), want, rtol=0, atol=1e-15)

    def test_regular_graph_rows_sum_to_one(self):
        n = 12
        ring = np.array([[i, (i + 1) % n] for i in range(n)] + [[i, (i + 2) % n] for i in range(n)])
        g = make_graph(ring, np.ones((n, 1)), np.zeros((n, 2)), np.arange(n) % 2)
        assert np.max(np.abs(normalize_adjacency(g).to_dense().sum(axis=1) - 1)) < 1e-12

    def test_mean_rows_sum_to_one(self, rng):
        g = random_graph(rng, 20, 40)
        a = mean_adjacency(g).to_dense()
        want = dense_adjacency(g)
        want /= want.sum(axis=1, keepdims=True)
        assert np.max(np.abs(a - want)) < 1e-15


class TestGcnLayer:
    def test_identity_propagation(self, rng):
        g = make_graph(np.zeros((0, 2), int), np.ones((4, 1)), np.zeros((4, 2)), np.array([0, 1, 0, 1]))
        h = rng.standard_normal((4, 3))
        out = gcn_layer(normalize_adjacency(g), M(h), M(np.eye(3)), activation="none")
        np.testing.assert_array_equal(out.data, h)

    def test_relu_clamps_negative(self, rng):
        g = random_graph(rng, 6, 8)
        h = np.abs(rng.standard_normal((6, 3)))
        out = gcn_layer(normalize_adjacency(g), M(h), M(-np.eye(3)))
        assert np.all(out.data == 0.0)

    def test_dense_oracle(self, rng):
        g = random_graph(rng, 7, 10)
        h, w, b = rng.standard_normal((7, 3)), rng.standard_normal((3, 4)), rng.standard_normal((1, 4))
        out = gcn_layer(normalize_adjacency(g), M(h), M(w), M(b), activation="none")
        assert rel_err(out.data, dense_gcn(g) @ h @ w + b) < 1e-12

    def test_permutation_equivariance(self, rng):
        g = random_graph(rng, 15, 30)
        h, w = rng.standard_normal((15, 3)), rng.standard_normal((3, 3))
        base = gcn_layer(normalize_adjacency(g), M(h), M(w)).data
        perm = rng.permutation(15)
        inv = np.argsort(perm)
        g2 = make_graph(inv[g.edges], g.node_features[perm], g.positions[perm], g.labels[perm])
        out = gcn_layer(normalize_adjacency(g2), M(h[perm]), M(w)).data
        assert np.max(np.abs(out - base[perm])) < 1e-12

    def test_bad_activation(self, rng):
        g = random_graph(rng, 3, 2)
        with pytest.raises(ConfigError):
            gcn_layer(normalize_adjacency(g), M(np.ones((3, 2))), M(np.ones((2, 2))), activation="tanh")


def straight_line_forward(graph, params, config):
    """Whole model in plain numpy with dense matrices."""
    x, p = graph.node_features, graph.positions
    x_hat = x @ params["gia.w_embed"] + params["gia.b_embed"]
    p_hat = p @ params["gia.w_pos"] + params["gia.b_pos"]
    h = x_hat @ params["gia.w_res"] + params["gia.b_res"] + tca_oracle(
        x_hat, p_hat, params["gia.w_q"], params["gia.w_k"], params["gia.w_v"])
    a = dense_gcn(graph) if config.host == "gcn" else None
    if a is None:
        a = dense_adjacency(graph)
        a /= a.sum(axis=1, keepdims=True)
    for i in range(config.n_layers):
        h = np.maximum(a @ h @ params[f"conv{i}.w"] + params[f"conv{i}.b"], 0.0)
    return h @ params["head.w"] + params["head.b"]


class TestModel:
    @pytest.mark.parametrize("host", ["gcn", "mean-agg"])
    def test_reimplementation_oracle(self, rng, host):
        g = random_graph(rng, 32, 60)
        cfg = ModelConfig(in_dim=3, d_n=4, hidden=5, host=host)
        params = init_params(cfg, rng)
        for k in params:
            if k.endswith("b") or ".b_" in k:
                params[k] = rng.standard_normal(params[k].shape) * 0.1
        got = model_forward(g, params, cfg).data
        assert rel_err(got, straight_line_forward(g, params, cfg)) < 1e-12

    def test_zero_network(self, rng):
        g = random_graph(rng, 10, 15)
        cfg = ModelConfig(in_dim=3, pe_mode="none")
        params = {k: np.zeros_like(v) for k, v in init_params(cfg, rng).items()}
        assert np.all(model_forward(g, params, cfg).data == 0.0)

    def test_logit_shapes(self, rng):
        g2 = random_graph(rng, 10, 15)
        g8 = random_graph(rng, 16, 20, n_classes=8)
        for g, c in ((g2, 2), (g8, 8)):
            cfg = ModelConfig(in_dim=3, n_classes=c)
            assert model_forward(g, init_params(cfg, rng), cfg).shape == (g.n_nodes, c)

    def test_layer_dims_chain(self):
        cfg = ModelConfig(in_dim=3, d_n=8, hidden=6, n_layers=3)
        dims = cfg.layer_dims()
        assert dims[0][0] == 8
        assert all(a[1] == b[0] for a, b in zip(dims, dims[1:]))

    def test_wrong_parameter_shape(self, rng):
        g = random_graph(rng, 6, 6)
        cfg = ModelConfig(in_dim=3)
        params = init_params(cfg, rng)
        params["head.w"] = np.zeros((3, 3))
        with pytest.raises(ShapeError):
            model_forward(g, params, cfg)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            ModelConfig(in_dim=3, host="gat")
        with pytest.raises(ConfigError):
            ModelConfig(in_dim=3, pe_mode="sinusoidal", d_n=6)

    @pytest.mark.parametrize("pe_mode", ["gia", "linear", "none"])
    def test_end_to_end_gradient(self, rng, pe_mode):
        g = random_graph(rng, 16, 30)
        cfg = ModelConfig(in_dim=3, d_n=4, hidden=4, pe_mode=pe_mode)
        params = init_params(cfg, rng)
        weights = M(rng.standard_normal((16, 2)))

        def value():
            return float(sum_all(mul(model_forward(g, params, cfg), weights)).data[0, 0])

        tape = Tape()
        grads = backward(tape, sum_all(mul(model_forward(g, params, cfg, tape=tape), weights)))
        for name, arr in params.items():
            assert rel_err(grads[name], finite_difference(value, arr)) < 1e-4, name
