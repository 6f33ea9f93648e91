"""Message-passing encoders against slow dense references."""

import numpy as np
import pytest

import graphtok.tensor as T
from graphtok import gnn
from graphtok.gnn import GnnConfig, encode, gat_layer, gcn_layer, init_gnn_params
from graphtok.graphs import Graph, build_csr, normalized_adjacency
from graphtok.tensor import Tape, Tensor, grad_check, precision

from conftest import small_graph


def heads_for(rng, n_heads, d_in, d_h):
    out = []
    for _ in range(n_heads):
        out.append({
            "W": Tensor(rng.normal(size=(d_in, d_h)), requires_grad=True),
            "W1": Tensor(rng.normal(size=(d_in, d_h)), requires_grad=True),
            "a1": Tensor(rng.normal(size=(d_h, 1)), requires_grad=True),
            "a2": Tensor(rng.normal(size=(d_h, 1)), requires_grad=True),
        })
    return out


def dense_gat_reference(g, H, p, slope=0.2):
    """Per-node python loop over attention neighborhoods (incl. self)."""
    n = g.num_nodes
    Hp = H @ p["W1"].data
    s1 = (Hp @ p["a1"].data).ravel()
    s2 = (Hp @ p["a2"].data).ravel()
    V = H @ p["W"].data
    out = np.zeros((n, V.shape[1]))
    for v in range(n):
        nbrs = list(g.neighbors(v)) + [v]
        e = np.array([s1[v] + s2[u] for u in nbrs])
        e = np.where(e > 0, e, slope * e)
        a = np.exp(e - e.max())
        a /= a.sum()
        out[v] = sum(ai * V[u] for ai, u in zip(a, nbrs))
    return out


def test_gat_matches_dense_reference(graph8, rng):
    with precision(np.float64):
        H = rng.normal(size=(8, 5))
        heads = heads_for(rng, 3, 5, 4)
        got = gat_layer(graph8, Tensor(H), heads)
        want = np.concatenate([dense_gat_reference(graph8, H, p) for p in heads], axis=1)
        np.testing.assert_allclose(got.data, want, atol=1e-10)


def test_gat_average_matches_dense_reference(graph8, rng):
    with precision(np.float64):
        H = rng.normal(size=(8, 5))
        heads = heads_for(rng, 2, 5, 4)
        got = gat_layer(graph8, Tensor(H), heads, average=True)
        want = sum(dense_gat_reference(graph8, H, p) for p in heads) / 2
        np.testing.assert_allclose(got.data, want, atol=1e-10)


def test_gat_attention_rows_sum_to_one(graph8, rng):
    with precision(np.float64):
        heads = heads_for(rng, 2, 5, 3)
        _, (dst, src, alphas) = gat_layer(graph8, Tensor(rng.normal(size=(8, 5))),
                                          heads, return_attention=True)
        for alpha in alphas:
            sums = np.zeros(8)
            np.add.at(sums, dst, alpha)
            np.testing.assert_allclose(sums, 1.0, atol=1e-12)


def test_gat_self_loop_always_present(rng):
    # node 2 is isolated; with self-loops it attends only to itself
    indptr, indices = build_csr(3, np.array([[0, 1]]))
    g = Graph(3, indptr, indices, np.zeros((3, 2)), np.full(3, -1))
    with precision(np.float64):
        heads = heads_for(rng, 1, 2, 2)
        H = rng.normal(size=(3, 2))
        out = gat_layer(g, Tensor(H), heads)
        np.testing.assert_allclose(out.data[2], H[2] @ heads[0]["W"].data, atol=1e-12)


def test_gat_no_self_loops_isolated_node_rejected(rng):
    indptr, indices = build_csr(3, np.array([[0, 1]]))
    g = Graph(3, indptr, indices, np.zeros((3, 2)), np.full(3, -1))
    heads = heads_for(rng, 1, 2, 2)
    with pytest.raises(ValueError):
        gat_layer(g, Tensor(np.zeros((3, 2))), heads, self_loops=False)


def test_gat_gradients(graph8, rng):
    with precision(np.float64):
        H = Tensor(rng.normal(size=(8, 4)), requires_grad=True)
        heads = heads_for(rng, 2, 4, 3)
        leaves = [H] + [v for p in heads for v in p.values()]
        err = grad_check(lambda *_: T.sum_(T.power(gat_layer(graph8, H, heads), 2.0)), leaves)
        assert err < 1e-4


def test_gcn_layer_dense_oracle(graph8, rng):
    with precision(np.float64):
        P = normalized_adjacency(graph8, add_self_loops=True)
        H = rng.normal(size=(8, 5))
        W = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        got = gcn_layer(P, Tensor(H), W)
        np.testing.assert_allclose(got.data, P.to_dense() @ H @ W.data, atol=1e-10)
        err = grad_check(lambda *_: T.sum_(T.power(gcn_layer(P, Tensor(H), W), 2.0)), [W])
        assert err < 1e-6


def test_spmm_gradient(graph8, rng):
    with precision(np.float64):
        P = normalized_adjacency(graph8)
        H = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
        err = grad_check(lambda *_: T.sum_(T.power(gnn.spmm(P, H), 2.0)), [H])
        assert err < 1e-6


def test_config_validation():
    with pytest.raises(ValueError):
        GnnConfig(layer_kind="sage")
    with pytest.raises(ValueError):
        GnnConfig(hidden_dim=10, heads=4)
    with pytest.raises(ValueError):
        GnnConfig(activation="tanh")


def test_init_gnn_params_shapes():
    cfg = GnnConfig(layer_kind="gat", num_layers=2, hidden_dim=8, heads=2)
    params = init_gnn_params(cfg, in_dim=5, out_dim=8, rng=np.random.default_rng(0))
    # intermediate layer heads emit hidden_dim/heads, final layer full width
    assert params["gnn.layer0.head0.W"].shape == (5, 4)
    assert params["gnn.layer1.head0.W"].shape == (8, 8)
    assert params["gnn.layer0.b"].shape == (8,)
    assert params["gnn.layer1.head1.a1"].shape == (8, 1)
    for p in params.values():
        assert p.requires_grad


def test_init_gnn_params_gcn_shapes():
    cfg = GnnConfig(layer_kind="gcn", num_layers=3, hidden_dim=6)
    params = init_gnn_params(cfg, in_dim=4, out_dim=2, rng=np.random.default_rng(0))
    assert params["gnn.layer0.W"].shape == (4, 6)
    assert params["gnn.layer1.W"].shape == (6, 6)
    assert params["gnn.layer2.W"].shape == (6, 2)


def test_encode_counts_calls(graph8):
    cfg = GnnConfig(layer_kind="gcn", num_layers=1, hidden_dim=4)
    params = init_gnn_params(cfg, 5, 4, np.random.default_rng(0))
    before = gnn.ENCODE_CALLS
    encode(graph8, cfg, params, graph8.features)
    assert gnn.ENCODE_CALLS == before + 1


def test_encode_final_layer_linear(graph8):
    """Doubling weights of a 1-layer encoder doubles outputs: no final act."""
    cfg = GnnConfig(layer_kind="gcn", num_layers=1, hidden_dim=4)
    params = init_gnn_params(cfg, 5, 4, np.random.default_rng(0))
    out1 = encode(graph8, cfg, params, graph8.features).data
    params["gnn.layer0.W"].data *= 2.0
    params["gnn.layer0.b"].data *= 2.0
    out2 = encode(graph8, cfg, params, graph8.features).data
    np.testing.assert_allclose(out2, 2 * out1, atol=1e-10)


def test_encode_two_layer_gcn_oracle(graph8):
    with precision(np.float64):
        cfg = GnnConfig(layer_kind="gcn", num_layers=2, hidden_dim=6, activation="relu")
        params = init_gnn_params(cfg, 5, 3, np.random.default_rng(1))
        got = encode(graph8, cfg, params, graph8.features).data
        Pd = normalized_adjacency(graph8, add_self_loops=True).to_dense()
        h = Pd @ graph8.features @ params["gnn.layer0.W"].data + params["gnn.layer0.b"].data
        h = np.maximum(h, 0.0)
        want = Pd @ h @ params["gnn.layer1.W"].data + params["gnn.layer1.b"].data
        np.testing.assert_allclose(got, want, atol=1e-10)


def test_encode_gat_output_width(graph8):
    cfg = GnnConfig(layer_kind="gat", num_layers=2, hidden_dim=12, heads=3)
    params = init_gnn_params(cfg, 5, 7, np.random.default_rng(0))
    out = encode(graph8, cfg, params, graph8.features)
    assert out.shape == (8, 7)


def test_encode_permutation_equivariance(rng):
    """Relabeling nodes permutes encoder outputs the same way."""
    g = small_graph(n=10, seed=3)
    cfg = GnnConfig(layer_kind="gat", num_layers=2, hidden_dim=8, heads=2)
    with precision(np.float64):
        params = init_gnn_params(cfg, 5, 6, np.random.default_rng(0))
        out = encode(g, cfg, params, g.features).data
        perm = np.random.default_rng(4).permutation(10)
        inv = np.argsort(perm)
        pairs = g.edge_pairs()
        indptr, indices = build_csr(10, inv[pairs])
        g2 = Graph(10, indptr, indices, g.features[perm], g.labels[perm])
        out2 = encode(g2, cfg, params, g2.features).data
        np.testing.assert_allclose(out2, out[perm], atol=1e-8)


def test_full_encoder_grad(graph8):
    with precision(np.float64):
        cfg = GnnConfig(layer_kind="gat", num_layers=2, hidden_dim=4, heads=2)
        params = init_gnn_params(cfg, 5, 3, np.random.default_rng(2))
        err = grad_check(
            lambda *_: T.sum_(T.power(encode(graph8, cfg, params, graph8.features), 2.0)),
            list(params.values()))
        assert err < 1e-4
