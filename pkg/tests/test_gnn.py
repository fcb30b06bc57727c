import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tglearn import tensor as T
from tglearn.corpus import SyntheticTgConfig, build_vocab, generate_synthetic_tg
from tglearn.errors import CompatibilityError, ConfigError, DataError, DimensionError
from tglearn.gnn import (GnnConfig, GnnModel, GraphOperators, epochs_to_fraction, gcn_layer, load_gnn,
                         predict, sage_layer, save_gnn, train_gnn)
from tglearn.gradcheck import grad_check
from tglearn.graph import build_csr, gcn_normalize, sample_neighbors
from tglearn.rng import RngState
from tglearn.stage1 import FeatureMatrix, bow_features


def random_graph(n, m, seed):
    rng = np.random.default_rng(seed)
    return build_csr(rng.integers(0, n, size=(m, 2)), n)


def dense_gcn(adj, H, psi, b):
    """Per-node loop over N(v) + {v} with weights 1/sqrt(d_v d_u)."""
    deg = adj.degrees() + 1
    out = np.zeros((adj.num_nodes, psi.shape[1]))
    for v in range(adj.num_nodes):
        acc = H[v] / deg[v]
        for u in adj.neighbors(v):
            acc = acc + H[u] / np.sqrt(deg[v] * deg[u])
        out[v] = acc @ psi + b
    return np.maximum(out, 0)


def dense_sage(adj, H, ws, wn, b):
    out = np.zeros((adj.num_nodes, ws.shape[1]))
    for v in range(adj.num_nodes):
        nb = adj.neighbors(v)
        neigh = H[nb].mean(0) @ wn if len(nb) else 0
        out[v] = H[v] @ ws + neigh + b
    return np.maximum(out, 0)


def t64(a):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, dtype=np.float64)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 32), st.integers(0, 100), st.integers(0, 10**6))
def test_layers_match_dense_oracle(n, m, seed):
    adj = random_graph(n, m, seed)
    rng = np.random.default_rng(seed)
    H, psi, wn, b = (rng.normal(size=s) for s in [(n, 4), (4, 3), (4, 3), (3,)])
    C = gcn_normalize(adj).to_scipy()
    np.testing.assert_allclose(gcn_layer(C, t64(H), t64(psi), t64(b)).data, dense_gcn(adj, H, psi, b),
                               atol=1e-6)
    np.testing.assert_allclose(sage_layer(adj, t64(H), t64(psi), t64(wn), t64(b)).data,
                               dense_sage(adj, H, psi, wn, b), atol=1e-6)


def test_gcn_single_node_identity():
    adj = build_csr(np.zeros((0, 2)), 1)
    H = np.array([[1.5, -2.0]])
    out = gcn_layer(gcn_normalize(adj).to_scipy(), t64(H), t64(np.eye(2)), activation=None)
    np.testing.assert_array_equal(out.data, H)


def test_gcn_path_hand():
    C = gcn_normalize(build_csr([(0, 1)], 2)).to_scipy()
    out = gcn_layer(C, t64(np.eye(2)), t64(np.eye(2)), activation=None)
    np.testing.assert_allclose(out.data, np.full((2, 2), 0.5))


def test_sage_isolated_node():
    adj = build_csr([(1, 2)], 3)
    H = np.random.default_rng(0).normal(size=(3, 2))
    ws, wn = np.eye(2) * 2, np.ones((2, 2))
    out = sage_layer(adj, t64(H), t64(ws), t64(wn), activation=None)
    np.testing.assert_allclose(out.data[0], H[0] @ ws)


def test_sage_star_equal_leaves():
    adj = build_csr([(0, i) for i in range(1, 5)], 5)
    f = np.array([0.3, -1.0])
    H = np.vstack([[5.0, 5.0]] + [f] * 4)
    wn = np.random.default_rng(1).normal(size=(2, 3))
    out = sage_layer(adj, t64(H), t64(np.zeros((2, 3))), t64(wn), activation=None)
    np.testing.assert_allclose(out.data[0], f @ wn)


def test_layer_dimension_errors():
    adj = build_csr([(0, 1)], 2)
    with pytest.raises(DimensionError):
        gcn_layer(gcn_normalize(adj).to_scipy(), t64(np.ones((2, 3))), t64(np.ones((4, 2))))
    with pytest.raises(DimensionError):
        sage_layer(adj, t64(np.ones((3, 2))), t64(np.ones((2, 2))), t64(np.ones((2, 2))))


def test_layer_gradchecks():
    adj = random_graph(12, 30, 3)
    rng = np.random.default_rng(4)
    H, psi, wn, b = t64(rng.normal(size=(12, 4))), t64(rng.normal(size=(4, 3))), \
        t64(rng.normal(size=(4, 3))), t64(rng.normal(size=3))
    C = gcn_normalize(adj).to_scipy()
    w = rng.normal(size=(12, 3))
    assert grad_check(lambda h, p, b: T.tsum(T.tanh(gcn_layer(C, h, p, b, None)) * w), [H, psi, b],
                      tolerance=1e-6).passed
    assert grad_check(lambda h, p, q: T.tsum(T.tanh(sage_layer(adj, h, p, q, None, None)) * w),
                      [H, psi, wn], tolerance=1e-6).passed


@pytest.mark.parametrize("arch", ["gcn", "sage"])
def test_blocks_exhaustive_match_full_graph(arch):
    adj = random_graph(40, 120, 5)
    X = np.random.default_rng(6).normal(size=(40, 6)).astype(np.float32)
    model = GnnModel(GnnConfig(arch=arch, hidden_dim=8, seed=1), 6, "nodecls", 3)
    model.eval()
    full = model.forward_full(X, GraphOperators.build(adj)).data
    seeds = np.array([3, 17, 22, 39])
    blocks = sample_neighbors(adj, seeds, [1000, 1000], RngState(0))
    part = model.forward_blocks(X[blocks[0].src_nodes], blocks, adj.degrees()).data
    np.testing.assert_allclose(part, full[seeds], atol=1e-5)


# training

@pytest.fixture(scope="module")
def rho1_graph():
    return generate_synthetic_tg(SyntheticTgConfig(num_nodes=300, semantic_correlation=1.0, seed=4))


def test_mlp_on_bow_text_determined(rho1_graph):
    g = rho1_graph
    fm = bow_features(g, build_vocab([g.texts[i] for i in g.splits["train"]]), 64)
    res = train_gnn(g, fm, GnnConfig(arch="mlp", epochs=60, seed=0))
    assert res.best["test_acc"] >= 0.9


def test_sage_uses_structure_when_text_is_noise():
    g = generate_synthetic_tg(SyntheticTgConfig(num_nodes=400, semantic_correlation=0.0, seed=5))
    fm = bow_features(g, build_vocab([g.texts[i] for i in g.splits["train"]]), 64)
    mlp = train_gnn(g, fm, GnnConfig(arch="mlp", epochs=60, seed=0)).best["test_acc"]
    sage = train_gnn(g, fm, GnnConfig(arch="sage", epochs=60, seed=0)).best["test_acc"]
    assert sage > mlp + 0.10


def test_lr_zero_parameters_constant(rho1_graph):
    g = rho1_graph
    fm = FeatureMatrix(np.random.default_rng(0).normal(size=(g.num_nodes, 8)), "fixed")
    snaps = []
    train_gnn(g, fm, GnnConfig(arch="sage", epochs=3, learning_rate=0.0, weight_decay=0.0, seed=0,
                               check_ranges=False),
              on_epoch=lambda e, m: snaps.append(m.state_dict()))
    for s in snaps[1:]:
        for k in s:
            np.testing.assert_array_equal(s[k], snaps[0][k])


def test_training_deterministic(rho1_graph):
    g = rho1_graph
    fm = FeatureMatrix(np.random.default_rng(0).normal(size=(g.num_nodes, 8)), "fixed")
    a = train_gnn(g, fm, GnnConfig(arch="gcn", epochs=5, seed=3))
    b = train_gnn(g, fm, GnnConfig(arch="gcn", epochs=5, seed=3))
    assert a.history == b.history


def test_minibatch_training_runs(rho1_graph):
    g = rho1_graph
    fm = bow_features(g, build_vocab(g.texts), 32)
    res = train_gnn(g, fm, GnnConfig(arch="sage", epochs=3, full_batch=False, fanouts=(5, 5),
                                     batch_size=64, seed=0))
    assert len(res.history) == 3 and res.best["valid_acc"] > 0.5


def test_feature_row_mismatch(rho1_graph):
    with pytest.raises(CompatibilityError):
        train_gnn(rho1_graph, FeatureMatrix(np.zeros((5, 3)), "fixed"), GnnConfig(epochs=1))


def test_config_ranges():
    with pytest.raises(ConfigError):
        GnnConfig(num_layers=5).validate()
    with pytest.raises(ConfigError):
        GnnConfig(dropout=0.9).validate()
    with pytest.raises(ConfigError):
        GnnConfig(arch="gat").validate()


def test_link_needs_edge_splits(rho1_graph):
    with pytest.raises(DataError):
        train_gnn(rho1_graph, FeatureMatrix(np.zeros((300, 3)), "fixed"), GnnConfig(epochs=1), task="link")


def test_link_training_never_sees_held_out_edges():
    g = generate_synthetic_tg(SyntheticTgConfig(num_nodes=150, seed=6, link_split=True, num_eval_negatives=20))
    fm = FeatureMatrix(np.random.default_rng(1).normal(size=(150, 8)), "fixed")
    log = []
    res = train_gnn(g, fm, GnnConfig(arch="sage", epochs=3, hidden_dim=16, seed=0), task="link", edge_log=log)
    held = {tuple(e) for e in np.concatenate([g.edge_splits.valid, g.edge_splits.test]).tolist()}
    for kind, edges in log:
        seen = {tuple(sorted(e)) for e in edges.tolist()}
        assert not seen & held, kind
    assert {"valid_mrr", "test_mrr", "test_hits@10"} <= set(res.best)


def test_epochs_to_fraction():
    assert epochs_to_fraction([0.1, 0.5, 0.96, 1.0]) == 3
    assert epochs_to_fraction([1.0, 0.2]) == 1
    assert epochs_to_fraction([0.2, 0.4], reference=1.0) == 2


# inference

@pytest.fixture(scope="module")
def trained(rho1_graph):
    g = rho1_graph
    fm = bow_features(g, build_vocab(g.texts), 32)
    return g, fm, train_gnn(g, fm, GnnConfig(arch="sage", epochs=10, hidden_dim=32, seed=0)).model


def test_predict_probabilities(trained):
    g, fm, model = trained
    p = predict(model, g, fm)
    assert p.shape == (g.num_nodes, g.num_classes)
    np.testing.assert_allclose(p.sum(1), 1, atol=1e-12)
    np.testing.assert_array_equal(p, predict(model, g, fm))


def test_predict_sampled_exhaustive_equals_full(trained):
    g, fm, model = trained
    nodes = np.array([5, 1, 5, 200])
    full = predict(model, g, fm, nodes)
    sampled = predict(model, g, fm, nodes, fanouts=(10_000, 10_000))
    np.testing.assert_allclose(sampled, full, atol=1e-6)


def test_predict_guards(trained):
    g, fm, model = trained
    with pytest.raises(IndexError):
        predict(model, g, fm, [g.num_nodes])
    with pytest.raises(CompatibilityError):
        predict(model, g, FeatureMatrix(np.zeros((g.num_nodes, 7)), "bow"))
    with pytest.raises(CompatibilityError):
        predict(model, g, FeatureMatrix(fm.X, "fixed"))


def test_gnn_checkpoint_round_trip(tmp_path, trained):
    g, fm, model = trained
    save_gnn(tmp_path / "m.stgg", model)
    back = load_gnn(tmp_path / "m.stgg")
    np.testing.assert_array_equal(predict(back, g, fm), predict(model, g, fm))
    save_gnn(tmp_path / "n.stgg", back)
    assert (tmp_path / "m.stgg").read_bytes() == (tmp_path / "n.stgg").read_bytes()
