import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from linkcluster.core.errors import ConfigError
from linkcluster.core.graph import EmbeddingSet, KnnGraph, build_knn, normalize_rows
from linkcluster.core.nn import arcface_loss, gradient_check, selu
from linkcluster.services.gcn_service import (
    GcnLayer, SparseAdjacency, aggregate, build_adjacency, build_gcn, gcn_layer, load_gcn, save_gcn, train_gcn,
)
from linkcluster.services.synth_service import SynthSpec, synth_generate


def dense_layer(features, a, w, w_skip):
    n = a.shape[0]
    a_tilde = a + np.eye(n)
    d_inv = np.diag(1.0 / a_tilde.sum(axis=1))
    return selu(d_inv @ a_tilde @ features @ w + features @ w_skip)


@pytest.fixture
def tiny_graph():
    ids = np.array([[0, 1, 2], [1, 0, 2], [2, 1, 0], [3, 2, 0]])
    weights = np.array([[1.0, 0.9, 0.2], [1.0, 0.9, 0.6], [1.0, 0.6, 0.2], [1.0, 0.7, 0.1]])
    return KnnGraph(ids, np.ones_like(weights)).to_weighted(weights)


def test_adjacency_threshold_and_union(tiny_graph):
    adj = build_adjacency(tiny_graph, 0.5)
    dense = adj.matrix.toarray()
    expected = np.zeros((4, 4))
    for a, b in ((0, 1), (1, 2), (3, 2)):
        expected[a, b] = expected[b, a] = 1.0
    assert_array_equal(dense, expected)
    assert_array_equal(adj.neighbors(2), [1, 3])
    assert_array_equal(adj.degrees, [2, 3, 3, 2])


def test_adjacency_directed(tiny_graph):
    dense = build_adjacency(tiny_graph, 0.5, symmetric=False).matrix.toarray()
    assert dense[3, 2] == 1.0
    assert dense[2, 3] == 0.0


def test_propagation_rows_sum_to_one(tiny_graph):
    p = build_adjacency(tiny_graph, 0.5).propagation()
    assert_allclose(np.asarray(p.sum(axis=1)).ravel(), 1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 30), dim=st.integers(1, 6), t3=st.floats(-0.5, 0.9))
def test_gcn_layer_matches_dense_oracle(seed, n, dim, t3):
    rng = np.random.default_rng(seed)
    k = min(n, 4)
    knn = build_knn(normalize_rows(rng.standard_normal((n, 3))), k)
    graph = knn.to_weighted(rng.uniform(0.0, 1.0, size=knn.ids.shape))
    adj = build_adjacency(graph, t3)
    features = rng.standard_normal((n, dim))
    w, w_skip = rng.standard_normal((dim, dim)), rng.standard_normal((dim, dim))
    assert_allclose(gcn_layer(features, adj, w, w_skip), dense_layer(features, adj.matrix.toarray(), w, w_skip),
                    rtol=1e-10, atol=1e-10)


def test_isolated_node_keeps_own_features():
    knn = KnnGraph(np.array([[0, 1], [1, 0]]), np.array([[1.0, 0.1], [1.0, 0.1]]))
    adj = build_adjacency(knn.to_weighted(), 0.5)
    features = np.array([[1.0, 2.0], [3.0, 4.0]])
    eye, zero = np.eye(2), np.zeros((2, 2))
    assert_allclose(gcn_layer(features, adj, eye, zero), selu(features))


def test_gcn_layer_gradients(tiny_graph, rng):
    adj = build_adjacency(tiny_graph, 0.5)
    propagation = adj.propagation()
    layer = GcnLayer(3, 2, rng)
    x = rng.standard_normal((4, 3))
    upstream = rng.standard_normal((4, 2))
    layer.forward(x, propagation)
    grad_in = layer.backward(upstream)
    report = gradient_check(
        lambda: float((layer.forward(x, propagation) * upstream).sum()),
        {**layer.params(), "input": x},
        {**layer.grads, "input": grad_in},
    )
    assert report.passed, report


def test_training_log_and_determinism(blobs, small_gcn):
    embeddings, gt = blobs
    adj = build_adjacency(build_knn(embeddings, small_gcn.k_train).to_weighted(), small_gcn.t3_train)
    model_a, log_a = train_gcn(embeddings, adj, gt, small_gcn)
    model_b, log_b = train_gcn(embeddings, adj, gt, small_gcn)
    assert len(log_a) == small_gcn.epochs
    assert log_a == log_b
    assert all(np.isfinite(r["loss"]) for r in log_a)
    for name, value in model_a.named_params().items():
        assert_array_equal(model_b.named_params()[name], value)


def test_aggregate_is_unit_norm(blobs, small_gcn):
    embeddings, gt = blobs
    adj = build_adjacency(build_knn(embeddings, small_gcn.k_test).to_weighted(), small_gcn.t3_test)
    model, _ = train_gcn(embeddings, adj, gt, dataclasses.replace(small_gcn, epochs=1))
    out = aggregate(model, embeddings, adj)
    assert out.rows.shape == embeddings.rows.shape
    assert_allclose(np.linalg.norm(out.rows, axis=1), 1.0)


def test_aggregate_rejects_dim_mismatch(blobs, small_gcn):
    embeddings, gt = blobs
    adj = build_adjacency(build_knn(embeddings, 4).to_weighted(), 0.5)
    model, _ = train_gcn(embeddings, adj, gt, dataclasses.replace(small_gcn, epochs=0))
    other = normalize_rows(np.ones((embeddings.count, embeddings.dim + 1)))
    with pytest.raises(ConfigError):
        aggregate(model, other, adj)


def test_training_rejects_adjacency_size_mismatch(blobs, small_gcn, random_embeddings):
    embeddings, gt = blobs
    adj = build_adjacency(build_knn(random_embeddings, 4).to_weighted(), 0.5)
    with pytest.raises(ConfigError):
        train_gcn(embeddings, adj, gt, small_gcn)


def test_checkpoint_round_trip(tmp_path, blobs, small_gcn):
    embeddings, gt = blobs
    adj = build_adjacency(build_knn(embeddings, small_gcn.k_train).to_weighted(), small_gcn.t3_train)
    model, _ = train_gcn(embeddings, adj, gt, small_gcn)
    path = str(tmp_path / "gcn.ckpt")
    save_gcn(model, path)
    loaded = load_gcn(path)
    assert loaded.config == model.config
    assert_array_equal(aggregate(loaded, embeddings, adj).rows, aggregate(model, embeddings, adj).rows)


def test_aggregate_is_permutation_equivariant(blobs, small_gcn, rng):
    embeddings, gt = blobs
    adj = build_adjacency(build_knn(embeddings, small_gcn.k_test).to_weighted(), small_gcn.t3_test)
    model, _ = train_gcn(embeddings, adj, gt, dataclasses.replace(small_gcn, epochs=1))
    perm = rng.permutation(embeddings.count)
    inverse = np.argsort(perm)
    shuffled = SparseAdjacency(adj.matrix[perm][:, perm].tocsr())
    out = aggregate(model, EmbeddingSet(embeddings.rows[perm].copy()), shuffled)
    assert_allclose(out.rows[inverse], aggregate(model, embeddings, adj).rows, rtol=0, atol=1e-12)


def mean_intra_class_cosine(rows, gt):
    sims = rows @ rows.T
    same = (gt[:, None] == gt[None, :]) & ~np.eye(len(gt), dtype=bool)
    return sims[same].mean()


def test_aggregate_tightens_classes(blobs, small_gcn):
    embeddings, gt = blobs
    adj = build_adjacency(build_knn(embeddings, small_gcn.k_test).to_weighted(), small_gcn.t3_test)
    model, _ = train_gcn(embeddings, adj, gt, dataclasses.replace(small_gcn, epochs=10))
    out = aggregate(model, embeddings, adj)
    assert mean_intra_class_cosine(out.rows, gt) > mean_intra_class_cosine(embeddings.rows, gt)


def test_training_separates_clean_classes(small_gcn):
    embeddings, gt = synth_generate(SynthSpec(n_classes=4, sizes=(10, 10), dim=16, noise=0.1, seed=4))
    cfg = dataclasses.replace(small_gcn, epochs=40, lr=0.02)
    adj = build_adjacency(build_knn(embeddings, cfg.k_train).to_weighted(), cfg.t3_train)
    _, log = train_gcn(embeddings, adj, gt, cfg)
    assert log[-1]["accuracy"] >= 0.95


def test_arcface_gradients_through_gcn(rng, small_gcn):
    n, dim = 12, 4
    embeddings = normalize_rows(rng.standard_normal((n, dim)))
    labels = np.arange(n) % 3
    propagation = build_adjacency(build_knn(embeddings, 4).to_weighted(), 0.0).propagation()
    model = build_gcn(dim, 3, small_gcn, rng)
    features = embeddings.rows

    def loss():
        return arcface_loss(model.head, model.forward(features, propagation), labels)[0]

    _, grad_out, grad_head, _ = arcface_loss(model.head, model.forward(features, propagation), labels)
    model.backward(grad_out)
    grads = {f"layer{l}.{k}": v for l, layer in enumerate(model.layers) for k, v in layer.grads.items()}
    grads["head.weight"] = grad_head
    report = gradient_check(loss, model.named_params(), grads, tolerance=1e-3)
    assert report.passed, report
