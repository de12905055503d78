import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from linkcluster.core.errors import GraphError, UndefinedMetricError
from linkcluster.core.graph import (
    DROP_PRECISION, DROP_RECALL, SENTINEL_WEIGHT, KnnGraph, WeightedGraph, build_knn, check_labels,
    corrupt_subgraphs, cosine_similarity, label_graph, normalize_rows, subgraph_quality,
)


def naive_knn(rows, k):
    sims = np.round(np.clip(rows @ rows.T, -1.0, 1.0), 12)
    n = rows.shape[0]
    ids = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        others = sorted((j for j in range(n) if j != i), key=lambda j: (-sims[i, j], j))
        ids[i] = [i] + others[:k - 1]
    return ids


def naive_quality(graph, gt, cutoff):
    kept = same = hits = 0
    for i in range(graph.count):
        ids, w = graph.row(i)
        for j, weight in zip(ids.tolist(), w.tolist()):
            if j == i:
                continue
            is_same = gt[i] == gt[j]
            same += is_same
            if weight >= cutoff:
                kept += 1
                hits += is_same
    return hits / kept, hits / same


def test_normalize_rows_three_four_five():
    e = normalize_rows([[3.0, 4.0]])
    assert_allclose(e.rows, [[0.6, 0.8]])


def test_normalize_rows_is_idempotent_on_unit_rows():
    e = normalize_rows([[1.0, 0.0], [0.0, 1.0]])
    assert_array_equal(e.rows, [[1.0, 0.0], [0.0, 1.0]])


def test_normalize_rows_random_norms(rng):
    e = normalize_rows(rng.standard_normal((5, 8)))
    assert_allclose(np.linalg.norm(e.rows, axis=1), 1.0, atol=1e-6)


def test_normalize_rows_rejects_zero_row_by_index():
    with pytest.raises(GraphError, match="row 1"):
        normalize_rows([[1.0, 0.0], [0.0, 0.0]])


def test_embeddings_are_read_only(random_embeddings):
    with pytest.raises(ValueError):
        random_embeddings.rows[0, 0] = 2.0


def test_cosine_similarity_cases(rng):
    u = np.array([1.0, 0.0])
    assert cosine_similarity(u, u) == 1.0
    assert cosine_similarity(u, [0.0, 1.0]) == 0.0
    a, b = normalize_rows(rng.standard_normal((2, 6))).rows
    assert abs(cosine_similarity(a, b) - sum(x * y for x, y in zip(a, b))) < 1e-6
    with pytest.raises(GraphError):
        cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])


def test_knn_one_hot_ties_break_by_id():
    knn = build_knn(normalize_rows(np.eye(3)), 2)
    assert_array_equal(knn.ids, [[0, 1], [1, 0], [2, 0]])
    assert_array_equal(knn.sims, [[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])


def test_knn_k1_is_self_only(random_embeddings):
    knn = build_knn(random_embeddings, 1)
    assert_array_equal(knn.ids[:, 0], np.arange(random_embeddings.count))
    assert np.all(knn.sims == 1.0)


def test_knn_rejects_k_above_n(random_embeddings):
    with pytest.raises(GraphError):
        build_knn(random_embeddings, random_embeddings.count + 1)


def test_knn_self_first_even_with_duplicates():
    e = normalize_rows([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    knn = build_knn(e, 3)
    assert_array_equal(knn.ids[:, 0], [0, 1, 2])
    assert knn.ids[1, 1] == 0


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    n=st.integers(2, 60),
    dim=st.integers(2, 12),
    block=st.integers(1, 17),
    data=st.data(),
)
def test_knn_matches_full_sort(seed, n, dim, block, data):
    rows = normalize_rows(np.random.default_rng(seed).standard_normal((n, dim)))
    k = data.draw(st.integers(1, n))
    knn = build_knn(rows, k, block_size=block, workers=1)
    assert_array_equal(knn.ids, naive_knn(rows.rows, k))
    assert np.all(np.diff(knn.sims, axis=1) <= 0)
    assert np.all(knn.sims[:, 0] == 1.0)


def test_knn_worker_pool_matches_single_process(random_embeddings):
    one = build_knn(random_embeddings, 5, block_size=7, workers=1)
    many = build_knn(random_embeddings, 5, block_size=7, workers=2)
    assert_array_equal(one.ids, many.ids)
    assert_array_equal(one.sims, many.sims)


def test_knn_lookup_and_truncate(path_knn):
    assert_allclose(path_knn.lookup(0, [2, 0]), [0.7, 1.0])
    short = path_knn.truncate(2)
    assert short.k == 2
    assert_array_equal(short.ids, path_knn.ids[:, :2])


def test_lookup_missing_neighbor_is_nan():
    knn = KnnGraph(np.array([[0, 1], [1, 0], [2, 1]]), np.array([[1.0, 0.5], [1.0, 0.5], [1.0, 0.2]]))
    assert np.isnan(knn.lookup(0, [2])[0])


def test_weighted_graph_head_keeps_rank_order(path_knn):
    head = path_knn.to_weighted().head(2)
    expected = path_knn.truncate(2).to_weighted()
    assert_array_equal(head.indptr, expected.indptr)
    assert_array_equal(head.indices, expected.indices)
    assert_array_equal(head.weights, expected.weights)


def test_weighted_graph_rejects_duplicates():
    with pytest.raises(GraphError, match="duplicate"):
        WeightedGraph(np.array([0, 2]), np.array([0, 0]), np.array([1.0, 0.5]))


def test_check_labels():
    assert check_labels([3, 0, 7]).dtype == np.int64
    with pytest.raises(GraphError):
        check_labels([-1, 0])
    with pytest.raises(GraphError):
        check_labels([0, 1], count=3)
    with pytest.raises(GraphError):
        check_labels([0.5, 1.0])


def test_label_graph_is_perfect(blobs):
    embeddings, gt = blobs
    graph = label_graph(build_knn(embeddings, 8), gt)
    assert subgraph_quality(graph, gt, 0.5) == (1.0, 1.0)


def test_quality_cutoff_above_max_weight_is_undefined(blobs):
    embeddings, gt = blobs
    graph = build_knn(embeddings, 5).to_weighted()
    with pytest.raises(UndefinedMetricError):
        subgraph_quality(graph, gt, 1.5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(4, 50), n_labels=st.integers(1, 5))
def test_quality_matches_pair_count(seed, n, n_labels):
    rng = np.random.default_rng(seed)
    knn = build_knn(normalize_rows(rng.standard_normal((n, 4))), min(n, 5))
    gt = rng.integers(0, n_labels, size=n)
    graph = knn.to_weighted(rng.uniform(-1.0, 1.0, size=knn.ids.shape))
    cutoff = 0.0
    try:
        expected = naive_quality(graph, gt, cutoff)
    except ZeroDivisionError:
        with pytest.raises(UndefinedMetricError):
            subgraph_quality(graph, gt, cutoff)
        return
    assert subgraph_quality(graph, gt, cutoff) == expected


@pytest.mark.parametrize("mode", [DROP_RECALL, DROP_PRECISION])
def test_corrupt_target_one_is_unchanged(blobs, mode):
    embeddings, gt = blobs
    graph = label_graph(build_knn(embeddings, 8), gt)
    out = corrupt_subgraphs(graph, gt, mode, 1.0, seed=3)
    assert_array_equal(out.indices, graph.indices)
    assert_array_equal(out.weights, graph.weights)


def test_drop_recall_hits_target(blobs):
    embeddings, gt = blobs
    graph = label_graph(build_knn(embeddings, 8), gt)
    n_same = int((graph.weights == 1.0).sum()) - graph.count
    out = corrupt_subgraphs(graph, gt, DROP_RECALL, 0.5, seed=3)
    precision, recall = subgraph_quality(out, gt, 0.0)
    assert precision == 1.0
    assert abs(recall - 0.5) <= 1.0 / n_same
    assert_array_equal(out.indices, graph.indices)
    assert np.all((out.weights == 1.0) | (out.weights == SENTINEL_WEIGHT))


def test_drop_precision_hits_target(blobs):
    embeddings, gt = blobs
    graph = label_graph(build_knn(embeddings, 8), gt)
    out = corrupt_subgraphs(graph, gt, DROP_PRECISION, 0.5, seed=3)
    precision, recall = subgraph_quality(out, gt, 0.0)
    kept = int(((out.weights >= 0.0) & (out.sources() != out.indices)).sum())
    assert recall == 1.0
    assert abs(precision - 0.5) <= 1.0 / kept


def test_corruption_is_seeded(blobs):
    embeddings, gt = blobs
    graph = label_graph(build_knn(embeddings, 8), gt)
    a = corrupt_subgraphs(graph, gt, DROP_PRECISION, 0.7, seed=11)
    b = corrupt_subgraphs(graph, gt, DROP_PRECISION, 0.7, seed=11)
    assert_array_equal(a.indices, b.indices)
    assert_array_equal(a.weights, b.weights)


def kept_edges(graph):
    src, dst, w = graph.edge_arrays()
    return {(a, b) for a, b, x in zip(src.tolist(), dst.tolist(), w.tolist()) if a != b and x >= 0.0}


@pytest.mark.parametrize("mode", [DROP_RECALL, DROP_PRECISION])
def test_lower_target_corrupts_a_superset(blobs, mode):
    embeddings, gt = blobs
    graph = label_graph(build_knn(embeddings, 8), gt)
    mild, strong = (kept_edges(corrupt_subgraphs(graph, gt, mode, t, seed=5)) for t in (0.8, 0.5))
    if mode == DROP_RECALL:
        assert strong < mild
    else:
        assert mild < strong


@pytest.mark.parametrize("target", [0.0, -0.1, 1.5])
def test_corruption_rejects_bad_target(blobs, target):
    embeddings, gt = blobs
    graph = label_graph(build_knn(embeddings, 4), gt)
    with pytest.raises(GraphError):
        corrupt_subgraphs(graph, gt, DROP_RECALL, target)


def test_corruption_rejects_unknown_mode(blobs):
    embeddings, gt = blobs
    graph = label_graph(build_knn(embeddings, 4), gt)
    with pytest.raises(GraphError, match="mode"):
        corrupt_subgraphs(graph, gt, "drop-both", 0.5)
