# linkcluster/services/cluster_service.py
"""
Cluster extraction.

Density peak linking: every node links to at most `max_connections` of its
neighbors that are denser than itself and similar enough; connected
components over those links are the clusters. The density is a kernel sum
over a node's strongest neighbors, kept behind DENSITY_ESTIMATORS so other
estimators can be plugged in.
"""
import logging
from dataclasses import dataclass

import numpy as np

from linkcluster.core.errors import ClusterError
from linkcluster.core.graph import SENTINEL_WEIGHT, build_knn
from linkcluster.core.presets import DpcConfig

logger = logging.getLogger(__name__)

__all__ = [
    "ClusterAssignment", "DpcConfig", "UnionFind", "estimate_density", "peak_link", "connected_components",
    "threshold_baseline", "count_singletons", "cluster_graph", "cluster_features", "DENSITY_ESTIMATORS",
]


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray

    @property
    def count(self):
        return self.labels.shape[0]

    @property
    def n_clusters(self):
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def sizes(self):
        return np.bincount(self.labels, minlength=self.n_clusters)


def _usable(ids, weights, i):
    return (ids != i) & (weights > SENTINEL_WEIGHT)


def estimate_density(graph, cfg):
    """rho_i = sum over the k_density strongest non-self neighbors of exp(-(1 - w_ij) / sigma)."""
    if cfg.sigma <= 0:
        raise ClusterError(f"sigma must be positive, got {cfg.sigma}")
    rho = np.zeros(graph.count)
    for i in range(graph.count):
        ids, w = graph.row(i)
        w = w[_usable(ids, w, i)]
        if w.size == 0:
            continue
        top = np.sort(w)[::-1][:cfg.k_density]
        rho[i] = np.exp(-(1.0 - top) / cfg.sigma).sum()
    return rho


DENSITY_ESTIMATORS = {"kernel": estimate_density}


def peak_link(graph, rho, cfg, link_threshold):
    """
    Edges (i, j) from each node to its strongest strictly denser neighbors.

    "Denser" compares (rho, node id) so ties resolve toward the higher id; a
    density maximum in its neighborhood emits nothing and roots a cluster.
    """
    edges = []
    for i in range(graph.count):
        ids, w = graph.row(i)
        ok = _usable(ids, w, i) & (w >= link_threshold)
        ok &= (rho[ids] > rho[i]) | ((rho[ids] == rho[i]) & (ids > i))
        if not ok.any():
            continue
        cand, cw = ids[ok], w[ok]
        order = np.lexsort((cand, -cw))[:cfg.max_connections]
        edges.extend((i, int(j)) for j in cand[order])
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller root id wins so roots stay deterministic
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def connected_components(edges, n):
    """Union-find over edges; cluster ids are contiguous, ordered by smallest member."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise ClusterError(f"edge endpoint outside [0, {n})")
    uf = UnionFind(n)
    for a, b in edges.tolist():
        uf.union(a, b)
    ids = {}
    labels = np.empty(n, dtype=np.int64)
    for node in range(n):
        labels[node] = ids.setdefault(uf.find(node), len(ids))
    return ClusterAssignment(labels)


def threshold_baseline(graph, tau):
    """Components over every non-self edge with weight >= tau."""
    src, dst, w = graph.edge_arrays()
    keep = (src != dst) & (w >= tau)
    return connected_components(np.stack([src[keep], dst[keep]], axis=1), graph.count)


def count_singletons(assignment):
    return int((assignment.sizes() == 1).sum())


def cluster_graph(graph, cfg, link_threshold, estimator="kernel"):
    if estimator not in DENSITY_ESTIMATORS:
        raise ClusterError(f"unknown density estimator {estimator!r}")
    rho = DENSITY_ESTIMATORS[estimator](graph, cfg)
    edges = peak_link(graph, rho, cfg, link_threshold)
    assignment = connected_components(edges, graph.count)
    logger.info(
        "clustered nodes=%d links=%d clusters=%d singletons=%d",
        graph.count, edges.shape[0], assignment.n_clusters, count_singletons(assignment),
    )
    return assignment


def cluster_features(embeddings, cfg, link_threshold, method="dpc"):
    """kNN over (aggregated) features with k_density neighbors, then DPC or the threshold baseline."""
    k = min(cfg.k_density + 1, embeddings.count)
    graph = build_knn(embeddings, k).to_weighted()
    if method == "threshold":
        return threshold_baseline(graph, link_threshold)
    if method != "dpc":
        raise ClusterError(f"unknown clustering method {method!r}")
    return cluster_graph(graph, cfg, link_threshold)
