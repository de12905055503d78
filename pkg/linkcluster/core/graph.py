# linkcluster/core/graph.py
"""
Embedding storage, exact cosine kNN graphs and subgraph quality tools.

Every graph type here is immutable after construction. Node ids are row
indices into the EmbeddingSet the graph was built from.
"""
import logging
from dataclasses import dataclass
from multiprocessing import Pool

import numpy as np

from config import Config
from linkcluster.core.errors import GraphError, UndefinedMetricError
from linkcluster.extensions import STREAM_CORRUPT, make_rng

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-5
# Weight of an edge that is a candidate but never kept (below every cutoff in [-1, 1))
SENTINEL_WEIGHT = -1.0
# Similarities are rounded before ranking so block layout cannot reorder neighbors
SIM_DECIMALS = 12

DROP_RECALL = "drop-recall"
DROP_PRECISION = "drop-precision"


@dataclass(frozen=True)
class EmbeddingSet:
    rows: np.ndarray

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise GraphError(f"embeddings must be 2D, got shape {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            bad = int(np.flatnonzero(~np.isfinite(self.rows).all(axis=1))[0])
            raise GraphError(f"non-finite entry in row {bad}")
        self.rows.setflags(write=False)

    @property
    def count(self):
        return self.rows.shape[0]

    @property
    def dim(self):
        return self.rows.shape[1]


@dataclass(frozen=True)
class KnnGraph:
    """Per node, the k most similar nodes; column 0 is the node itself at 1.0."""

    ids: np.ndarray
    sims: np.ndarray

    def __post_init__(self):
        if self.ids.shape != self.sims.shape or self.ids.ndim != 2:
            raise GraphError(f"ids {self.ids.shape} and sims {self.sims.shape} must be equal 2D shapes")
        self.ids.setflags(write=False)
        self.sims.setflags(write=False)

    @property
    def count(self):
        return self.ids.shape[0]

    @property
    def k(self):
        return self.ids.shape[1]

    def truncate(self, k):
        """The first k columns: the exact k-NN graph of the same embeddings."""
        if not 1 <= k <= self.k:
            raise GraphError(f"cannot truncate a k={self.k} graph to {k}")
        return KnnGraph(self.ids[:, :k].copy(), self.sims[:, :k].copy())

    def lookup(self, x, nodes):
        """Similarity s_xn for each n in nodes, NaN where n is not in K(v_x)."""
        nodes = np.asarray(nodes)
        hits = self.ids[x][None, :] == nodes[:, None]
        found = hits.any(axis=1)
        out = np.full(nodes.shape[0], np.nan)
        out[found] = self.sims[x][hits[found].argmax(axis=1)]
        return out

    def to_weighted(self, weights=None):
        """WeightedGraph with the same topology, weighted by sims or by `weights`."""
        weights = self.sims if weights is None else np.asarray(weights, dtype=np.float64)
        n, k = self.ids.shape
        indptr = np.arange(0, n * k + 1, k, dtype=np.int64)
        return WeightedGraph(indptr, self.ids.ravel().copy(), weights.ravel().copy())


@dataclass(frozen=True)
class WeightedGraph:
    """CSR adjacency: row i owns indices[indptr[i]:indptr[i+1]] with matching weights."""

    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        n = self.indptr.shape[0] - 1
        if self.indices.shape != self.weights.shape:
            raise GraphError("indices and weights differ in length")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n):
            raise GraphError("neighbor id out of range")
        if not np.all(np.isfinite(self.weights)):
            raise GraphError("edge weights must be finite")
        src = self.sources()
        keys = src * max(n, 1) + self.indices
        if np.unique(keys).size != keys.size:
            raise GraphError("duplicate neighbor within a node's list")
        for arr in (self.indptr, self.indices, self.weights):
            arr.setflags(write=False)

    @property
    def count(self):
        return self.indptr.shape[0] - 1

    @property
    def edge_count(self):
        return self.indices.shape[0]

    def row(self, i):
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.weights[lo:hi]

    def sources(self):
        return np.repeat(np.arange(self.count, dtype=np.int64), np.diff(self.indptr))

    def edge_arrays(self):
        return self.sources(), self.indices, self.weights

    def head(self, k):
        """First k entries of every row; rank order for graphs built from a KnnGraph."""
        if k < 1:
            raise GraphError(f"k must be >= 1, got {k}")
        src = self.sources()
        keep = np.arange(self.edge_count) - self.indptr[src] < k
        return WeightedGraph.from_edges(src[keep], self.indices[keep], self.weights[keep], self.count)

    @classmethod
    def from_edges(cls, src, dst, weights, count):
        """Build from parallel edge arrays; edges keep their relative order within a row."""
        src = np.asarray(src, dtype=np.int64)
        order = np.argsort(src, kind="stable")
        indptr = np.zeros(count + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=count), out=indptr[1:])
        return cls(
            indptr,
            np.asarray(dst, dtype=np.int64)[order],
            np.asarray(weights, dtype=np.float64)[order],
        )


def check_labels(labels, count=None):
    """Validate a LabelVector: 1D, non-negative integers, optional length check."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise GraphError(f"labels must be 1D, got shape {labels.shape}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        raise GraphError(f"labels must be integers, got dtype {labels.dtype}")
    labels = labels.astype(np.int64)
    if labels.size and labels.min() < 0:
        raise GraphError("labels must be non-negative")
    if count is not None and labels.shape[0] != count:
        raise GraphError(f"expected {count} labels, got {labels.shape[0]}")
    return labels


def normalize_rows(matrix):
    """Scale every row to unit L2 norm; an all-zero row is rejected."""
    rows = np.array(matrix, dtype=np.float64)
    if rows.ndim != 2:
        raise GraphError(f"expected a 2D matrix, got shape {rows.shape}")
    if not np.all(np.isfinite(rows)):
        bad = int(np.flatnonzero(~np.isfinite(rows).all(axis=1))[0])
        raise GraphError(f"non-finite entry in row {bad}")
    norms = np.linalg.norm(rows, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise GraphError(f"row {int(zero[0])} has zero norm")
    return EmbeddingSet(rows / norms[:, None])


def cosine_similarity(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise GraphError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.clip(np.dot(u, v), -1.0, 1.0))


def _topk_block(rows, start, stop, k):
    sims = rows[start:stop] @ rows.T
    np.clip(sims, -1.0, 1.0, out=sims)
    sims = np.round(sims, SIM_DECIMALS)
    local = np.arange(stop - start)
    sims[local, start + local] = np.inf

    n = rows.shape[0]
    if k < n:
        part = np.argpartition(-sims, k - 1, axis=1)[:, :k]
        kth = np.take_along_axis(sims, part, axis=1).min(axis=1)
    else:
        kth = np.full(stop - start, -np.inf)

    ids = np.empty((stop - start, k), dtype=np.int64)
    for r in range(stop - start):
        cand = np.flatnonzero(sims[r] >= kth[r])
        # similarity descending, then node id ascending
        order = np.lexsort((cand, -sims[r, cand]))[:k]
        ids[r] = cand[order]
    out = np.take_along_axis(sims, ids, axis=1)
    out[:, 0] = 1.0
    return ids, out


_shared_rows = None


def _init_knn_worker(rows):
    global _shared_rows
    _shared_rows = rows


def _knn_task(task):
    start, stop, k = task
    return _topk_block(_shared_rows, start, stop, k)


def build_knn(embeddings, k, block_size=None, workers=None):
    """
    Exact cosine kNN by blocked matrix products.

    Self sits at rank 0 with similarity 1.0; ties break by ascending node id.
    Extra memory per block is block_size x N.
    """
    n = embeddings.count
    if not 1 <= k <= n:
        raise GraphError(f"k must be in [1, {n}], got {k}")
    block_size = block_size or Config.KNN_BLOCK_SIZE
    workers = workers or Config.WORKERS
    bounds = list(range(0, n, block_size)) + [n]
    tasks = [(lo, hi, k) for lo, hi in zip(bounds[:-1], bounds[1:])]
    rows = np.ascontiguousarray(embeddings.rows)

    if workers > 1 and len(tasks) > 1:
        with Pool(processes=workers, initializer=_init_knn_worker, initargs=(rows,)) as pool:
            parts = pool.map(_knn_task, tasks)
    else:
        parts = [_topk_block(rows, lo, hi, kk) for lo, hi, kk in tasks]

    ids = np.concatenate([p[0] for p in parts])
    sims = np.concatenate([p[1] for p in parts])
    logger.debug("knn built n=%d k=%d blocks=%d workers=%d", n, k, len(tasks), workers)
    return KnnGraph(ids, sims)


def label_graph(knn, gt):
    """
    Ground-truth-complete graph over the kNN topology: intra-label edges are
    kept (weight 1.0), inter-label edges stay as never-kept candidates.
    """
    gt = check_labels(gt, knn.count)
    same = gt[knn.ids] == gt[:, None]
    return knn.to_weighted(np.where(same, 1.0, SENTINEL_WEIGHT))


def subgraph_quality(graph, gt, cutoff):
    """
    Precision and recall of the edges kept at `cutoff`.

    Self edges are ignored. Recall is measured against every same-label edge
    present in the graph, kept or not.
    """
    gt = check_labels(gt, graph.count)
    src, dst, w = graph.edge_arrays()
    other = src != dst
    same = (gt[src] == gt[dst]) & other
    kept = (w >= cutoff) & other

    n_kept = int(kept.sum())
    if n_kept == 0:
        raise UndefinedMetricError(f"no edges kept at cutoff {cutoff}")
    n_same = int(same.sum())
    if n_same == 0:
        raise UndefinedMetricError("graph has no same-label candidate edges")
    hits = int((kept & same).sum())
    return hits / n_kept, hits / n_same


def corrupt_subgraphs(graph, gt, mode, target, seed=None, cutoff=0.0):
    """
    Degrade one side of subgraph quality while holding the other at 1.0.

    drop-recall demotes random kept true edges to the sentinel weight until
    recall reaches `target`; drop-precision promotes (or adds) random wrong
    edges until precision reaches `target`. Counts are rounded to the nearest edge.
    Edges are taken as prefixes of one seeded order, so for a fixed seed a
    lower target corrupts a superset of what a higher one does.
    """
    if not 0.0 < target <= 1.0:
        raise GraphError(f"target must be in (0, 1], got {target}")
    gt = check_labels(gt, graph.count)
    rng = make_rng(seed, STREAM_CORRUPT)
    src, dst, w = graph.edge_arrays()
    src, dst, w = src.copy(), dst.copy(), w.copy()
    other = src != dst
    same = gt[src] == gt[dst]
    kept = w >= cutoff

    if mode == DROP_RECALL:
        n_candidates = int((same & other).sum())
        kept_true = np.flatnonzero(same & other & kept)
        n_drop = kept_true.size - int(round(target * n_candidates))
        if n_drop > 0:
            drop = rng.permutation(kept_true)[:n_drop]
            w[drop] = SENTINEL_WEIGHT
        logger.debug("drop-recall target=%.3f dropped=%d", target, max(n_drop, 0))
        return WeightedGraph.from_edges(src, dst, w, graph.count)

    if mode != DROP_PRECISION:
        raise GraphError(f"unknown corruption mode {mode!r}")

    n_true = int((same & other & kept).sum())
    n_wrong = int((~same & other & kept).sum())
    n_add = int(round(n_true * (1.0 - target) / target)) - n_wrong
    if n_add <= 0:
        return WeightedGraph.from_edges(src, dst, w, graph.count)

    idle_wrong = np.flatnonzero(~same & other & ~kept)
    promote = rng.permutation(idle_wrong)[:n_add]
    w[promote] = 1.0
    n_add -= promote.size

    extra_src, extra_dst = [], []
    if n_add > 0:
        existing = set(zip(src.tolist(), dst.tolist()))
        n = graph.count
        attempts = 0
        while n_add > 0 and attempts < 100 * (n_add + n):
            attempts += 1
            i, j = (int(x) for x in rng.integers(0, n, size=2))
            if i == j or gt[i] == gt[j] or (i, j) in existing:
                continue
            existing.add((i, j))
            extra_src.append(i)
            extra_dst.append(j)
            n_add -= 1
        if n_add > 0:
            logger.warning("drop-precision ran out of wrong pairs, short by %d edges", n_add)

    logger.debug("drop-precision target=%.3f promoted=%d added=%d", target, promote.size, len(extra_src))
    return WeightedGraph.from_edges(
        np.concatenate([src, np.asarray(extra_src, dtype=np.int64)]),
        np.concatenate([dst, np.asarray(extra_dst, dtype=np.int64)]),
        np.concatenate([w, np.ones(len(extra_src))]),
        graph.count,
    )
