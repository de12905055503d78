# linkcluster/services/pair_features.py
"""
Per-pair inputs of the linkage predictor.

Enhanced features concatenate each endpoint with the mean of its confident
neighbors. Structural features describe the enclosed subgraph around a pair:
every hop-1/hop-2 node gets a distance label mixing its averaged similarity
to the two centrals with its hop order, and the sorted labels form a
fixed-width vector.
"""
import logging
from dataclasses import dataclass
from multiprocessing import Pool

import numpy as np

from config import Config
from linkcluster.core.errors import FeatureError
from linkcluster.core.graph import EmbeddingSet, check_labels

logger = logging.getLogger(__name__)

PAD_VALUE = 0.0


@dataclass(frozen=True)
class PairSample:
    i: int
    j: int
    label: int = None


@dataclass(frozen=True)
class PairBatch:
    """Column form of a pair stream: endpoints plus optional 0/1 labels."""

    i: np.ndarray
    j: np.ndarray
    labels: np.ndarray = None

    def __len__(self):
        return self.i.shape[0]

    @classmethod
    def from_samples(cls, samples):
        """Columns from PairSample records; labels only when every sample carries one."""
        samples = list(samples)
        i = np.array([s.i for s in samples], dtype=np.int64)
        j = np.array([s.j for s in samples], dtype=np.int64)
        if samples and all(s.label is not None for s in samples):
            return cls(i, j, np.array([s.label for s in samples], dtype=np.int64))
        return cls(i, j)

    def take(self, index):
        labels = None if self.labels is None else self.labels[index]
        return PairBatch(self.i[index], self.j[index], labels)


@dataclass(frozen=True)
class EnclosedSubgraph:
    ids: np.ndarray
    orders: np.ndarray

    def __len__(self):
        return self.ids.shape[0]


def structural_width(k1, k2):
    return 2 * (k1 + k1 * k2) + 2


def enhance_embeddings(embeddings, knn, t1):
    """f'_i = raw mean of f_j over neighbors with s_ij >= t1 (self always qualifies)."""
    if not -1.0 <= t1 <= 1.0:
        raise FeatureError(f"t1 must be in [-1, 1], got {t1}")
    if knn.count != embeddings.count:
        raise FeatureError(f"kNN has {knn.count} nodes, embeddings {embeddings.count}")
    rows = embeddings.rows
    out = np.empty_like(rows)
    step = max(1, Config.INFERENCE_BATCH_SIZE // max(knn.k, 1))
    for lo in range(0, knn.count, step):
        hi = min(lo + step, knn.count)
        mask = knn.sims[lo:hi] >= t1
        gathered = rows[knn.ids[lo:hi]]
        out[lo:hi] = (gathered * mask[:, :, None]).sum(axis=1) / mask.sum(axis=1, keepdims=True)
    return EmbeddingSet(out)


def make_enhanced_pair(embeddings, enhanced, i, j):
    """[f_i | f'_i | f_j | f'_j]"""
    n = embeddings.count
    if i == j:
        raise FeatureError(f"pair endpoints must differ, got ({i}, {j})")
    if not (0 <= i < n and 0 <= j < n):
        raise FeatureError(f"pair ({i}, {j}) out of range for {n} nodes")
    f, fe = embeddings.rows, enhanced.rows
    return np.concatenate([f[i], fe[i], f[j], fe[j]])


def enhanced_pairs(embeddings, enhanced, pairs, original_only=False):
    """Row-wise enhanced features for a PairBatch; original_only gives [f_i | f_j]."""
    f, fe = embeddings.rows, enhanced.rows
    if original_only:
        return np.hstack([f[pairs.i], f[pairs.j]])
    return np.hstack([f[pairs.i], fe[pairs.i], f[pairs.j], fe[pairs.j]])


def _confident_neighbors(knn, x, t2, limit, exclude=None):
    ids, sims = knn.ids[x, 1:], knn.sims[x, 1:]
    keep = sims >= t2
    if exclude is not None:
        keep &= ~np.isin(ids, exclude)
    return ids[keep][:limit]


def enclosed_subgraph(i, j, knn, t2, k1, k2):
    """
    Centrals at order 0, top-k1 confident non-central neighbors of each central
    at order 1, top-k2 confident neighbors of every hop-1 node at order 2. A
    node reached at several hops keeps its lowest order.
    """
    if k1 > knn.k:
        raise FeatureError(f"k1={k1} exceeds kNN size k={knn.k}")
    centrals = np.array([i, j])
    hop1 = np.concatenate([
        _confident_neighbors(knn, i, t2, k1, centrals),
        _confident_neighbors(knn, j, t2, k1, centrals),
    ])
    hop2 = [_confident_neighbors(knn, c, t2, k2) for c in hop1] if k2 > 0 else []
    ids = np.concatenate([np.array([i, j], dtype=np.int64), hop1.astype(np.int64), *hop2]).astype(np.int64)
    orders = np.concatenate([
        np.zeros(2, dtype=np.int64),
        np.ones(hop1.shape[0], dtype=np.int64),
        np.full(sum(h.shape[0] for h in hop2), 2, dtype=np.int64),
    ])
    # first occurrence has the lowest order since ids are listed by hop
    _, first = np.unique(ids, return_index=True)
    first.sort()
    return EnclosedSubgraph(ids[first], orders[first])


def _central_distance(knn, x, nodes, t2, dist_max):
    s = knn.lookup(x, nodes)
    return np.where(np.isfinite(s) & (s >= t2), s, dist_max)


def structural_feature(sub, i, j, knn, t2, dist_max, width=None, descending=False, order_only=False):
    """
    dist_n = (dist_in + dist_jn) / 2 + O_n, sorted, truncated and zero padded.

    dist_xn is s_xn when n is in K(v_x) with s_xn >= t2, else dist_max.
    order_only replaces the label with the hop order alone.
    """
    if width is None:
        raise FeatureError("structural feature width must be given")
    if order_only:
        dist = sub.orders.astype(np.float64)
    else:
        dist = (_central_distance(knn, i, sub.ids, t2, dist_max)
                + _central_distance(knn, j, sub.ids, t2, dist_max)) / 2.0 + sub.orders
    order = np.lexsort((sub.ids, -dist if descending else dist))
    out = np.full(width, PAD_VALUE)
    kept = dist[order][:width]
    out[:kept.shape[0]] = kept
    return out


def _structural_chunk(args):
    i_arr, j_arr, knn, t2, k1, k2, dist_max, descending, order_only = args
    width = structural_width(k1, k2)
    out = np.empty((i_arr.shape[0], width))
    for r, (i, j) in enumerate(zip(i_arr.tolist(), j_arr.tolist())):
        sub = enclosed_subgraph(i, j, knn, t2, k1, k2)
        out[r] = structural_feature(sub, i, j, knn, t2, dist_max, width, descending, order_only)
    return out


def structural_pairs(pairs, knn, cfg, order_only=False, workers=None):
    """Structural features for every pair, chunked over a process pool when workers > 1."""
    workers = workers or Config.WORKERS
    n_chunks = max(1, min(len(pairs), workers * 4)) if workers > 1 else 1
    chunks = [
        (ci, cj, knn, cfg.t2, cfg.k1, cfg.k2, cfg.dist_max, cfg.sort_descending, order_only)
        for ci, cj in zip(np.array_split(pairs.i, n_chunks), np.array_split(pairs.j, n_chunks))
    ]
    if workers > 1 and len(chunks) > 1:
        with Pool(processes=workers) as pool:
            parts = pool.map(_structural_chunk, chunks)
    else:
        parts = [_structural_chunk(c) for c in chunks]
    return np.concatenate(parts) if parts else np.empty((0, cfg.structural_width))


def generate_pairs(knn, gt=None):
    """One pair per non-self neighbor, node-major then rank order; label 1 iff same identity."""
    n, k = knn.ids.shape
    i = np.repeat(np.arange(n, dtype=np.int64), k - 1)
    j = knn.ids[:, 1:].reshape(-1).astype(np.int64)
    labels = None
    if gt is not None:
        gt = check_labels(gt, n)
        labels = (gt[i] == gt[j]).astype(np.int64)
    return PairBatch(i, j, labels)
