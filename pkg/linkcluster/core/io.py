# linkcluster/core/io.py
"""
On-disk formats.

Features: headerless little-endian float32 payload, row-major, with the
shape in a `<path>.meta` sidecar of `count=N` / `dim=D` lines.
Labels and cluster assignments: one non-negative integer per line.
Checkpoints: magic, version, tensor count, then per tensor the name,
rank, dims and a float64 little-endian payload.
Graphs: numpy .npz archives.
"""
import logging
import os
import struct

import numpy as np

from linkcluster.core.errors import DataFormatError
from linkcluster.core.graph import EmbeddingSet, KnnGraph, WeightedGraph, check_labels, normalize_rows

logger = logging.getLogger(__name__)

FEATURE_DTYPE = np.dtype("<f4")
CHECKPOINT_MAGIC = b"LKCKPT\x00\x01"
CHECKPOINT_VERSION = 1


def meta_path(path):
    return f"{path}.meta"


def read_meta(path):
    meta = {}
    try:
        with open(meta_path(path), "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line and not line.startswith("#"):
                    key, _, value = line.partition("=")
                    meta[key.strip()] = int(value)
    except FileNotFoundError:
        raise DataFormatError(f"missing sidecar {meta_path(path)}") from None
    except ValueError as e:
        raise DataFormatError(f"malformed sidecar {meta_path(path)}: {e}") from None
    if "count" not in meta or "dim" not in meta:
        raise DataFormatError(f"sidecar {meta_path(path)} must define count and dim")
    return meta["count"], meta["dim"]


def save_features(embeddings, path):
    rows = embeddings.rows if isinstance(embeddings, EmbeddingSet) else np.asarray(embeddings)
    rows.astype(FEATURE_DTYPE).tofile(path)
    with open(meta_path(path), "w", encoding="utf-8") as f:
        f.write(f"count={rows.shape[0]}\ndim={rows.shape[1]}\n")
    logger.info("saved features path=%s count=%d dim=%d", path, rows.shape[0], rows.shape[1])


def load_features(path, normalize=True):
    """Read a feature file; rows are L2-normalized unless normalize=False."""
    count, dim = read_meta(path)
    expected = count * dim * FEATURE_DTYPE.itemsize
    actual = os.path.getsize(path)
    if actual != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes for {count}x{dim} float32, found {actual}")
    rows = np.fromfile(path, dtype=FEATURE_DTYPE).reshape(count, dim)
    if not np.all(np.isfinite(rows)):
        bad = int(np.flatnonzero(~np.isfinite(rows).all(axis=1))[0])
        raise DataFormatError(f"{path}: non-finite value in row {bad}")
    logger.info("loaded features path=%s count=%d dim=%d", path, count, dim)
    if normalize:
        return normalize_rows(rows)
    return EmbeddingSet(rows.astype(np.float64))


def save_labels(labels, path):
    np.savetxt(path, np.asarray(labels, dtype=np.int64), fmt="%d")


def load_labels(path, count=None):
    try:
        labels = np.loadtxt(path, dtype=np.int64, ndmin=1)
    except ValueError as e:
        raise DataFormatError(f"{path}: labels must be one integer per line ({e})") from None
    return check_labels(labels, count)


# Cluster files share the label format
save_clusters = save_labels
load_clusters = load_labels


def save_knn(knn, path):
    with open(path, "wb") as f:
        np.savez(f, ids=knn.ids, sims=knn.sims)


def load_knn(path):
    with np.load(path) as data:
        if "ids" not in data or "sims" not in data:
            raise DataFormatError(f"{path} is not a kNN archive")
        return KnnGraph(data["ids"].copy(), data["sims"].copy())


def save_graph(graph, path):
    with open(path, "wb") as f:
        np.savez(f, indptr=graph.indptr, indices=graph.indices, weights=graph.weights)


def load_graph(path):
    with np.load(path) as data:
        if "indptr" not in data:
            raise DataFormatError(f"{path} is not a weighted graph archive")
        return WeightedGraph(data["indptr"].copy(), data["indices"].copy(), data["weights"].copy())


def save_checkpoint(tensors, path):
    """Write named float64 tensors; names are UTF-8, order is preserved."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, value in tensors.items():
            arr = np.ascontiguousarray(value, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())
    logger.info("saved checkpoint path=%s tensors=%d", path, len(tensors))


def _read_exact(f, size, path):
    data = f.read(size)
    if len(data) != size:
        raise DataFormatError(f"{path}: truncated checkpoint")
    return data


def load_checkpoint(path):
    tensors = {}
    with open(path, "rb") as f:
        if _read_exact(f, len(CHECKPOINT_MAGIC), path) != CHECKPOINT_MAGIC:
            raise DataFormatError(f"{path}: not a linkcluster checkpoint")
        version, count = struct.unpack("<II", _read_exact(f, 8, path))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, path))
            name = _read_exact(f, name_len, path).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, path))
            shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, path))
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = _read_exact(f, 8 * size, path)
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
        if f.read(1):
            raise DataFormatError(f"{path}: trailing bytes after {count} tensors")
    return tensors
