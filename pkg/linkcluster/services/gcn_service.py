# linkcluster/services/gcn_service.py
"""
Feature aggregation over rebuilt subgraphs.

Edges whose linkage probability passes t3 form a binary adjacency A; two
GCN layers F' = SELU(D~^-1 (A + I) F W + F W_skip) are trained with an
ArcFace head and the aggregated, re-normalized features feed clustering.
"""
import dataclasses
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as ssp

from linkcluster.core.errors import ConfigError, ModelError
from linkcluster.core.graph import check_labels, normalize_rows
from linkcluster.core.io import load_checkpoint, save_checkpoint
from linkcluster.core.nn import (
    EVAL, TRAIN, ArcFaceHead, Dropout, OptimizerState, arcface_loss, gcn_schedule, kaiming_uniform, selu,
    selu_grad, sgd_step,
)
from linkcluster.core.presets import GcnConfig
from linkcluster.extensions import STREAM_DROPOUT, STREAM_GCN_INIT, STREAM_GCN_SHUFFLE, make_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SparseAdjacency:
    """Binary adjacency without self loops; propagation adds I."""

    matrix: ssp.csr_matrix
    symmetric: bool = True

    @property
    def count(self):
        return self.matrix.shape[0]

    @property
    def degrees(self):
        return np.diff(self.matrix.indptr) + 1

    def neighbors(self, i):
        return self.matrix.indices[self.matrix.indptr[i]:self.matrix.indptr[i + 1]]

    def propagation(self):
        """D~^-1 A~ as CSR, rows averaging a node with its neighbors."""
        a_tilde = self.matrix + ssp.identity(self.count, format="csr")
        return (ssp.diags(1.0 / self.degrees) @ a_tilde).tocsr()


def build_adjacency(graph, t3, symmetric=True):
    """A_ij = 1 iff weight(i -> j) >= t3 for a non-self edge; union with the reverse when symmetric."""
    src, dst, w = graph.edge_arrays()
    keep = (src != dst) & (w >= t3)
    n = graph.count
    a = ssp.csr_matrix((np.ones(int(keep.sum())), (src[keep], dst[keep])), shape=(n, n))
    if symmetric:
        a = a.maximum(a.T).tocsr()
    a.data[:] = 1.0
    a.eliminate_zeros()
    a.sort_indices()
    logger.debug("adjacency t3=%.3f edges=%d", t3, a.nnz)
    return SparseAdjacency(a, symmetric)


def gcn_layer(features, adj, weight, weight_skip, propagation=None):
    p = adj.propagation() if propagation is None else propagation
    return selu(p @ features @ weight + features @ weight_skip)


class GcnLayer:
    def __init__(self, width_in, width_out, rng=None):
        if rng is None:
            self.W = np.zeros((width_in, width_out))
            self.W_skip = np.zeros((width_in, width_out))
        else:
            self.W = kaiming_uniform(width_in, width_out, rng)
            self.W_skip = kaiming_uniform(width_in, width_out, rng)
        self.grads = {}
        self._cache = None

    def params(self):
        return {"W": self.W, "W_skip": self.W_skip}

    def forward(self, x, propagation):
        px = propagation @ x
        z = px @ self.W + x @ self.W_skip
        self._cache = (x, px, z, propagation)
        return selu(z)

    def backward(self, grad):
        if self._cache is None:
            raise ModelError("gcn layer: backward called without a cached forward")
        x, px, z, propagation = self._cache
        dz = grad * selu_grad(z)
        self.grads = {"W": px.T @ dz, "W_skip": x.T @ dz}
        return propagation.T @ (dz @ self.W.T) + dz @ self.W_skip.T


@dataclass
class GcnModel:
    layers: list
    head: ArcFaceHead
    config: GcnConfig

    def __post_init__(self):
        self.dropouts = [Dropout(self.config.dropout) for _ in self.layers]

    @property
    def dim(self):
        return self.layers[0].W.shape[0]

    def named_params(self):
        out = {f"layer{l}.{k}": v for l, layer in enumerate(self.layers) for k, v in layer.params().items()}
        out["head.weight"] = self.head.weight
        return out

    def forward(self, features, propagation, mode=EVAL, rng=None):
        x = features
        for dropout, layer in zip(self.dropouts, self.layers):
            x = layer.forward(dropout.forward(x, mode == TRAIN, rng), propagation)
        return x

    def backward(self, grad):
        for dropout, layer in zip(reversed(self.dropouts), reversed(self.layers)):
            grad = dropout.backward(layer.backward(grad))
        return grad


def build_gcn(dim, n_classes, cfg, rng=None):
    rng = rng if rng is not None else make_rng(cfg.seed, STREAM_GCN_INIT)
    layers = [GcnLayer(dim, dim, rng), GcnLayer(dim, dim, rng)]
    head = ArcFaceHead.create(n_classes, dim, rng, cfg.s, cfg.m)
    return GcnModel(layers, head, dataclasses.replace(cfg))


def train_gcn(embeddings, adj, gt, cfg):
    """
    Mini-batched training with full neighborhoods.

    Each step runs the layers over the whole graph so every batch node
    aggregates its complete adjacency row, and applies the ArcFace loss to
    the batch rows only. Returns (model, log).
    """
    cfg.validate()
    gt = check_labels(gt, embeddings.count)
    if adj.count != embeddings.count:
        raise ConfigError(f"adjacency has {adj.count} nodes, features {embeddings.count}")
    _, classes = np.unique(gt, return_inverse=True)
    n_classes = int(classes.max()) + 1 if classes.size else 1
    if n_classes == 1:
        logger.warning("single training class: ArcFace loss is identically zero")

    model = build_gcn(embeddings.dim, n_classes, cfg, make_rng(cfg.seed, STREAM_GCN_INIT))
    propagation = adj.propagation()
    features = embeddings.rows
    opt = OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay, gcn_schedule(cfg.lr))
    shuffle_rng = make_rng(cfg.seed, STREAM_GCN_SHUFFLE)
    dropout_rng = make_rng(cfg.seed, STREAM_DROPOUT)
    n = embeddings.count
    log = []
    logger.info("training gcn nodes=%d classes=%d edges=%d", n, n_classes, adj.matrix.nnz)

    for epoch in range(cfg.epochs):
        lr = opt.begin_epoch(epoch)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            out = model.forward(features, propagation, TRAIN, dropout_rng)
            loss, grad_batch, grad_head, _ = arcface_loss(model.head, out[idx], classes[idx])
            grad_out = np.zeros_like(out)
            grad_out[idx] = grad_batch
            model.backward(grad_out)
            grads = {f"layer{l}.{k}": v for l, layer in enumerate(model.layers) for k, v in layer.grads.items()}
            grads["head.weight"] = grad_head
            sgd_step(opt, model.named_params(), grads)
            total += loss * idx.size

        out = model.forward(features, propagation, EVAL)
        _, _, _, cos = arcface_loss(model.head, out, classes)
        record = {
            "epoch": epoch,
            "lr": lr,
            "loss": total / n,
            "accuracy": float((cos.argmax(axis=1) == classes).mean()),
        }
        log.append(record)
        logger.info("epoch=%d lr=%g loss=%.5f accuracy=%.4f", epoch, lr, record["loss"], record["accuracy"])
    return model, log


def aggregate(model, embeddings, adj):
    """Both GCN layers in eval mode, rows re-normalized for cosine clustering."""
    if embeddings.dim != model.dim:
        raise ConfigError(f"model expects {model.dim}-dim features, got {embeddings.dim}")
    out = model.forward(embeddings.rows, adj.propagation(), EVAL)
    return normalize_rows(out)


# ---------- checkpoints ----------

def save_gcn(model, path):
    tensors = {
        f"config.{f.name}": np.asarray(getattr(model.config, f.name), dtype=np.float64)
        for f in dataclasses.fields(model.config)
    }
    tensors["meta.layers"] = np.asarray(len(model.layers), dtype=np.float64)
    tensors.update(model.named_params())
    save_checkpoint(tensors, path)


def load_gcn(path):
    tensors = load_checkpoint(path)
    try:
        values = {}
        for f in dataclasses.fields(GcnConfig):
            raw = tensors[f"config.{f.name}"]
            values[f.name] = int(raw) if f.type is int else float(raw)
        cfg = GcnConfig(**values)
        layers = []
        for l in range(int(tensors["meta.layers"])):
            w = tensors[f"layer{l}.W"]
            layer = GcnLayer(*w.shape)
            layer.W[...] = w
            layer.W_skip[...] = tensors[f"layer{l}.W_skip"]
            layers.append(layer)
        head = ArcFaceHead(tensors["head.weight"].copy(), cfg.s, cfg.m)
    except KeyError as e:
        raise ConfigError(f"{path}: checkpoint is missing {e}") from None
    return GcnModel(layers, head, cfg)
