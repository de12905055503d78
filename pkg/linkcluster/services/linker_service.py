# linkcluster/services/linker_service.py
"""
Linkage predictor: a feature branch over enhanced pair features, a
neighborhood branch over enclosed-subgraph structure, and a linear fusion
head producing a 2-class softmax. Trained with SGD on kNN pairs; at
inference it rewrites kNN similarities with linkage probabilities.
"""
import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from config import Config
from linkcluster.core.errors import ConfigError, FeatureError
from linkcluster.core.graph import check_labels
from linkcluster.core.io import load_checkpoint, save_checkpoint
from linkcluster.core.nn import (
    EVAL, TRAIN, LayerSpec, Linear, MlpStack, OptimizerState, linker_schedule, sgd_step, softmax, softmax_ce,
)
from linkcluster.core.presets import VARIANTS, LinkerConfig
from linkcluster.extensions import STREAM_DROPOUT, STREAM_LINKER_INIT, STREAM_LINKER_SHUFFLE, make_rng
from linkcluster.services.pair_features import (
    PairBatch, PairSample, enhance_embeddings, enhanced_pairs, generate_pairs, structural_pairs,
)

logger = logging.getLogger(__name__)


@dataclass
class LinkerModel:
    fd: MlpStack
    nd: MlpStack
    fusion: MlpStack
    config: LinkerConfig
    dim: int

    @property
    def uses_structure(self):
        return self.nd is not None

    def named_params(self):
        out = {f"fd.{k}": v for k, v in self.fd.named_params().items()}
        if self.nd is not None:
            out.update({f"nd.{k}": v for k, v in self.nd.named_params().items()})
        out.update({f"fusion.{k}": v for k, v in self.fusion.named_params().items()})
        return out

    def named_grads(self):
        out = {f"fd.{k}": v for k, v in self.fd.named_grads().items()}
        if self.nd is not None:
            out.update({f"nd.{k}": v for k, v in self.nd.named_grads().items()})
        out.update({f"fusion.{k}": v for k, v in self.fusion.named_grads().items()})
        return out

    def forward(self, fd_x, nd_x, mode=EVAL, rng=None):
        h = self.fd.forward(fd_x, mode, rng)
        if self.nd is not None:
            h = np.hstack([h, self.nd.forward(nd_x, mode, rng)])
        return self.fusion.forward(h, mode, rng)

    def backward(self, grad):
        grad_h = self.fusion.backward(grad)
        width = self.fd.out_width
        self.fd.backward(grad_h[:, :width])
        if self.nd is not None:
            self.nd.backward(grad_h[:, width:])


@dataclass
class PairFeatureTable:
    pairs: PairBatch
    fd_inputs: np.ndarray
    nd_inputs: np.ndarray = None

    def __len__(self):
        return len(self.pairs)


@dataclass(frozen=True)
class PairReport:
    accuracy: float
    precision: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int
    cutoff: float

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


def build_model(cfg, dim, rng=None, zero=False):
    """Fresh model for `cfg`; zero=True zeroes every linear weight (all pairs predict 0.5)."""
    cfg.validate()
    rng = rng if rng is not None else make_rng(cfg.seed, STREAM_LINKER_INIT)
    fd_in = 2 * dim if cfg.variant == "ab1" else 4 * dim
    fd = MlpStack.lbr(fd_in, cfg.fd_widths, rng, dropout=cfg.dropout)
    nd = None
    if cfg.variant in ("full", "ab3"):
        nd = MlpStack.lbr(cfg.structural_width, cfg.nd_widths, rng, dropout=cfg.dropout)
    fusion_in = fd.out_width + (nd.out_width if nd is not None else 0)
    fusion = MlpStack([Linear(fusion_in, 2, rng)])
    model = LinkerModel(fd, nd, fusion, dataclasses.replace(cfg), dim)
    if zero:
        for name, p in model.named_params().items():
            if name.endswith(".W"):
                p[...] = 0.0
    return model


def _check_inputs(model, embeddings, knn):
    cfg = model.config
    if embeddings.dim != model.dim:
        raise ConfigError(f"model expects {model.dim}-dim features, got {embeddings.dim}")
    if knn.count != embeddings.count:
        raise ConfigError(f"kNN has {knn.count} nodes, features {embeddings.count}")
    if model.uses_structure and cfg.k1 > knn.k:
        raise ConfigError(f"model k1={cfg.k1} exceeds kNN size {knn.k}")


def pair_feature_table(model, embeddings, knn, pairs, enhanced=None, workers=None):
    """Materialize branch inputs for every pair once; reused across epochs."""
    _check_inputs(model, embeddings, knn)
    cfg = model.config
    if cfg.variant == "ab1":
        fd_inputs = enhanced_pairs(embeddings, embeddings, pairs, original_only=True)
    else:
        enhanced = enhanced if enhanced is not None else enhance_embeddings(embeddings, knn, cfg.t1)
        fd_inputs = enhanced_pairs(embeddings, enhanced, pairs)
    nd_inputs = None
    if model.uses_structure:
        nd_inputs = structural_pairs(pairs, knn, cfg, order_only=cfg.variant == "ab3", workers=workers)
    return PairFeatureTable(pairs, fd_inputs, nd_inputs)


def predict_table(model, table, batch_size=None):
    """Linkage probability (softmax component 1) for every row, eval mode."""
    batch_size = batch_size or Config.INFERENCE_BATCH_SIZE
    out = np.empty(len(table))
    for lo in range(0, len(table), batch_size):
        hi = lo + batch_size
        nd = table.nd_inputs[lo:hi] if table.nd_inputs is not None else None
        out[lo:hi] = softmax(model.forward(table.fd_inputs[lo:hi], nd, EVAL))[:, 1]
    return out


def predict_linkage(model, embeddings, enhanced, knn, i, j):
    if j == i or j not in knn.ids[i]:
        raise FeatureError(f"node {j} is not a non-self neighbor of {i}")
    pairs = PairBatch.from_samples([PairSample(i, j)])
    table = pair_feature_table(model, embeddings, knn, pairs, enhanced, workers=1)
    return float(predict_table(model, table)[0])


def _pair_weights(labels, balance):
    if not balance:
        return None
    n = labels.shape[0]
    n_pos = max(int(labels.sum()), 1)
    n_neg = max(n - int(labels.sum()), 1)
    return np.where(labels == 1, n / (2.0 * n_pos), n / (2.0 * n_neg))


def train_batches(order, batch_size):
    """Mini-batches over order; a trailing single row joins the batch before it."""
    starts = list(range(0, len(order), batch_size))
    if len(starts) > 1 and len(order) - starts[-1] == 1:
        starts.pop()
    bounds = starts[1:] + [len(order)]
    return [order[lo:hi] for lo, hi in zip(starts, bounds)]


def margin_from_probs(probs, labels):
    return float(probs[labels == 1].sum() - probs[labels == 0].sum())


def train_linker(embeddings, knn, gt, cfg, workers=None):
    """
    Joint SGD training of both branches and the fusion head on every kNN pair.

    Returns (model, log) where log holds one record per epoch with lr, mean
    loss, pair accuracy and the margin objective, all measured in eval mode
    after the epoch.
    """
    cfg.validate()
    gt = check_labels(gt, embeddings.count)
    pairs = generate_pairs(knn, gt)
    labels = pairs.labels
    if np.unique(gt).size < 2 or (len(pairs) and labels.min() == labels.max()):
        logger.warning("degenerate training labels: every pair has the same label, training proceeds")

    model = build_model(cfg, embeddings.dim, make_rng(cfg.seed, STREAM_LINKER_INIT))
    log = []
    if cfg.epochs == 0 or len(pairs) == 0:
        return model, log
    if len(pairs) < 2:
        logger.warning("only one training pair, batch statistics need two: model left untrained")
        return model, log

    table = pair_feature_table(model, embeddings, knn, pairs, workers=workers)
    weights = _pair_weights(labels, cfg.balance_pairs)
    opt = OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay, linker_schedule(cfg.lr))
    shuffle_rng = make_rng(cfg.seed, STREAM_LINKER_SHUFFLE)
    dropout_rng = make_rng(cfg.seed, STREAM_DROPOUT)
    logger.info("training linker pairs=%d positives=%d variant=%s", len(pairs), int(labels.sum()), cfg.variant)

    for epoch in range(cfg.epochs):
        lr = opt.begin_epoch(epoch)
        order = shuffle_rng.permutation(len(pairs))
        total, seen = 0.0, 0
        for idx in train_batches(order, cfg.batch_size):
            nd = table.nd_inputs[idx] if table.nd_inputs is not None else None
            logits = model.forward(table.fd_inputs[idx], nd, TRAIN, dropout_rng)
            loss, grad, _ = softmax_ce(logits, labels[idx], None if weights is None else weights[idx])
            model.backward(grad)
            sgd_step(opt, model.named_params(), model.named_grads())
            total += loss * idx.size
            seen += idx.size

        probs = predict_table(model, table, cfg.eval_batch_size)
        record = {
            "epoch": epoch,
            "lr": lr,
            "loss": total / max(seen, 1),
            "accuracy": float(((probs >= 0.5) == (labels == 1)).mean()),
            "margin": margin_from_probs(probs, labels),
        }
        log.append(record)
        logger.info(
            "epoch=%d lr=%g loss=%.5f accuracy=%.4f margin=%.2f",
            epoch, lr, record["loss"], record["accuracy"], record["margin"],
        )
    return model, log


def adjust_graph(model, embeddings, knn, workers=None, batch_size=None):
    """Same topology as knn; self edges keep 1.0, every other weight becomes P(linkage)."""
    pairs = generate_pairs(knn)
    table = pair_feature_table(model, embeddings, knn, pairs, workers=workers)
    weights = np.ones(knn.ids.shape)
    if knn.k > 1:
        weights[:, 1:] = predict_table(model, table, batch_size).reshape(knn.count, knn.k - 1)
    logger.info("adjusted graph nodes=%d k=%d", knn.count, knn.k)
    return knn.to_weighted(weights)


def pair_report_from_scores(scores, labels, cutoff):
    """Binary metrics where score >= cutoff predicts a same-identity pair."""
    predicted = np.asarray(scores) >= cutoff
    actual = np.asarray(labels) == 1
    tp = int((predicted & actual).sum())
    fp = int((predicted & ~actual).sum())
    fn = int((~predicted & actual).sum())
    tn = int((~predicted & ~actual).sum())
    total = tp + fp + fn + tn
    return PairReport(
        accuracy=(tp + tn) / total if total else 0.0,
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        tp=tp, fp=fp, tn=tn, fn=fn, cutoff=cutoff,
    )


def pair_report(model, embeddings, knn, gt, cutoff=0.5, workers=None):
    if not 0.0 < cutoff < 1.0:
        raise ConfigError(f"cutoff must be in (0, 1), got {cutoff}")
    pairs = generate_pairs(knn, gt)
    probs = predict_table(model, pair_feature_table(model, embeddings, knn, pairs, workers=workers))
    return pair_report_from_scores(probs, pairs.labels, cutoff)


def best_threshold_baseline(knn, gt, cutoffs=None):
    """Raw-similarity comparator: the cutoff with the best pair F1."""
    pairs = generate_pairs(knn, gt)
    scores = knn.sims[:, 1:].reshape(-1)
    cutoffs = np.round(np.arange(-0.5, 1.0, 0.05), 2) if cutoffs is None else cutoffs
    reports = [pair_report_from_scores(scores, pairs.labels, float(c)) for c in cutoffs]
    return max(reports, key=lambda r: (r.f1, -r.cutoff))


def margin_objective(model, embeddings, knn, gt, workers=None):
    """Sum of P over same-identity pairs minus sum of P over the rest."""
    pairs = generate_pairs(knn, gt)
    probs = predict_table(model, pair_feature_table(model, embeddings, knn, pairs, workers=workers))
    return margin_from_probs(probs, pairs.labels)


# ---------- checkpoints ----------

def _encode_config(cfg):
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "variant":
            value = VARIANTS.index(value)
        out[f"config.{f.name}"] = np.asarray(value, dtype=np.float64)
    return out


def _decode_config(tensors):
    values = {}
    for f in dataclasses.fields(LinkerConfig):
        raw = tensors[f"config.{f.name}"]
        if f.name == "variant":
            values[f.name] = VARIANTS[int(raw)]
        elif f.type is tuple:
            values[f.name] = tuple(int(v) for v in raw)
        elif f.type is bool:
            values[f.name] = bool(raw)
        elif f.type is int:
            values[f.name] = int(raw)
        else:
            values[f.name] = float(raw)
    return LinkerConfig(**values)


def _encode_arch(stack):
    return np.stack([s.encode() for s in stack.specs()])


def save_linker(model, path):
    tensors = {"meta.dim": np.asarray(model.dim, dtype=np.float64), **_encode_config(model.config)}
    for name in ("fd", "nd", "fusion"):
        stack = getattr(model, name)
        if stack is None:
            continue
        tensors[f"arch.{name}"] = _encode_arch(stack)
        tensors.update({f"{name}.{k}": v for k, v in stack.named_params().items()})
        tensors.update({f"{name}.{k}": v for k, v in stack.named_buffers().items()})
    save_checkpoint(tensors, path)


def load_linker(path):
    tensors = load_checkpoint(path)
    try:
        cfg = _decode_config(tensors)
        stacks = {}
        for name in ("fd", "nd", "fusion"):
            if f"arch.{name}" not in tensors:
                stacks[name] = None
                continue
            stack = MlpStack.from_specs([LayerSpec.decode(row) for row in tensors[f"arch.{name}"]])
            prefix = f"{name}."
            stack.load_state({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
            stacks[name] = stack
    except KeyError as e:
        raise ConfigError(f"{path}: checkpoint is missing {e}") from None
    return LinkerModel(stacks["fd"], stacks["nd"], stacks["fusion"], cfg, int(tensors["meta.dim"]))
