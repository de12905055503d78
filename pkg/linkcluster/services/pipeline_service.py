# linkcluster/services/pipeline_service.py
"""
End-to-end orchestration: fit on a labelled train split, predict clusters on
a test split.

fit:     kNN -> train linker on every kNN pair -> adjust train graph ->
         threshold at t3 -> train GCN
predict: kNN -> adjust test graph -> threshold at t3 -> aggregate ->
         density peak clustering
"""
import logging
import os
from dataclasses import dataclass, field

import pandas as pd

from linkcluster.core.errors import ConfigError
from linkcluster.core.graph import build_knn
from linkcluster.core.io import save_clusters, save_features, save_graph
from linkcluster.services.cluster_service import cluster_features, count_singletons, threshold_baseline
from linkcluster.services.evaluation_service import bcubed_f, format_report, pairwise_f
from linkcluster.services.gcn_service import aggregate, build_adjacency, save_gcn, train_gcn
from linkcluster.services.linker_service import adjust_graph, save_linker, train_linker

logger = logging.getLogger(__name__)


@dataclass
class FittedPipeline:
    config: object
    gcn: object
    linker: object = None
    logs: dict = field(default_factory=dict)

    @property
    def uses_linker(self):
        return self.linker is not None


def subgraph_for_gcn(embeddings, cfg, k, linker=None, workers=None, knn=None):
    """
    Weighted kNN graph with k neighbors per node and the threshold to cut it at.

    With a linker, probabilities come from the linker's own k-NN and are cut
    at t3; without one, raw similarities are cut at t1. A wider `knn` of the
    same embeddings is truncated instead of rebuilt.
    """
    k_full = k if linker is None else linker.config.k
    if k > k_full:
        raise ConfigError(f"GCN k={k} exceeds the linker's k={k_full}")
    if knn is None:
        knn = build_knn(embeddings, k_full)
    elif knn.k != k_full:
        knn = knn.truncate(k_full)
    if linker is None:
        return knn.to_weighted(), cfg.linker.t1, None
    adjusted = adjust_graph(linker, embeddings, knn, workers=workers)
    return adjusted.head(k), None, adjusted


def fit_pipeline(embeddings, gt, cfg, use_linker=True, workers=None):
    cfg.validate()
    logs = {}
    linker = None
    knn = build_knn(embeddings, cfg.linker.k if use_linker else cfg.gcn.k_train)
    if use_linker:
        linker, logs["linker"] = train_linker(embeddings, knn, gt, cfg.linker, workers=workers)
    graph, threshold, _ = subgraph_for_gcn(embeddings, cfg, cfg.gcn.k_train, linker, workers, knn)
    adj = build_adjacency(graph, cfg.gcn.t3_train if threshold is None else threshold)
    gcn, logs["gcn"] = train_gcn(embeddings, adj, gt, cfg.gcn)
    return FittedPipeline(cfg, gcn, linker, logs)


@dataclass
class Prediction:
    clusters: object
    aggregated: object
    adjusted: object = None
    baseline: object = None


def predict_pipeline(fitted, embeddings, workers=None):
    cfg = fitted.config
    k_full = max(cfg.gcn.k_test, fitted.linker.config.k) if fitted.uses_linker else cfg.gcn.k_test
    knn = build_knn(embeddings, k_full)
    graph, threshold, adjusted = subgraph_for_gcn(embeddings, cfg, cfg.gcn.k_test, fitted.linker, workers, knn)
    adj = build_adjacency(graph, cfg.gcn.t3_test if threshold is None else threshold)
    aggregated = aggregate(fitted.gcn, embeddings, adj)
    clusters = cluster_features(aggregated, cfg.dpc, cfg.link_threshold)
    baseline = threshold_baseline(knn.truncate(cfg.gcn.k_test).to_weighted(), cfg.linker.t1)
    return Prediction(clusters, aggregated, adjusted, baseline)


def run_all(train, test, cfg, out_dir, use_linker=True, workers=None):
    """
    Fit on `train` = (embeddings, labels), predict on `test` = (embeddings,
    labels or None) and write every artifact under out_dir. Returns a dict of
    scores (empty when test labels are absent).
    """
    os.makedirs(out_dir, exist_ok=True)
    fitted = fit_pipeline(train[0], train[1], cfg, use_linker, workers)
    if fitted.linker is not None:
        save_linker(fitted.linker, os.path.join(out_dir, "linker.ckpt"))
    save_gcn(fitted.gcn, os.path.join(out_dir, "gcn.ckpt"))
    for stage, log in fitted.logs.items():
        pd.DataFrame(log).to_json(os.path.join(out_dir, f"{stage}_log.jsonl"), orient="records", lines=True)

    pred = predict_pipeline(fitted, test[0], workers)
    if pred.adjusted is not None:
        save_graph(pred.adjusted, os.path.join(out_dir, "adjusted.npz"))
    save_features(pred.aggregated, os.path.join(out_dir, "aggregated.bin"))
    save_clusters(pred.clusters.labels, os.path.join(out_dir, "clusters.txt"))
    save_clusters(pred.baseline.labels, os.path.join(out_dir, "baseline_clusters.txt"))

    scores = {}
    if test[1] is not None:
        fp, fb = pairwise_f(pred.clusters, test[1]), bcubed_f(pred.clusters, test[1])
        base_fp = pairwise_f(pred.baseline, test[1])
        scores = {"pairwise": fp, "bcubed": fb, "baseline_pairwise": base_fp}
        text = format_report(scores, {
            "clusters": pred.clusters.n_clusters,
            "singletons": count_singletons(pred.clusters),
            "linker": "on" if use_linker else "off",
        })
        with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as f:
            f.write(text + "\n")
        logger.info("run-all pairwise_f=%.4f bcubed_f=%.4f baseline_pairwise_f=%.4f", fp.f, fb.f, base_fp.f)
    return scores
