# linkcluster/services/evaluation_service.py
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from linkcluster.core.graph import DROP_PRECISION, DROP_RECALL, build_knn, check_labels, corrupt_subgraphs, label_graph, subgraph_quality
from linkcluster.services.cluster_service import ClusterAssignment, count_singletons, threshold_baseline

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FScoreReport:
    precision: float
    recall: float
    f: float
    degenerate: bool = False

    @classmethod
    def from_pr(cls, precision, recall, degenerate=False):
        total = precision + recall
        return cls(precision, recall, 2 * precision * recall / total if total > 0 else 0.0, degenerate)


def _as_labels(x):
    return x.labels if isinstance(x, ClusterAssignment) else np.asarray(x)


def _frame(pred, gt):
    pred = check_labels(_as_labels(pred))
    gt = check_labels(_as_labels(gt), pred.shape[0])
    return pd.DataFrame({"pred": pred, "gt": gt})


def _pairs(counts):
    counts = counts.to_numpy(dtype=np.int64)
    return int((counts * (counts - 1) // 2).sum())


def pairwise_f(pred, gt):
    """
    Precision/recall over unordered same-cluster pairs, from contingency cell
    counts instead of enumerating pairs.
    """
    df = _frame(pred, gt)
    together = _pairs(df.groupby(["pred", "gt"]).size())
    pred_pairs = _pairs(df.groupby("pred").size())
    gt_pairs = _pairs(df.groupby("gt").size())
    degenerate = pred_pairs == 0 or gt_pairs == 0
    if degenerate:
        logger.warning("pairwise F undefined: pred_pairs=%d gt_pairs=%d, reporting 0", pred_pairs, gt_pairs)
    return FScoreReport.from_pr(
        together / pred_pairs if pred_pairs else 0.0,
        together / gt_pairs if gt_pairs else 0.0,
        degenerate,
    )


def bcubed_f(pred, gt):
    """Per-node precision/recall of the node's cluster against its label, averaged."""
    df = _frame(pred, gt)
    if df.empty:
        return FScoreReport(0.0, 0.0, 0.0, True)
    cell = df.groupby(["pred", "gt"])["pred"].transform("size")
    cluster = df.groupby("pred")["pred"].transform("size")
    label = df.groupby("gt")["gt"].transform("size")
    return FScoreReport.from_pr(float((cell / cluster).mean()), float((cell / label).mean()))


def format_report(reports, extra=None):
    """key=value lines, e.g. pairwise.f=0.9455."""
    lines = []
    for prefix, report in reports.items():
        lines += [
            f"{prefix}.precision={report.precision:.6f}",
            f"{prefix}.recall={report.recall:.6f}",
            f"{prefix}.f={report.f:.6f}",
        ]
        if report.degenerate:
            lines.append(f"{prefix}.degenerate=true")
    for key, value in (extra or {}).items():
        lines.append(f"{key}={value}")
    return "\n".join(lines)


def quality_sweep(embeddings, knn, gt, levels, tau=0.0, k=None, seed=None):
    """
    Precision/recall sensitivity study on ground-truth subgraphs.

    For every level, one graph keeps recall at 1.0 and degrades precision to
    the level, another keeps precision at 1.0 and degrades recall; each is
    clustered with the threshold baseline at `tau`.
    """
    gt = check_labels(gt, embeddings.count)
    if knn is None:
        knn = build_knn(embeddings, k)
    base = label_graph(knn, gt)
    rows = []
    for mode, sweep in ((DROP_PRECISION, "precision"), (DROP_RECALL, "recall")):
        for level in levels:
            graph = corrupt_subgraphs(base, gt, mode, level, seed=seed, cutoff=tau)
            sub_p, sub_r = subgraph_quality(graph, gt, tau)
            clusters = threshold_baseline(graph, tau)
            fp = pairwise_f(clusters, gt)
            fb = bcubed_f(clusters, gt)
            rows.append({
                "sweep": sweep,
                "level": level,
                "subgraph_precision": sub_p,
                "subgraph_recall": sub_r,
                "pairwise_precision": fp.precision,
                "pairwise_recall": fp.recall,
                "pairwise_f": fp.f,
                "bcubed_f": fb.f,
                "clusters": clusters.n_clusters,
                "singletons": count_singletons(clusters),
            })
            logger.info(
                "sweep=%s level=%.2f subgraph_p=%.4f subgraph_r=%.4f pairwise_f=%.4f singletons=%d",
                sweep, level, sub_p, sub_r, fp.f, rows[-1]["singletons"],
            )
    return pd.DataFrame(rows)
