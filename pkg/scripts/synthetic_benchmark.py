#!/usr/bin/env python
# scripts/synthetic_benchmark.py
#
# Desk-scale benchmark on generated identities:
#   1. linker vs. raw-similarity threshold on held-out kNN pairs
#   2. ablation ordering ab1 <= ab2 <= full on held-out pair accuracy
#   3. run-all F_P vs. threshold baseline and vs. GCN on raw subgraphs

import os
import sys
import tempfile
import time
import logging

import click
import pandas as pd

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

# Import project modules from the repository root
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from linkcluster.core.graph import build_knn
from linkcluster.core.presets import load_preset
from linkcluster.services.linker_service import best_threshold_baseline, pair_report, train_linker
from linkcluster.services.pipeline_service import run_all
from linkcluster.services.synth_service import SynthSpec, synth_split

SLACK = 0.005


def pair_benchmark(train, test, cfg, workers):
    """Held-out pair metrics for the threshold baseline and every linker variant."""
    train_knn = build_knn(train[0], cfg.linker.k, workers=workers)
    test_knn = build_knn(test[0], cfg.linker.k, workers=workers)

    baseline = best_threshold_baseline(test_knn, test[1])
    rows = [{"model": f"threshold({baseline.cutoff:.2f})", "accuracy": baseline.accuracy,
             "precision": baseline.precision, "recall": baseline.recall}]

    for variant in ("ab1", "ab2", "full"):
        cfg.linker.variant = variant
        start = time.time()
        model, _ = train_linker(train[0], train_knn, train[1], cfg.linker, workers=workers)
        report = pair_report(model, test[0], test_knn, test[1], cfg.linker.cutoff, workers)
        logger.info("variant=%s trained in %.1fs accuracy=%.4f", variant, time.time() - start, report.accuracy)
        rows.append({"model": variant, "accuracy": report.accuracy,
                     "precision": report.precision, "recall": report.recall})
    cfg.linker.variant = "full"
    return baseline, pd.DataFrame(rows).set_index("model")


def pipeline_benchmark(train, test, cfg, workers):
    """F_P of the full pipeline, the skip-linker pipeline and the threshold baseline."""
    with tempfile.TemporaryDirectory() as tmp:
        full = run_all(train, test, cfg, os.path.join(tmp, "full"), use_linker=True, workers=workers)
        raw = run_all(train, test, cfg, os.path.join(tmp, "raw"), use_linker=False, workers=workers)
    return pd.Series({
        "threshold": full["baseline_pairwise"].f,
        "gcn_raw": raw["pairwise"].f,
        "linker_gcn": full["pairwise"].f,
    })


def check(name, ok):
    logger.info("%s %s", "PASS" if ok else "FAIL", name)
    return ok


@click.command()
@click.option("--classes", default=150, show_default=True)
@click.option("--noise", default=0.35, show_default=True, help="Tune so the baseline recall is <= 0.90.")
@click.option("--dim", default=32, show_default=True)
@click.option("--seed", default=42, show_default=True)
@click.option("--workers", default=1, show_default=True)
@click.option("--skip-pipeline", is_flag=True, help="Only run the pair benchmark.")
def main(classes, noise, dim, seed, workers, skip_pipeline):
    cfg = load_preset("synth").with_seed(seed)
    train, test = synth_split(SynthSpec(classes, (10, 30), dim, noise, seed))
    logger.info("train nodes=%d test nodes=%d", train[0].count, test[0].count)

    # ---------- Pair metrics ----------
    baseline, pairs = pair_benchmark(train, test, cfg, workers)
    click.echo(pairs.to_string(float_format=lambda v: f"{v:.4f}"))
    if baseline.recall > 0.90:
        logger.warning("baseline recall %.4f is above 0.90; raise --noise", baseline.recall)

    ok = check("linker recall >= baseline + 0.05", pairs.loc["full", "recall"] >= baseline.recall + 0.05)
    ok &= check("linker precision >= baseline - 0.01", pairs.loc["full", "precision"] >= baseline.precision - 0.01)
    acc = pairs["accuracy"]
    ok &= check("ab1 <= ab2 <= full", acc["ab1"] <= acc["ab2"] + SLACK and acc["ab2"] <= acc["full"] + SLACK)

    # ---------- End to end ----------
    if not skip_pipeline:
        scores = pipeline_benchmark(train, test, cfg, workers)
        click.echo(scores.to_string(float_format=lambda v: f"{v:.4f}"))
        ok &= check("linker_gcn >= threshold + 0.03", scores["linker_gcn"] >= scores["threshold"] + 0.03)
        ok &= check("linker_gcn >= gcn_raw + 0.01", scores["linker_gcn"] >= scores["gcn_raw"] + 0.01)

    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
