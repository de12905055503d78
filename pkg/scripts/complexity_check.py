#!/usr/bin/env python
# scripts/complexity_check.py
#
# Graph adjustment should scale linearly in N at fixed k: time it at three
# sizes and compare each doubling.

import os
import sys
import time
import logging

import click

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from linkcluster.core.graph import build_knn
from linkcluster.core.presets import load_preset
from linkcluster.services.linker_service import adjust_graph, build_model
from linkcluster.services.synth_service import SynthSpec, synth_generate

MAX_RATIO = 2.5


def time_adjust(n_classes, cfg, dim, repeats):
    embeddings, _ = synth_generate(SynthSpec(n_classes, (20, 20), dim, 0.3, cfg.seed))
    knn = build_knn(embeddings, cfg.k)
    model = build_model(cfg, dim)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        adjust_graph(model, embeddings, knn)
        best = min(best, time.perf_counter() - start)
    logger.info("nodes=%d k=%d adjust_seconds=%.3f", embeddings.count, cfg.k, best)
    return embeddings.count, best


@click.command()
@click.option("--base-classes", default=50, show_default=True, help="Smallest run has 20 nodes per class.")
@click.option("--dim", default=32, show_default=True)
@click.option("--repeats", default=3, show_default=True)
def main(base_classes, dim, repeats):
    cfg = load_preset("synth").linker
    runs = [time_adjust(base_classes * f, cfg, dim, repeats) for f in (1, 2, 4)]
    ok = True
    for (n0, t0), (n1, t1) in zip(runs, runs[1:]):
        ratio = t1 / t0
        click.echo(f"{n0} -> {n1}: x{ratio:.2f}")
        ok &= ratio <= MAX_RATIO
    logger.info("%s scaling within x%.1f per doubling", "PASS" if ok else "FAIL", MAX_RATIO)
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
