# linkcluster/cli.py
"""
Command line entry point.

Every subcommand reads and writes files whose paths come from flags, so the
stages can run one at a time or all at once through `run-all`.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
import logging
import os

import click
import pandas as pd
from colorama import Fore, Style, just_fix_windows_console

from config import Config
from linkcluster.core.errors import LinkClusterError
from linkcluster.core.graph import build_knn, subgraph_quality
from linkcluster.core.io import (
    load_clusters, load_features, load_graph, load_knn, load_labels,
    save_clusters, save_features, save_graph, save_knn, save_labels,
)
from linkcluster.core.presets import apply_overrides, dump_config, load_config_file, load_preset, PRESETS
from linkcluster.extensions import configure_logging
from linkcluster.services.cluster_service import cluster_features, count_singletons
from linkcluster.services.evaluation_service import bcubed_f, format_report, pairwise_f, quality_sweep
from linkcluster.services.gcn_service import aggregate, build_adjacency, load_gcn, save_gcn, train_gcn
from linkcluster.services.linker_service import (
    adjust_graph, best_threshold_baseline, load_linker, pair_report, save_linker, train_linker,
)
from linkcluster.services.pipeline_service import run_all
from linkcluster.services.synth_service import SynthSpec, synth_generate, synth_split

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

IN_FILE = click.Path(exists=True, dir_okay=False)


def _write_log(log, path):
    if path:
        pd.DataFrame(log).to_json(path, orient="records", lines=True)


def _parse_set(values):
    pairs = []
    for item in values:
        key, sep, value = item.partition("=")
        if not sep:
            raise click.BadParameter(f"expected key=value, got {item!r}", param_hint="--set")
        pairs.append((key.strip(), value.strip()))
    return pairs


@click.group()
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None,
              help="Parameter preset (default from LINKCLUSTER_PRESET).")
@click.option("--config", "config_path", type=IN_FILE, default=None, help="Flat section.key=value file.")
@click.option("--seed", type=int, default=None, help="Global seed for every RNG consumer.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override one config key.")
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Worker processes.")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR.")
@click.pass_context
def cli(ctx, preset, config_path, seed, overrides, workers, log_level):
    """Embedding clustering with learned linkage, GCN aggregation and density peak linking."""
    configure_logging(log_level)
    # preset < config file < flags
    cfg = load_preset(preset or Config.DEFAULT_PRESET).with_seed(Config.SEED)
    if config_path:
        cfg = load_config_file(config_path, base=cfg)
    if seed is not None:
        cfg.with_seed(seed)
    apply_overrides(cfg, _parse_set(overrides), "--set")
    cfg.validate()
    ctx.obj = {
        "config": cfg,
        "seed": cfg.linker.seed,
        "workers": workers or Config.WORKERS,
    }
    logger.debug("effective config\n%s", dump_config(cfg))


@cli.command("show-config")
@click.pass_obj
def show_config(obj):
    """Print the effective configuration as a loadable config file."""
    click.echo(dump_config(obj["config"]), nl=False)


@cli.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--classes", type=click.IntRange(min=1), default=150)
@click.option("--min-size", type=click.IntRange(min=1), default=10)
@click.option("--max-size", type=click.IntRange(min=1), default=30)
@click.option("--dim", type=int, default=32)
@click.option("--noise", type=float, default=0.2)
@click.option("--split/--no-split", default=True, help="Also write a test split with disjoint identities.")
@click.pass_obj
def synth(obj, out_dir, classes, min_size, max_size, dim, noise, split):
    """Generate labelled synthetic embeddings."""
    spec = SynthSpec(classes, (min_size, max_size), dim, noise, obj["seed"])
    os.makedirs(out_dir, exist_ok=True)
    sets = synth_split(spec) if split else (synth_generate(spec),)
    for name, (embeddings, labels) in zip(("train", "test"), sets):
        save_features(embeddings, os.path.join(out_dir, f"{name}.bin"))
        save_labels(labels, os.path.join(out_dir, f"{name}_labels.txt"))
        click.echo(f"{name}.count={embeddings.count}")


@cli.command()
@click.option("--features", required=True, type=IN_FILE)
@click.option("--k", type=click.IntRange(min=1), default=None, help="Neighbors per node (default linker.k).")
@click.option("--block-size", type=click.IntRange(min=1), default=None)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.pass_obj
def knn(obj, features, k, block_size, out):
    """Exact cosine kNN graph, self at rank 0."""
    embeddings = load_features(features)
    graph = build_knn(embeddings, k or obj["config"].linker.k, block_size, obj["workers"])
    save_knn(graph, out)
    click.echo(f"knn.count={graph.count}\nknn.k={graph.k}")


@cli.command("train-nasa")
@click.option("--features", required=True, type=IN_FILE)
@click.option("--labels", required=True, type=IN_FILE)
@click.option("--knn", "knn_path", type=IN_FILE, default=None, help="Reuse a saved kNN graph.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None, help="JSON lines epoch log.")
@click.pass_obj
def train_linker_cmd(obj, features, labels, knn_path, out, log_path):
    """Train the linkage predictor on every kNN pair."""
    cfg = obj["config"].linker
    embeddings = load_features(features)
    gt = load_labels(labels, embeddings.count)
    graph = load_knn(knn_path) if knn_path else build_knn(embeddings, cfg.k, workers=obj["workers"])
    model, log = train_linker(embeddings, graph, gt, cfg, workers=obj["workers"])
    save_linker(model, out)
    _write_log(log, log_path)
    if log:
        click.echo("\n".join(f"final.{key}={value}" for key, value in log[-1].items()))


@cli.command()
@click.option("--model", "model_path", required=True, type=IN_FILE)
@click.option("--features", required=True, type=IN_FILE)
@click.option("--labels", type=IN_FILE, default=None, help="Report pair metrics against these labels.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.pass_obj
def adjust(obj, model_path, features, labels, out):
    """Replace kNN similarities with predicted linkage probabilities."""
    model = load_linker(model_path)
    embeddings = load_features(features)
    graph = build_knn(embeddings, model.config.k, workers=obj["workers"])
    adjusted = adjust_graph(model, embeddings, graph, workers=obj["workers"])
    save_graph(adjusted, out)
    click.echo(f"adjusted.edges={adjusted.edge_count}")
    if labels:
        gt = load_labels(labels, embeddings.count)
        report = pair_report(model, embeddings, graph, gt, model.config.cutoff, obj["workers"])
        baseline = best_threshold_baseline(graph, gt)
        precision, recall = subgraph_quality(adjusted, gt, model.config.cutoff)
        click.echo(
            f"pairs.accuracy={report.accuracy:.6f}\npairs.precision={report.precision:.6f}\n"
            f"pairs.recall={report.recall:.6f}\n"
            f"threshold.cutoff={baseline.cutoff:.2f}\nthreshold.precision={baseline.precision:.6f}\n"
            f"threshold.recall={baseline.recall:.6f}\n"
            f"subgraph.precision={precision:.6f}\nsubgraph.recall={recall:.6f}"
        )


def _gcn_adjacency(embeddings, graph_path, k, t3, fallback_t1, workers):
    """Adjusted graph cut at t3, or the raw kNN graph cut at t1 when no graph is given."""
    if graph_path:
        graph = load_graph(graph_path)
        if graph.count != embeddings.count:
            raise click.BadParameter(
                f"graph has {graph.count} nodes, features {embeddings.count}", param_hint="--graph"
            )
        return build_adjacency(graph.head(k), t3)
    return build_adjacency(build_knn(embeddings, k, workers=workers).to_weighted(), fallback_t1)


@cli.command("train-gcn")
@click.option("--features", required=True, type=IN_FILE)
@click.option("--labels", required=True, type=IN_FILE)
@click.option("--graph", "graph_path", type=IN_FILE, default=None,
              help="Adjusted graph; without it raw similarities are cut at linker.t1.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def train_gcn_cmd(obj, features, labels, graph_path, out, log_path):
    """Train the aggregation GCN with the ArcFace head."""
    cfg = obj["config"]
    embeddings = load_features(features)
    gt = load_labels(labels, embeddings.count)
    adj = _gcn_adjacency(embeddings, graph_path, cfg.gcn.k_train, cfg.gcn.t3_train, cfg.linker.t1, obj["workers"])
    model, log = train_gcn(embeddings, adj, gt, cfg.gcn)
    save_gcn(model, out)
    _write_log(log, log_path)
    if log:
        click.echo("\n".join(f"final.{key}={value}" for key, value in log[-1].items()))


@cli.command("aggregate")
@click.option("--model", "model_path", required=True, type=IN_FILE)
@click.option("--features", required=True, type=IN_FILE)
@click.option("--graph", "graph_path", type=IN_FILE, default=None)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.pass_obj
def aggregate_cmd(obj, model_path, features, graph_path, out):
    """Aggregate features with a trained GCN."""
    cfg = obj["config"]
    model = load_gcn(model_path)
    embeddings = load_features(features)
    adj = _gcn_adjacency(embeddings, graph_path, model.config.k_test, model.config.t3_test, cfg.linker.t1, obj["workers"])
    save_features(aggregate(model, embeddings, adj), out)


@cli.command()
@click.option("--features", required=True, type=IN_FILE)
@click.option("--method", type=click.Choice(["dpc", "threshold"]), default="dpc")
@click.option("--threshold", type=float, default=None, help="Link threshold (default from config).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.pass_obj
def cluster(obj, features, method, threshold, out):
    """Density peak linking (or plain thresholding) plus connected components."""
    cfg = obj["config"]
    embeddings = load_features(features)
    assignment = cluster_features(embeddings, cfg.dpc, cfg.link_threshold if threshold is None else threshold, method)
    save_clusters(assignment.labels, out)
    click.echo(f"clusters={assignment.n_clusters}\nsingletons={count_singletons(assignment)}")


@cli.command("eval")
@click.option("--pred", required=True, type=IN_FILE)
@click.option("--gt", required=True, type=IN_FILE)
def eval_cmd(pred, gt):
    """Pairwise and BCubed F-scores of a cluster file against labels."""
    pred_labels = load_clusters(pred)
    gt_labels = load_labels(gt, pred_labels.shape[0])
    reports = {"pairwise": pairwise_f(pred_labels, gt_labels), "bcubed": bcubed_f(pred_labels, gt_labels)}
    click.echo(format_report(reports))


@cli.command("sweep-fig2")
@click.option("--features", required=True, type=IN_FILE)
@click.option("--labels", required=True, type=IN_FILE)
@click.option("--levels", default="1.0,0.9,0.7,0.5", show_default=True)
@click.option("--k", type=click.IntRange(min=2), default=None, help="Candidate neighbors (default gcn.k_test).")
@click.option("--tau", type=float, default=0.0, show_default=True, help="Cutoff for kept edges.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="CSV file.")
@click.pass_obj
def sweep_cmd(obj, features, labels, levels, k, tau, out):
    """Cluster quality as subgraph precision or recall is degraded."""
    try:
        levels = [float(v) for v in levels.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"levels must be comma-separated numbers, got {levels!r}", param_hint="--levels")
    embeddings = load_features(features)
    gt = load_labels(labels, embeddings.count)
    k = k or obj["config"].gcn.k_test
    graph = build_knn(embeddings, k, workers=obj["workers"])
    table = quality_sweep(embeddings, graph, gt, levels, tau=tau, seed=obj["seed"])
    table.to_csv(out, index=False)
    click.echo(table.to_string(index=False))


@cli.command("run-all")
@click.option("--train-features", required=True, type=IN_FILE)
@click.option("--train-labels", required=True, type=IN_FILE)
@click.option("--test-features", required=True, type=IN_FILE)
@click.option("--test-labels", type=IN_FILE, default=None)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--skip-linker", is_flag=True, help="GCN on raw-similarity subgraphs, no linkage predictor.")
@click.pass_obj
def run_all_cmd(obj, train_features, train_labels, test_features, test_labels, out_dir, skip_linker):
    """Fit every stage on the train split, cluster the test split."""
    train = load_features(train_features)
    train = (train, load_labels(train_labels, train.count))
    test = load_features(test_features)
    test = (test, load_labels(test_labels, test.count) if test_labels else None)
    scores = run_all(train, test, obj["config"], out_dir, use_linker=not skip_linker, workers=obj["workers"])
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(dump_config(obj["config"]))
    if scores:
        click.echo(format_report(scores))
    click.echo(f"clusters_file={os.path.join(out_dir, 'clusters.txt')}")


def main(argv=None):
    """Run the CLI and return its exit code instead of exiting."""
    just_fix_windows_console()
    try:
        result = cli.main(args=argv, prog_name="linkcluster", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_USAGE
    except LinkClusterError as e:
        logger.error("%s", e)
        click.echo(f"{Fore.RED}error:{Style.RESET_ALL} {e}", err=True)
        return EXIT_RUNTIME
    except (OSError, ValueError) as e:
        logger.exception("unexpected failure")
        click.echo(f"{Fore.RED}error:{Style.RESET_ALL} {e}", err=True)
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception("internal error")
        click.echo(f"{Fore.RED}internal error:{Style.RESET_ALL} {type(e).__name__}: {e}", err=True)
        return EXIT_RUNTIME
    # --help and click's own exits come back as an int
    return result if isinstance(result, int) else EXIT_OK
