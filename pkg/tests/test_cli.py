import pytest

from linkcluster.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "data"
    code = main(["--seed", "3", "synth", "--out", str(out), "--classes", "4", "--min-size", "6",
                 "--max-size", "6", "--dim", "16", "--noise", "0.1"])
    assert code == EXIT_OK
    return out


def test_eval_identical_files(tmp_path, capsys):
    labels = tmp_path / "labels.txt"
    labels.write_text("0\n0\n1\n2\n2\n")
    assert main(["eval", "--pred", str(labels), "--gt", str(labels)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "pairwise.f=1.000000" in out
    assert "bcubed.f=1.000000" in out


def test_missing_file_is_usage_error(tmp_path):
    assert main(["eval", "--pred", str(tmp_path / "nope.txt"), "--gt", str(tmp_path / "nope.txt")]) == EXIT_USAGE


def test_unknown_preset_is_usage_error():
    assert main(["--preset", "imagenet", "show-config"]) == EXIT_USAGE


def test_bad_set_is_usage_or_runtime_error():
    assert main(["--set", "linker.k", "show-config"]) == EXIT_USAGE
    assert main(["--set", "linker.bogus=1", "show-config"]) == EXIT_RUNTIME


def test_show_config_uses_preset_and_overrides(capsys):
    assert main(["--preset", "ms1m", "--set", "gcn.k_test=20", "show-config"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert "preset=ms1m" in lines
    assert "linker.k=80" in lines
    assert "gcn.k_test=20" in lines


@pytest.mark.parametrize("name", ["synth", "knn", "train-nasa", "adjust", "train-gcn", "aggregate",
                                  "cluster", "eval", "sweep-fig2", "run-all"])
def test_subcommands_are_registered(name):
    assert main([name, "--help"]) == EXIT_OK


def test_internal_failure_is_runtime_error(tmp_path, monkeypatch):
    labels = tmp_path / "labels.txt"
    labels.write_text("0\n1\n")

    def broken(*args, **kwargs):
        raise RuntimeError("assignment invariant broken")

    monkeypatch.setattr("linkcluster.cli.pairwise_f", broken)
    assert main(["eval", "--pred", str(labels), "--gt", str(labels)]) == EXIT_RUNTIME


def test_label_length_mismatch_is_runtime_error(tmp_path):
    pred, gt = tmp_path / "pred.txt", tmp_path / "gt.txt"
    pred.write_text("0\n1\n1\n0\n")
    gt.write_text("0\n1\n1\n")
    assert main(["eval", "--pred", str(pred), "--gt", str(gt)]) == EXIT_RUNTIME


def test_synth_knn_cluster_eval_chain(synth_dir, tmp_path, capsys):
    features = str(synth_dir / "train.bin")
    assert (synth_dir / "test.bin").exists()
    assert main(["knn", "--features", features, "--k", "5", "--out", str(tmp_path / "knn.npz")]) == EXIT_OK
    clusters = str(tmp_path / "clusters.txt")
    assert main(["cluster", "--features", features, "--method", "threshold", "--threshold", "0.7",
                 "--out", clusters]) == EXIT_OK
    capsys.readouterr()
    assert main(["eval", "--pred", clusters, "--gt", str(synth_dir / "train_labels.txt")]) == EXIT_OK
    assert "pairwise.f=" in capsys.readouterr().out


def test_sweep_writes_csv(synth_dir, tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep-fig2", "--features", str(synth_dir / "train.bin"), "--labels",
                 str(synth_dir / "train_labels.txt"), "--levels", "1.0,0.8", "--k", "8", "--out", str(out)]) == EXIT_OK
    assert out.read_text().splitlines()[0].startswith("sweep,level,")
    assert main(["sweep-fig2", "--features", str(synth_dir / "train.bin"), "--labels",
                 str(synth_dir / "train_labels.txt"), "--levels", "high", "--out", str(out)]) == EXIT_USAGE


def _run_all(synth_dir, out):
    return main([
        "--seed", "3", "--set", "linker.epochs=1", "--set", "gcn.epochs=1", "run-all",
        "--train-features", str(synth_dir / "train.bin"), "--train-labels", str(synth_dir / "train_labels.txt"),
        "--test-features", str(synth_dir / "test.bin"), "--test-labels", str(synth_dir / "test_labels.txt"),
        "--out", str(out),
    ])


@pytest.mark.slow
def test_run_all_is_reproducible(synth_dir, tmp_path, capsys):
    assert _run_all(synth_dir, tmp_path / "a") == EXIT_OK
    assert "pairwise.f=" in capsys.readouterr().out
    assert _run_all(synth_dir, tmp_path / "b") == EXIT_OK
    assert (tmp_path / "a" / "clusters.txt").read_text() == (tmp_path / "b" / "clusters.txt").read_text()
    assert "preset=synth" in (tmp_path / "a" / "config.txt").read_text()
