import numpy as np
import pytest

from linkcluster.core.graph import KnnGraph, normalize_rows
from linkcluster.core.presets import DpcConfig, GcnConfig, LinkerConfig
from linkcluster.services.synth_service import SynthSpec, synth_generate


@pytest.fixture
def blobs():
    """Eight well separated identities, 6-10 samples each."""
    return synth_generate(SynthSpec(n_classes=8, sizes=(6, 10), dim=16, noise=0.15, seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_embeddings(rng):
    return normalize_rows(rng.standard_normal((40, 8)))


@pytest.fixture
def small_linker():
    return LinkerConfig(
        t1=0.4, t2=0.0, k=6, k1=3, k2=2,
        fd_widths=(16, 8), nd_widths=(8, 4),
        lr=0.05, batch_size=32, eval_batch_size=256, epochs=2, dropout=0.0,
    )


@pytest.fixture
def small_gcn():
    return GcnConfig(
        k_train=6, k_test=6, t3_train=0.5, t3_test=0.5,
        lr=0.01, batch_size=32, eval_batch_size=64, epochs=2, dropout=0.0,
    )


@pytest.fixture
def small_dpc():
    return DpcConfig(k_density=6, sigma=0.1, max_connections=1, link_threshold=0.5)


@pytest.fixture
def path_knn():
    """
    Four nodes on a line, k=4, hand-picked similarities:
    0 and 1 are closest, 2 sits near 0 and 1, 3 hangs off 2.
    """
    ids = np.array([
        [0, 1, 2, 3],
        [1, 0, 2, 3],
        [2, 0, 1, 3],
        [3, 2, 1, 0],
    ])
    sims = np.array([
        [1.0, 0.9, 0.7, 0.1],
        [1.0, 0.9, 0.6, 0.2],
        [1.0, 0.7, 0.6, 0.3],
        [1.0, 0.3, 0.2, 0.1],
    ])
    return KnnGraph(ids, sims)
