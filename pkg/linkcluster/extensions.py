# linkcluster/extensions.py
import logging

import numpy as np

from config import Config

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(level=None):
    """
    Configure root logging once for CLI and scripts.
    Later calls only adjust the level.
    """
    level = (level or Config.LOG_LEVEL).upper()
    root = logging.getLogger()
    if root.handlers:
        root.setLevel(level)
        return
    logging.basicConfig(level=level, format=LOG_FORMAT)


def make_rng(seed=None, stream=0):
    """
    Seeded generator for one RNG consumer.

    Each consumer (synthetic data, pair shuffling, init, dropout, corruption)
    asks for its own stream so adding draws in one stage never shifts another.
    """
    seed = Config.SEED if seed is None else seed
    return np.random.default_rng([seed, stream])


# Stream ids handed to make_rng; keep stable, checkpoints depend on them
STREAM_SYNTH = 0
STREAM_LINKER_INIT = 1
STREAM_LINKER_SHUFFLE = 2
STREAM_GCN_INIT = 3
STREAM_GCN_SHUFFLE = 4
STREAM_CORRUPT = 5
STREAM_DROPOUT = 6
