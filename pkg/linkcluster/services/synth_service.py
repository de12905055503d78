# linkcluster/services/synth_service.py
"""
Synthetic identity embeddings: class centers uniform on the unit sphere,
samples are normalize(center + noise * N(0, I)).
"""
import logging
from dataclasses import dataclass

import numpy as np

from linkcluster.core.errors import ConfigError
from linkcluster.core.graph import normalize_rows
from linkcluster.extensions import STREAM_SYNTH, make_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 150
    # (min, max) drawn uniformly per class, or one explicit count per class
    sizes: tuple = (10, 30)
    dim: int = 32
    noise: float = 0.2
    seed: int = 42
    explicit_sizes: bool = False

    def class_sizes(self, rng):
        if self.explicit_sizes:
            sizes = np.asarray(self.sizes, dtype=np.int64)
            if sizes.shape[0] != self.n_classes:
                raise ConfigError(f"{sizes.shape[0]} sizes given for {self.n_classes} classes")
        else:
            low, high = self.sizes
            if low > high:
                raise ConfigError(f"size range ({low}, {high}) is empty")
            sizes = rng.integers(low, high + 1, size=self.n_classes)
        if sizes.size and sizes.min() < 1:
            raise ConfigError("every class needs at least one sample")
        return sizes

    def validate(self):
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        return self


def synth_generate(spec):
    """Return (EmbeddingSet, labels); node order is a seeded shuffle of the classes."""
    spec.validate()
    rng = make_rng(spec.seed, STREAM_SYNTH)
    sizes = spec.class_sizes(rng)
    centers = normalize_rows(rng.standard_normal((spec.n_classes, spec.dim))).rows
    labels = np.repeat(np.arange(spec.n_classes, dtype=np.int64), sizes)
    samples = centers[labels] + spec.noise * rng.standard_normal((labels.shape[0], spec.dim))
    order = rng.permutation(labels.shape[0])
    logger.info(
        "synthetic set classes=%d nodes=%d dim=%d noise=%.3f seed=%d",
        spec.n_classes, labels.shape[0], spec.dim, spec.noise, spec.seed,
    )
    return normalize_rows(samples[order]), labels[order]


def synth_split(spec):
    """Train and test sets with disjoint identities (test uses seed + 1)."""
    train = synth_generate(spec)
    test = synth_generate(SynthSpec(spec.n_classes, spec.sizes, spec.dim, spec.noise, spec.seed + 1, spec.explicit_sizes))
    return train, test
