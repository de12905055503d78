# linkcluster/core/presets.py
"""
Pipeline parameters, dataset presets and the flat `section.key=value` format.

Preset values follow the reference parameter settings for each benchmark;
`synth` is tuned for the desk-scale synthetic generator.
"""
import dataclasses
from dataclasses import dataclass, field

from linkcluster.core.errors import ConfigError

VARIANTS = ("full", "ab1", "ab2", "ab3")


@dataclass
class LinkerConfig:
    t1: float = 0.8
    t2: float = 0.0
    k: int = 80
    k1: int = 60
    k2: int = 10
    dist_max: float = 4.0
    sort_descending: bool = False
    variant: str = "full"
    fd_widths: tuple = (512, 512, 512, 512, 512, 256, 256, 40)
    nd_widths: tuple = (661, 64, 20)
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    eval_batch_size: int = 64
    epochs: int = 10
    dropout: float = 0.1
    balance_pairs: bool = False
    cutoff: float = 0.5
    seed: int = 42

    @property
    def structural_width(self):
        return 2 * (self.k1 + self.k1 * self.k2) + 2

    def validate(self):
        for name in ("t1", "t2"):
            value = getattr(self, name)
            if not -1.0 <= value <= 1.0:
                raise ConfigError(f"linker.{name} must be in [-1, 1], got {value}")
        if not 1 <= self.k1 <= self.k:
            raise ConfigError(f"linker.k1 must be in [1, k={self.k}], got {self.k1}")
        if self.k2 < 0:
            raise ConfigError(f"linker.k2 must be >= 0, got {self.k2}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"linker.variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 < self.cutoff < 1.0:
            raise ConfigError(f"linker.cutoff must be in (0, 1), got {self.cutoff}")
        if self.batch_size < 2:
            # batch norm needs two rows per batch
            raise ConfigError(f"linker.batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"linker.epochs must be >= 0, got {self.epochs}")
        if not self.fd_widths or not self.nd_widths:
            raise ConfigError("linker.fd_widths and linker.nd_widths must be non-empty")
        return self


@dataclass
class GcnConfig:
    k_train: int = 80
    k_test: int = 40
    t3_train: float = 0.8
    t3_test: float = 0.8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 512
    eval_batch_size: int = 256
    epochs: int = 20
    dropout: float = 0.1
    s: float = 40.0
    m: float = 0.25
    seed: int = 42

    def validate(self):
        if self.k_train < 1 or self.k_test < 1:
            raise ConfigError("gcn.k_train and gcn.k_test must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("gcn.batch_size must be >= 1 and gcn.epochs >= 0")
        if self.s <= 0:
            raise ConfigError(f"gcn.s must be positive, got {self.s}")
        return self


@dataclass
class DpcConfig:
    k_density: int = 90
    sigma: float = 0.1
    max_connections: int = 1
    # None resolves to gcn.t3_test
    link_threshold: float = None

    def validate(self):
        if self.k_density < 1 or self.max_connections < 1:
            raise ConfigError("dpc.k_density and dpc.max_connections must be >= 1")
        if self.sigma <= 0:
            raise ConfigError(f"dpc.sigma must be positive, got {self.sigma}")
        if self.link_threshold is not None and self.link_threshold <= 0:
            raise ConfigError(f"dpc.link_threshold must be positive, got {self.link_threshold}")
        return self


@dataclass
class PipelineConfig:
    preset: str = "synth"
    linker: LinkerConfig = field(default_factory=LinkerConfig)
    gcn: GcnConfig = field(default_factory=GcnConfig)
    dpc: DpcConfig = field(default_factory=DpcConfig)

    @property
    def link_threshold(self):
        return self.gcn.t3_test if self.dpc.link_threshold is None else self.dpc.link_threshold

    def with_seed(self, seed):
        self.linker.seed = seed
        self.gcn.seed = seed
        return self

    def validate(self):
        self.linker.validate()
        self.gcn.validate()
        self.dpc.validate()
        return self


def _ms1m():
    return PipelineConfig(
        "ms1m",
        LinkerConfig(),
        GcnConfig(),
        DpcConfig(k_density=90, sigma=0.1, max_connections=1),
    )


def _ijbb():
    # ND input width is 2*(k1 + k1*k2) + 2 = 1322
    return PipelineConfig(
        "ijbb",
        LinkerConfig(
            t1=0.7, t2=0.7, k=80, k1=60, k2=10, dist_max=4.0,
            fd_widths=(1024, 1024, 1024, 512, 256, 40), nd_widths=(300, 64, 20),
            batch_size=128, eval_batch_size=64, epochs=10, dropout=0.2,
        ),
        GcnConfig(
            k_train=80, k_test=80, t3_train=0.9, t3_test=0.8,
            batch_size=512, eval_batch_size=256, epochs=10, dropout=0.1, m=0.0,
        ),
        DpcConfig(k_density=80, sigma=0.1, max_connections=80),
    )


def _deepfashion():
    return PipelineConfig(
        "deepfashion",
        LinkerConfig(
            t1=0.925, t2=0.925, k=10, k1=5, k2=3, dist_max=4.0,
            fd_widths=(512, 512, 512, 256, 256, 40), nd_widths=(21, 64, 20),
            batch_size=256, eval_batch_size=128, epochs=200, dropout=0.1,
        ),
        GcnConfig(
            k_train=10, k_test=10, t3_train=0.4, t3_test=0.4,
            batch_size=256, eval_batch_size=128, epochs=120, dropout=0.2, m=0.0,
        ),
        DpcConfig(k_density=11, sigma=0.02, max_connections=1),
    )


def _synth():
    return PipelineConfig(
        "synth",
        LinkerConfig(
            t1=0.4, t2=0.0, k=10, k1=5, k2=3, dist_max=4.0,
            fd_widths=(64, 64, 40), nd_widths=(21, 64, 20),
            lr=0.1, batch_size=128, eval_batch_size=512, epochs=10, dropout=0.1,
        ),
        GcnConfig(
            k_train=10, k_test=10, t3_train=0.5, t3_test=0.5,
            lr=0.01, batch_size=256, eval_batch_size=512, epochs=10, dropout=0.1, s=40.0, m=0.25,
        ),
        DpcConfig(k_density=10, sigma=0.1, max_connections=1, link_threshold=0.5),
    )


PRESETS = {
    "ms1m": _ms1m,
    "ijbb": _ijbb,
    "deepfashion": _deepfashion,
    "synth": _synth,
}


def load_preset(name):
    try:
        return PRESETS[name]().validate()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------- flat key=value files ----------

SECTIONS = ("linker", "gcn", "dpc")


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(f, raw, where):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    try:
        if f.type is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if f.type is int:
            return int(raw)
        if f.type is float:
            return float(raw)
        if f.type is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {f.type.__name__}") from None


def dump_config(cfg):
    lines = [f"preset={cfg.preset}"]
    for section in SECTIONS:
        obj = getattr(cfg, section)
        lines += [f"{section}.{f.name}={_format(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]
    return "\n".join(lines) + "\n"


def apply_overrides(cfg, pairs, source="override"):
    """Apply (key, value) string pairs such as ("linker.t1", "0.8") to cfg in place."""
    for key, raw in pairs:
        if key == "seed":
            cfg.with_seed(int(raw))
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        obj = getattr(cfg, section)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if name not in fields:
            raise ConfigError(f"{source}: unknown key {key!r}")
        setattr(obj, name, _coerce(fields[name], raw, f"{source}: {key}"))
    return cfg


def _pairs(text, source):
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out.append((key.strip(), value.strip()))
    return out


def parse_config(text, base=None, source="<config>"):
    """Parse flat text; a `preset=` line resets to that preset before other keys apply."""
    pairs = _pairs(text, source)
    preset = next((v for k, v in pairs if k == "preset"), None)
    if preset is not None:
        cfg = load_preset(preset)
    else:
        cfg = base if base is not None else load_preset("synth")
    apply_overrides(cfg, [(k, v) for k, v in pairs if k != "preset"], source)
    return cfg.validate()


def load_config_file(path, base=None):
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read(), base, source=path)
