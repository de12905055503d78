# linkcluster/core/errors.py


class LinkClusterError(Exception):
    """Base class for every error raised by linkcluster."""


class GraphError(LinkClusterError, ValueError):
    pass


class FeatureError(LinkClusterError, ValueError):
    pass


class ModelError(LinkClusterError, ValueError):
    pass


class TrainingError(LinkClusterError):
    pass


class ConfigError(LinkClusterError, ValueError):
    pass


class DataFormatError(LinkClusterError, ValueError):
    pass


class ClusterError(LinkClusterError, ValueError):
    pass


class UndefinedMetricError(LinkClusterError):
    """A metric whose denominator is empty, e.g. precision with no kept edges."""
