# linkcluster/__init__.py
from linkcluster.core.graph import EmbeddingSet, KnnGraph, WeightedGraph, build_knn, normalize_rows
from linkcluster.core.presets import PipelineConfig, load_preset
from linkcluster.services.cluster_service import ClusterAssignment, cluster_features
from linkcluster.services.evaluation_service import bcubed_f, pairwise_f
from linkcluster.services.pipeline_service import fit_pipeline, predict_pipeline, run_all

__version__ = "0.1.0"
