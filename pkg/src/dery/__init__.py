"""Offline model-zoo partition and block-reassembly optimizer."""

__version__ = "0.1.0"

from .errors import DeryError
from .reassembly import BatchSpec, Budgets, naswot_score, score_candidate, search
from .similarity import (
    SimilarityTable,
    build_similarity_table,
    center_columns,
    functional_similarity,
    linear_cka,
    minibatch_cka,
)
from .partition import ZooPartition, objective_J, optimize_partition
from .zoo import Block, ModelGraph, NodeMeta, ZooManifest, load_manifest, save_manifest

__all__ = [
    "__version__",
    "DeryError",
    "BatchSpec",
    "Budgets",
    "naswot_score",
    "score_candidate",
    "search",
    "SimilarityTable",
    "build_similarity_table",
    "center_columns",
    "functional_similarity",
    "linear_cka",
    "minibatch_cka",
    "ZooPartition",
    "objective_J",
    "optimize_partition",
    "Block",
    "ModelGraph",
    "NodeMeta",
    "ZooManifest",
    "load_manifest",
    "save_manifest",
]
