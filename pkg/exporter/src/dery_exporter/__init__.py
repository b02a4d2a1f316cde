"""Bridge between real pre-trained networks and the dery zoo formats."""

__version__ = "0.1.0"

from .export import ZooEntry, export_zoo, parse_models_file
from .materialize import StitchedBackbone, count_params, materialize_plan
from .rerank import rerank_exact

__all__ = [
    "__version__",
    "ZooEntry",
    "export_zoo",
    "parse_models_file",
    "StitchedBackbone",
    "count_params",
    "materialize_plan",
    "rerank_exact",
]
