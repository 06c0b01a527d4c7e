from .config import PipelineConfig, load_config
from .errors import DistGeoError
from .geometry import CoordinateTable, DistanceTable
from .metrics import MetricsConfig, MetricsReport, evaluate
from .pipeline import Reconstruction, Reconstructor
from .solver import SolverConfig, solve
from .stitching import StitchConfig, stitch
from .synthetic import SyntheticConfig, generate_slide

__all__ = [
    "CoordinateTable",
    "DistGeoError",
    "DistanceTable",
    "MetricsConfig",
    "MetricsReport",
    "PipelineConfig",
    "Reconstruction",
    "Reconstructor",
    "SolverConfig",
    "StitchConfig",
    "SyntheticConfig",
    "evaluate",
    "generate_slide",
    "load_config",
    "solve",
    "stitch",
]
