"""Point cloud simplification: learned attention-based sampling, classical
baselines, neighborhood-search backends, and a benchmark CLI."""

from .core import (
    CasNetConfig,
    HardSamplingMatrix,
    NeighborTable,
    PointCloud,
    RunRecord,
    SoftSamplingMatrix,
    ratio_to_count,
    validate_cloud,
)

__version__ = "0.1.0"

__all__ = [
    "CasNetConfig",
    "HardSamplingMatrix",
    "NeighborTable",
    "PointCloud",
    "RunRecord",
    "SoftSamplingMatrix",
    "ratio_to_count",
    "validate_cloud",
    "__version__",
]
