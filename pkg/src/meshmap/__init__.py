"""Mesh-based LiDAR mapping: incremental GP meshing with two-stage dynamic
removal and point-to-mesh pose refinement."""

from .config import PipelineConfig
from .geometry import Frame, Mesh, PointCloud, PoseSE3
from .mesher import MeshMap, MesherConfig
from .pipeline import MeshMapper, MeshPipeline, RunReport, run_pipeline

__all__ = [
    "Frame", "Mesh", "PointCloud", "PoseSE3",
    "MeshMap", "MesherConfig",
    "PipelineConfig", "MeshMapper", "MeshPipeline", "RunReport",
    "run_pipeline",
]

__version__ = "0.1.0"
