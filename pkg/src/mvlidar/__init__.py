"""Two-stage multi-view LiDAR perception.

A sweep is projected into a perspective range image for 7-class semantic
segmentation, then the per-point class probabilities are reprojected onto
a bird's-eye-view grid (together with height statistics) for 3-class
object detection with oriented boxes and a drivable-space mask. Includes
a from-scratch deterministic CNN inference engine, the DBSCAN detection
tail, rotated-box/AP/mIoU evaluation and a benchmarking CLI.
"""

from ._kernels import available_backends, current_backend
from .pipeline import PipelineConfig, PipelineOutput, run_pipeline

__version__ = "0.1.0"

__all__ = ["PipelineConfig", "PipelineOutput", "run_pipeline",
           "available_backends", "current_backend", "__version__"]
