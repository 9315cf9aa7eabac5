"""Synthetic panoramic-camera + tilted-LiDAR SLAM with refined sparse depth and depth association.

Subpackages and modules:

* :mod:`panoslam.geometry` - SE(3)/Sim(3), the equirectangular camera, triangulation
* :mod:`panoslam.sensor_sim` - synthetic world, trajectories, observations and LiDAR
* :mod:`panoslam.depth_refine` - residual correction, toy predictor, swarm search
* :mod:`panoslam.slam` - tracking, mapping, association, local bundle adjustment
* :mod:`panoslam.loop_closing` - loop detection and Sim(3) pose-graph optimisation
* :mod:`panoslam.evaluation` - trajectory I/O, alignment, ATE/RTE/RRE
* :mod:`panoslam.cli` - the ``panoslam`` command
"""

from .errors import (
    ConfigurationError,
    CorrectionUnavailableError,
    DatasetError,
    EvaluationError,
    InvalidInputError,
    PanoSlamError,
    TrackingLostError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "CorrectionUnavailableError", "DatasetError", "EvaluationError",
    "InvalidInputError", "PanoSlamError", "TrackingLostError", "__version__",
]
