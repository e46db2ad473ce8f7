"""swfusion: batch, sequential, and sliding-window state estimators on a
stereo visual-odometry model, with a Monte-Carlo harness for comparing
optimization- and filtering-based strategies."""

__version__ = "0.1.0"

from . import blockmat, estimators, metrics, problem, rotations, sim, sliding

__all__ = [
    "blockmat",
    "estimators",
    "metrics",
    "problem",
    "rotations",
    "sim",
    "sliding",
]
