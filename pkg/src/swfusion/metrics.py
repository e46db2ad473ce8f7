"""Per-frame discrepancy between estimators, RMSE against ground truth,
and order-of-magnitude summary statistics.

Discrepancy compares pose estimates only (landmarks are excluded):
translation is the Euclidean norm of the position difference, attitude is
the rotation angle of the relative rotation, in degrees. Estimates share a
gauge by construction, so no trajectory alignment is performed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import NominalState, Pose
from .rotations import rotation_angle_deg

LOG_CLAMP = 1e-16


class FrameMismatch(Exception):
    """The two states do not cover the same frame ids."""


@dataclass
class DiscrepancySeries:
    frame_ids: list[int]
    translation: np.ndarray  # meters, per frame
    attitude: np.ndarray  # degrees, per frame

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(-1)
        self.attitude = np.asarray(self.attitude, dtype=float).reshape(-1)
        n = len(self.frame_ids)
        if self.translation.shape[0] != n or self.attitude.shape[0] != n:
            raise ValueError("series length must match frame count")
        if np.any(self.translation < 0) or np.any(self.attitude < 0):
            raise ValueError("discrepancy entries must be nonnegative")


def poses_to_state(poses: dict) -> NominalState:
    return NominalState({fid: p.copy() for fid, p in poses.items()}, {})


def _common_frames(a: NominalState, b: NominalState) -> list[int]:
    ids_a, ids_b = a.frame_ids(), b.frame_ids()
    if ids_a != ids_b:
        raise FrameMismatch(f"frame ids differ: {ids_a[:5]}... vs {ids_b[:5]}...")
    return ids_a

def discrepancy(a: NominalState, b: NominalState) -> DiscrepancySeries:
    """Per-frame translation (m) and attitude (deg) differences."""
    ids = _common_frames(a, b)
    trans = np.empty(len(ids))
    att = np.empty(len(ids))
    for i, fid in enumerate(ids):
        pa, pb = a.frames[fid], b.frames[fid]
        trans[i] = float(np.linalg.norm(pa.position - pb.position))
        att[i] = rotation_angle_deg(pa.attitude, pb.attitude)
    return DiscrepancySeries(ids, trans, att)


def rmse(est: NominalState, truth: NominalState) -> tuple[float, float]:
    """Root-mean-square of per-frame translation norms (m) and rotation
    angles (deg) against ground truth."""
    s = discrepancy(est, truth)
    pos = float(np.sqrt(np.mean(s.translation**2)))
    att = float(np.sqrt(np.mean(s.attitude**2)))
    return pos, att


@dataclass
class Log10Stats:
    translation_max: float
    translation_mean: float
    attitude_max: float
    attitude_mean: float


def _log10(x: float) -> float:
    return float(np.log10(max(x, LOG_CLAMP)))


def log10_stats(s: DiscrepancySeries) -> Log10Stats:
    """log10 of the max entry and of the arithmetic mean (taken in linear
    space) per channel; zeros are clamped before the log."""
    if len(s.frame_ids) == 0:
        raise ValueError("series must be nonempty")
    return Log10Stats(
        translation_max=_log10(np.max(s.translation)),
        translation_mean=_log10(np.mean(s.translation)),
        attitude_max=_log10(np.max(s.attitude)),
        attitude_mean=_log10(np.mean(s.attitude)),
    )


def log10_stats_mean_of_logs(s: DiscrepancySeries) -> tuple[float, float]:
    """Alternative reading of the summary mean: average the per-frame
    log10 values instead of logging the linear mean. Emitted alongside the
    primary statistic in output files."""
    t = np.log10(np.maximum(s.translation, LOG_CLAMP))
    a = np.log10(np.maximum(s.attitude, LOG_CLAMP))
    return float(np.mean(t)), float(np.mean(a))
