"""State manifold, error-state convention, dynamic model, and the stereo
visual-odometry measurement model with analytic Jacobians.

Error-state sign convention: delta_x = x_lin - x_true, so estimates are
recovered with `compensate`: x_hat = x_lin - delta_hat. Attitude errors are
3-vector small angles applied multiplicatively on the left in the world
frame: R_hat = Exp(-delta_theta) R_lin.

State ids are ("f", frame_id) for camera frames (6 error dims: position,
attitude) and ("l", landmark_id) for landmarks (3 dims). The stacked error
vector orders all frames by ascending id first, then all landmarks by
ascending id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blockmat import spd_inverse, symmetrize
from .rotations import (
    exp_quat,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    rotvec_between,
    skew,
)

StateKey = tuple[str, int]

FRAME = "f"
LANDMARK = "l"


class DimensionMismatch(Exception):
    """State and error vector do not describe the same variables."""


class NotVisible(Exception):
    """Landmark does not project into both images at the linearization point."""


def frame_key(frame_id: int) -> StateKey:
    return (FRAME, frame_id)


def landmark_key(landmark_id: int) -> StateKey:
    return (LANDMARK, landmark_id)


def key_size(key: StateKey) -> int:
    return 6 if key[0] == FRAME else 3


@dataclass
class Pose:
    """Camera pose: world-frame position and world-from-body attitude
    stored as a unit quaternion (w, x, y, z)."""

    position: np.ndarray
    attitude: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.attitude = quat_normalize(np.asarray(self.attitude, dtype=float).reshape(4))

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.attitude)

    def copy(self) -> "Pose":
        return Pose(self.position.copy(), self.attitude.copy())


@dataclass
class Landmark:
    point: np.ndarray

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.point)):
            raise ValueError("landmark coordinates must be finite")

    def copy(self) -> "Landmark":
        return Landmark(self.point.copy())


@dataclass
class NominalState:
    """Linearization point: ordered camera frames plus landmark map."""

    frames: dict[int, Pose] = field(default_factory=dict)
    landmarks: dict[int, Landmark] = field(default_factory=dict)

    def __post_init__(self):
        ids = list(self.frames)
        if ids != sorted(ids):
            self.frames = {i: self.frames[i] for i in sorted(ids)}

    def frame_ids(self) -> list[int]:
        return sorted(self.frames)

    def landmark_ids(self) -> list[int]:
        return sorted(self.landmarks)

    def copy(self) -> "NominalState":
        return NominalState(
            {i: p.copy() for i, p in self.frames.items()},
            {i: l.copy() for i, l in self.landmarks.items()},
        )

    def value_of(self, key: StateKey):
        kind, sid = key
        return self.frames[sid] if kind == FRAME else self.landmarks[sid]


class StateIndex:
    """Bijection state id -> contiguous offsets in the stacked error vector.

    Frames come first (6 entries each, ascending id), then landmarks
    (3 entries each, ascending id).
    """

    def __init__(self, frame_ids, landmark_ids):
        self.keys: list[StateKey] = [frame_key(i) for i in sorted(frame_ids)]
        self.keys += [landmark_key(i) for i in sorted(landmark_ids)]
        self._offset: dict[StateKey, int] = {}
        off = 0
        for k in self.keys:
            self._offset[k] = off
            off += key_size(k)
        self.dim = off

    @classmethod
    def of(cls, state: NominalState) -> "StateIndex":
        return cls(state.frame_ids(), state.landmark_ids())

    def offset(self, key: StateKey) -> int:
        return self._offset[key]

    def slice_of(self, key: StateKey) -> slice:
        off = self._offset[key]
        return slice(off, off + key_size(key))

    def columns(self, keys) -> np.ndarray:
        cols = []
        for k in keys:
            off = self._offset[k]
            cols.extend(range(off, off + key_size(k)))
        return np.asarray(cols, dtype=int)

    def __contains__(self, key: StateKey) -> bool:
        return key in self._offset

    def __len__(self) -> int:
        return len(self.keys)

    def same_as(self, other: "StateIndex") -> bool:
        return self.keys == other.keys


@dataclass
class ErrorState:
    """Stacked minimal-parameterization error vector with its index map."""

    index: StateIndex
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float).reshape(-1)
        if self.vector.shape[0] != self.index.dim:
            raise DimensionMismatch(
                f"error vector has {self.vector.shape[0]} entries, index maps {self.index.dim}"
            )

    @classmethod
    def zero(cls, index: StateIndex) -> "ErrorState":
        return cls(index, np.zeros(index.dim))


@dataclass
class GaussianBelief:
    """Gaussian over an ErrorState, in information form (N, b) with
    N delta_hat = b, or covariance form (P, delta_hat)."""

    index: StateIndex
    form: str  # "information" | "covariance"
    matrix: np.ndarray
    vector: np.ndarray

    def __post_init__(self):
        if self.form not in ("information", "covariance"):
            raise ValueError(f"unknown belief form {self.form!r}")
        self.matrix = np.asarray(self.matrix, dtype=float)
        self.vector = np.asarray(self.vector, dtype=float).reshape(-1)
        d = self.index.dim
        if self.matrix.shape != (d, d) or self.vector.shape[0] != d:
            raise DimensionMismatch("belief dimensions do not match index map")

    def to_information(self) -> "GaussianBelief":
        if self.form == "information":
            return self
        n = spd_inverse(self.matrix, "covariance")
        return GaussianBelief(self.index, "information", n, n @ self.vector)

    def to_covariance(self) -> "GaussianBelief":
        if self.form == "covariance":
            return self
        p = spd_inverse(self.matrix, "information")
        return GaussianBelief(self.index, "covariance", p, p @ self.vector)

    def mean(self) -> np.ndarray:
        return self.to_covariance().vector

    def information_pair(self) -> tuple[np.ndarray, np.ndarray]:
        b = self.to_information()
        return b.matrix, b.vector


@dataclass
class StereoCamera:
    """Rectified pinhole stereo pair; right camera shifted by `baseline`
    along the camera x-axis."""

    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    baseline: float = 0.5
    width: int = 640
    height: int = 480
    pixel_sigma: float = 2.0
    depth_min: float = 0.1

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy", "baseline", "width", "height"):
            if getattr(self, name) <= 0:
                raise ValueError(f"camera parameter {name} must be positive")
        if self.pixel_sigma < 0:
            raise ValueError("pixel_sigma must be >= 0")

    def weight(self) -> np.ndarray:
        return np.eye(4) / self.pixel_sigma**2


@dataclass
class DynamicModel:
    """Linearized discrete dynamics: transition matrix and process noise."""

    phi: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.phi.ndim != 2 or self.phi.shape[0] != self.phi.shape[1]:
            raise ValueError("transition matrix must be square")
        if self.q.shape != self.phi.shape:
            raise ValueError("process noise must match transition matrix shape")
        if not np.allclose(self.q, self.q.T, atol=1e-9):
            raise ValueError("process noise must be symmetric")

    @classmethod
    def identity(cls, dim: int, q: float = 0.0) -> "DynamicModel":
        return cls(np.eye(dim), q * np.eye(dim))


@dataclass
class MeasurementBlock:
    """One stereo observation linearized at a nominal state: residual,
    Jacobian over the touched states, and SPD weight."""

    id: int
    touched: list[StateKey]
    residual: np.ndarray
    jacobian: np.ndarray
    weight: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.residual = np.asarray(self.residual, dtype=float).reshape(-1)
        self.jacobian = np.asarray(self.jacobian, dtype=float)
        self.weight = np.asarray(self.weight, dtype=float)
        self.z = np.asarray(self.z, dtype=float).reshape(-1)
        cols = sum(key_size(k) for k in self.touched)
        if self.jacobian.shape != (self.residual.shape[0], cols):
            raise DimensionMismatch(
                f"jacobian {self.jacobian.shape} does not align with touched states ({cols} cols)"
            )


def compensate(state: NominalState, err: ErrorState) -> NominalState:
    """Fold an estimated error into the nominal state: positions and points
    shift by -delta, attitudes by R_hat = Exp(-delta_theta) R."""
    index = err.index
    for key in index.keys:
        kind, sid = key
        present = sid in state.frames if kind == FRAME else sid in state.landmarks
        if not present:
            raise DimensionMismatch(f"state {key} in error vector but not in nominal state")
    out = state.copy()
    v = err.vector
    for key in index.keys:
        kind, sid = key
        off = index.offset(key)
        if kind == FRAME:
            pose = out.frames[sid]
            pose.position = pose.position - v[off : off + 3]
            dq = exp_quat(-v[off + 3 : off + 6])
            pose.attitude = quat_normalize(quat_multiply(dq, pose.attitude))
        else:
            lm = out.landmarks[sid]
            lm.point = lm.point - v[off : off + 3]
    return out


def error_between(lin: NominalState, other: NominalState, index: StateIndex) -> ErrorState:
    """Manifold difference delta = lin (-) other under the module convention,
    so that compensate(lin, delta) == other exactly."""
    v = np.zeros(index.dim)
    for key in index.keys:
        kind, sid = key
        off = index.offset(key)
        if kind == FRAME:
            a, b = lin.frames[sid], other.frames[sid]
            v[off : off + 3] = a.position - b.position
            v[off + 3 : off + 6] = rotvec_between(a.attitude, b.attitude)
        else:
            v[off : off + 3] = lin.landmarks[sid].point - other.landmarks[sid].point
    return ErrorState(index, v)


def propagate(belief: GaussianBelief, dyn: DynamicModel) -> GaussianBelief:
    """Time update in covariance form: P <- Phi P Phi^T + Q, mean <- Phi mean."""
    b = belief.to_covariance()
    if dyn.phi.shape[0] != b.index.dim:
        raise DimensionMismatch("dynamic model dimension does not match belief")
    p = symmetrize(dyn.phi @ b.matrix @ dyn.phi.T + dyn.q)
    return GaussianBelief(b.index, "covariance", p, dyn.phi @ b.vector)


def _camera_point(pose: Pose, lm: Landmark) -> np.ndarray:
    return pose.rotation().T @ (lm.point - pose.position)


def _project(q: np.ndarray, cam: StereoCamera) -> np.ndarray:
    x, y, z = q
    return np.array(
        [
            cam.cx + cam.fx * x / z,
            cam.cy + cam.fy * y / z,
            cam.cx + cam.fx * (x - cam.baseline) / z,
            cam.cy + cam.fy * y / z,
        ]
    )


def stereo_observe(pose: Pose, lm: Landmark, cam: StereoCamera) -> np.ndarray | None:
    """Project a landmark into the stereo pair, or None when invisible
    (behind the camera or outside either image)."""
    q = _camera_point(pose, lm)
    if q[2] <= cam.depth_min:
        return None
    uv = _project(q, cam)
    in_u = (0.0 <= uv[0] <= cam.width - 1) and (0.0 <= uv[2] <= cam.width - 1)
    in_v = 0.0 <= uv[1] <= cam.height - 1
    if not (in_u and in_v):
        return None
    return uv


def stereo_measurement_block(
    pose_lin: Pose,
    lm_lin: Landmark,
    z: np.ndarray,
    cam: StereoCamera,
    ids: tuple[int, int],
    meas_id: int = 0,
) -> MeasurementBlock:
    """Linearize one stereo observation at (pose_lin, lm_lin).

    Residual is l = z - projection(pose_lin, lm_lin). Jacobian columns are
    the derivative of the predicted pixels with respect to the error state
    (6 pose columns, then 3 landmark columns), so that l ~ h delta + noise.

    Raises NotVisible when the projection fails at the linearization point
    (landmark at or behind the minimum depth). A prediction that lands
    outside the image bounds is still a valid linearization of an existing
    observation: bounds gate observation generation, not relinearization.
    """
    frame_id, lm_id = ids
    q = _camera_point(pose_lin, lm_lin)
    if q[2] <= cam.depth_min:
        raise NotVisible(f"landmark {lm_id} invisible from frame {frame_id}")
    pred = _project(q, cam)
    rbw = pose_lin.rotation().T
    x, y, zc = q
    inv_z = 1.0 / zc
    dpi_dq = np.array(
        [
            [cam.fx * inv_z, 0.0, -cam.fx * x * inv_z * inv_z],
            [0.0, cam.fy * inv_z, -cam.fy * y * inv_z * inv_z],
            [cam.fx * inv_z, 0.0, -cam.fx * (x - cam.baseline) * inv_z * inv_z],
            [0.0, cam.fy * inv_z, -cam.fy * y * inv_z * inv_z],
        ]
    )
    # q as a function of the error state (delta applied via compensate):
    #   d q / d delta_p     = +R^T
    #   d q / d delta_theta = -R^T [m - p]x
    #   d q / d delta_m     = -R^T
    dq_dpos = rbw
    dq_datt = -rbw @ skew(lm_lin.point - pose_lin.position)
    dq_dlm = -rbw
    h = np.zeros((4, 9))
    h[:, 0:3] = dpi_dq @ dq_dpos
    h[:, 3:6] = dpi_dq @ dq_datt
    h[:, 6:9] = dpi_dq @ dq_dlm
    z = np.asarray(z, dtype=float).reshape(4)
    return MeasurementBlock(
        id=meas_id,
        touched=[frame_key(frame_id), landmark_key(lm_id)],
        residual=z - pred,
        jacobian=h,
        weight=cam.weight(),
        z=z,
    )


class StereoFactory:
    """Re-linearizable closure over one raw stereo observation."""

    def __init__(self, meas_id: int, frame_id: int, lm_id: int, z: np.ndarray, cam: StereoCamera):
        self.id = meas_id
        self.frame_id = frame_id
        self.lm_id = lm_id
        self.z = np.asarray(z, dtype=float).reshape(4)
        self.cam = cam
        self.touched = [frame_key(frame_id), landmark_key(lm_id)]

    def __call__(self, state: NominalState) -> MeasurementBlock:
        return stereo_measurement_block(
            state.frames[self.frame_id],
            state.landmarks[self.lm_id],
            self.z,
            self.cam,
            (self.frame_id, self.lm_id),
            meas_id=self.id,
        )
