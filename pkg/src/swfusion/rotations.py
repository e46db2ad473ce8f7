"""Unit-quaternion and rotation-vector helpers.

Quaternions are stored as (w, x, y, z) with unit norm and represent
world-from-body rotations: R(q) maps body-frame vectors into the world
frame. Small-angle errors are 3-vectors applied multiplicatively on the
left in the world frame.
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-12


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < _EPS:
        raise ValueError("cannot normalize near-zero quaternion")
    q = q / n
    # Fix the double-cover sign so equal rotations compare equal.
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Shepperd-style conversion, stable for all rotation matrices."""
    r = np.asarray(r, dtype=float)
    t = np.trace(r)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    return quat_normalize(q)


def exp_quat(theta: np.ndarray) -> np.ndarray:
    """Rotation vector (radians) -> unit quaternion, exact for all angles."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    if angle < 1e-9:
        # Second-order series keeps the round-trip with log_quat tight.
        half = 0.5 * theta
        w = 1.0 - 0.125 * angle * angle
        return quat_normalize(np.concatenate(([w], half)))
    axis = theta / angle
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


def log_quat(q: np.ndarray) -> np.ndarray:
    """Unit quaternion -> rotation vector in (-pi, pi]."""
    q = quat_normalize(q)
    w = min(max(q[0], -1.0), 1.0)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-9:
        return 2.0 * v  # first order: q ~ (1, theta/2)
    angle = 2.0 * np.arctan2(s, w)
    return (angle / s) * v


def rotvec_between(q_a: np.ndarray, q_b: np.ndarray) -> np.ndarray:
    """Rotation vector of R(q_a) R(q_b)^T (left, world-frame difference)."""
    return log_quat(quat_multiply(q_a, quat_conjugate(q_b)))


def rotation_angle_deg(q_a: np.ndarray, q_b: np.ndarray) -> float:
    """Angle in degrees of the relative rotation R(q_a) R(q_b)^T."""
    return float(np.degrees(np.linalg.norm(rotvec_between(q_a, q_b))))


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
