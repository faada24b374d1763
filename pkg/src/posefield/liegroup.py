"""Rigid transforms on SE(3) and the se(3) exponential / logarithm maps.

Poses are world-to-camera: a world point ``X`` lands in camera coordinates
as ``R @ X + t``. Twists are ordered ``(t, w)``: translation part first,
axis-angle rotation part second. All pose math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
LOG_PI_MARGIN = 1e-6


class RotationNearPi(ValueError):
    """log_map was asked for a rotation angle on (or too near) the cut locus at pi."""


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[w]x`` such that ``skew(w) @ v == cross(w, v)``."""
    x, y, z = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def is_rotation(m: np.ndarray, tol: float = 1e-9) -> bool:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    return bool(np.abs(m.T @ m - np.eye(3)).max() < tol and abs(np.linalg.det(m) - 1.0) < tol)


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``X -> r @ X + t``."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", np.array(self.r, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.array(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.r
        out[:3, 3] = self.t
        return out

    def center(self) -> np.ndarray:
        """Camera center in world coordinates, ``-r.T @ t``."""
        return -self.r.T @ self.t

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.r.T + self.t

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.r, other.r) and np.array_equal(self.t, other.t))

    __hash__ = None


def compose(a: Pose, b: Pose) -> Pose:
    """``a . b``: apply ``b`` first, then ``a``."""
    return Pose(a.r @ b.r, a.r @ b.t + a.t)


def inverse(p: Pose) -> Pose:
    return Pose(p.r.T, -p.r.T @ p.t)


def relative_pose(pi: Pose, pj: Pose) -> Pose:
    """Transform taking camera-i coordinates to camera-j coordinates.

    ``R_ij = R_j R_i^T`` and ``T_ij = T_j - R_ij T_i``, so that
    ``compose(relative_pose(pi, pj), pi) == pj``.
    """
    r_ij = pj.r @ pi.r.T
    return Pose(r_ij, pj.t - r_ij @ pi.t)


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    wx = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + wx
    return np.eye(3) + np.sin(theta) / theta * wx + (1.0 - np.cos(theta)) / theta**2 * (wx @ wx)


def left_jacobian(w: np.ndarray) -> np.ndarray:
    """The ``V`` matrix mapping the twist translation into the pose translation."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    wx = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * wx
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * wx
        + (theta - np.sin(theta)) / theta**3 * (wx @ wx)
    )


def exp_map(x: np.ndarray) -> Pose:
    """Map a twist ``(t, w)`` to the pose ``[exp([w]x) | V t]``."""
    x = np.asarray(x, dtype=np.float64).reshape(6)
    t, w = x[:3], x[3:]
    return Pose(so3_exp(w), left_jacobian(w) @ t)


def rotation_angle(r: np.ndarray) -> float:
    # atan2 of (sin, cos) keeps full precision near 0 and pi, unlike arccos of the trace
    r = np.asarray(r, dtype=np.float64)
    v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(v), 0.5 * (np.trace(r) - 1.0)))


def so3_log(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    # antisymmetric part is 2 sin(theta) * axis; stable away from pi
    v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = 0.5 * np.linalg.norm(v)
    c = 0.5 * (np.trace(r) - 1.0)
    theta = float(np.arctan2(s, c))
    if theta >= np.pi - LOG_PI_MARGIN:
        raise RotationNearPi(f"rotation angle {theta!r} is within {LOG_PI_MARGIN} of pi")
    if theta < SMALL_ANGLE:
        return 0.5 * v
    if theta > 0.5 * np.pi:
        # sin(theta) loses precision near pi; take the axis from the symmetric part
        b = 0.5 * (r + r.T) - c * np.eye(3)
        k = int(np.argmax(np.diag(b)))
        axis = b[:, k] / np.sqrt(b[k, k] * (1.0 - c))
        if axis @ v < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * v


def log_map(p: Pose) -> np.ndarray:
    """Inverse of :func:`exp_map` on the principal branch (rotation angle < pi)."""
    w = so3_log(p.r)
    t = np.linalg.solve(left_jacobian(w), p.t)
    return np.concatenate([t, w])


def geodesic_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in radians of the rotation taking ``a`` to ``b``."""
    return rotation_angle(np.asarray(a).T @ np.asarray(b))


def axis_angle_rotation(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return so3_exp(axis * angle)


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    axis = rng.normal(size=3)
    return axis_angle_rotation(axis, rng.uniform(0.0, max_angle))


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Closest rotation in Frobenius norm (polar factor with det fixed to +1)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(x, y, z, w)`` with ``w >= 0``."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s, 0.25 * s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + r[i, i] - r[j, j] - r[k, k])
        q = np.empty(4)
        q[i] = 0.25 * s
        q[j] = (r[j, i] + r[i, j]) / s
        q[k] = (r[k, i] + r[i, k]) / s
        q[3] = (r[k, j] - r[j, k]) / s
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
