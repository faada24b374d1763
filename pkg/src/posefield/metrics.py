"""Trajectory and image metrics: similarity alignment, rotation/translation error, PSNR.

Also reads and writes TUM-style trajectory files. Each line is
``id tx ty tz qx qy qz qw`` giving the camera-to-world transform (camera
center and orientation), quaternion in (x, y, z, w) order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .liegroup import Pose, geodesic_angle, project_to_so3, quaternion_to_rotation, rotation_to_quaternion

PSNR_CAP = 99.0


class DegenerateGeometry(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class TrajectoryFormatError(ValueError):
    pass


@dataclass
class Trajectory:
    poses: list[Pose]
    ids: list[int] | None = None

    def __post_init__(self):
        if self.ids is None:
            self.ids = list(range(len(self.poses)))
        self.ids = [int(i) for i in self.ids]
        if len(self.ids) != len(self.poses):
            raise ValueError("ids and poses differ in length")
        if len(set(self.ids)) != len(self.ids) or self.ids != sorted(self.ids):
            raise ValueError("trajectory ids must be unique and sorted")

    def __len__(self):
        return len(self.poses)

    def centers(self) -> np.ndarray:
        return np.array([p.center() for p in self.poses])


@dataclass
class Similarity:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(pts) @ self.rotation.T + self.translation

    def apply(self, traj: Trajectory) -> Trajectory:
        """Move every camera by this similarity (centers and orientations)."""
        out = []
        for p in traj.poses:
            c = self.apply_points(p.center()[None])[0]
            r = p.r @ self.rotation.T
            out.append(Pose(r, -r @ c))
        return Trajectory(out, list(traj.ids))


def align_similarity(est: Trajectory, gt: Trajectory) -> Similarity:
    """Least-squares ``s, R, t`` minimizing ``sum |s R c_est + t - c_gt|^2`` (Umeyama)."""
    if len(est) != len(gt):
        raise DimensionMismatch(f"trajectories have {len(est)} and {len(gt)} poses")
    x, y = est.centers(), gt.centers()
    if len(x) < 3:
        raise DegenerateGeometry("similarity alignment needs at least 3 camera centers")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    sv = np.linalg.svd(xc, compute_uv=False)
    if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometry("estimated camera centers are collinear or coincident")
    cov = yc.T @ xc / len(x)
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    var_x = np.sum(xc * xc) / len(x)
    scale = float(np.trace(np.diag(d) @ s) / var_x)
    return Similarity(scale, rot, my - scale * rot @ mx)


def align_rotations(est: Trajectory, gt: Trajectory) -> Similarity:
    """Rotation-only alignment of camera orientations (chordal mean), for trajectories
    whose centers cannot support a similarity, e.g. all cameras at the origin."""
    acc = np.zeros((3, 3))
    for pe, pg in zip(est.poses, gt.poses):
        acc += pg.r.T @ pe.r  # camera-to-world gt times world-to-camera est
    rot = project_to_so3(acc)
    c_gt = gt.centers().mean(axis=0)
    c_est = est.centers().mean(axis=0)
    return Similarity(1.0, rot, c_gt - rot @ c_est)


def pose_errors(est_aligned: Trajectory, gt: Trajectory) -> tuple[float, float]:
    """Mean geodesic rotation error in degrees and mean camera-center distance, over all frames."""
    if len(est_aligned) != len(gt):
        raise DimensionMismatch(f"trajectories have {len(est_aligned)} and {len(gt)} poses")
    dr = [geodesic_angle(a.r, b.r) for a, b in zip(est_aligned.poses, gt.poses)]
    dt = np.linalg.norm(est_aligned.centers() - gt.centers(), axis=1)
    return float(np.degrees(np.mean(dr))), float(np.mean(dt))


def evaluate_trajectory(est: Trajectory, gt: Trajectory) -> dict:
    """Align then score; falls back to rotation-only alignment when centers are degenerate."""
    try:
        sim = align_similarity(est, gt)
        mode = "similarity"
    except DegenerateGeometry:
        sim = align_rotations(est, gt)
        mode = "rotation"
    d_r, d_t = pose_errors(sim.apply(est), gt)
    return {"dR_deg": d_r, "dT": d_t, "alignment": mode, "scale": sim.scale}


def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; identical images give 99 dB."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


# -- TUM text format --------------------------------------------------------------
def write_tum(path, traj: Trajectory) -> None:
    lines = []
    for i, p in zip(traj.ids, traj.poses):
        c = p.center()
        q = rotation_to_quaternion(p.r.T)
        vals = " ".join(repr(float(v)) for v in (*c, *q))
        lines.append(f"{i} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path) -> Trajectory:
    ids, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 8:
            raise TrajectoryFormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(v) for v in parts[1:]]
            idx = int(float(parts[0]))
        except ValueError:
            raise TrajectoryFormatError(f"{path}:{lineno}: non-numeric field") from None
        q = np.array(vals[3:])
        if not np.all(np.isfinite(q)) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise TrajectoryFormatError(f"{path}:{lineno}: quaternion norm {np.linalg.norm(q):.9g} is not 1")
        r = quaternion_to_rotation(q / np.linalg.norm(q)).T
        c = np.array(vals[:3])
        ids.append(idx)
        poses.append(Pose(r, -r @ c))
    try:
        return Trajectory(poses, ids)
    except ValueError as exc:
        raise TrajectoryFormatError(f"{path}: {exc}") from None
