"""Two-view geometry: eight-point F, essential matrix, decomposition, chirality.

Relative poses follow the world-to-camera convention of :mod:`liegroup`:
a point with camera-i coordinates ``X`` has camera-j coordinates
``R X + t``, so normalized image points satisfy ``x_j^T E x_i = 0`` with
``E = [t]x R``.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff.svd import jacobi_svd, svd3, svd_small
from .liegroup import Pose, skew

logger = logging.getLogger(__name__)

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


class EpipolarError(RuntimeError):
    pass


class DegenerateConfiguration(EpipolarError):
    pass


class AmbiguousChirality(EpipolarError):
    pass


class IllConditioned(EpipolarError):
    pass


class MatchFileError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [[1.0 / self.fx, 0.0, -self.cx / self.fx], [0.0, 1.0 / self.fy, -self.cy / self.fy], [0.0, 0.0, 1.0]]
        )

    def normalize(self, px: np.ndarray) -> np.ndarray:
        """Pixel coordinates (N, 2) to normalized image coordinates (N, 2)."""
        px = np.asarray(px, dtype=np.float64)
        return np.stack([(px[:, 0] - self.cx) / self.fx, (px[:, 1] - self.cy) / self.fy], axis=1)

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        p = np.asarray(points_cam, dtype=np.float64)
        return np.stack([self.fx * p[:, 0] / p[:, 2] + self.cx, self.fy * p[:, 1] / p[:, 2] + self.cy], axis=1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass
class CorrespondenceSet:
    pts_i: np.ndarray
    pts_j: np.ndarray
    valid: np.ndarray = None
    weight: np.ndarray = None
    pair: tuple[int, int] | None = None

    def __post_init__(self):
        self.pts_i = np.asarray(self.pts_i, dtype=np.float64).reshape(-1, 2)
        self.pts_j = np.asarray(self.pts_j, dtype=np.float64).reshape(-1, 2)
        n = len(self.pts_i)
        if len(self.pts_j) != n:
            raise ValueError(f"pts_i has {n} rows but pts_j has {len(self.pts_j)}")
        self.weight = np.ones(n) if self.weight is None else np.asarray(self.weight, dtype=np.float64).reshape(n)
        self.valid = (self.weight > 0) if self.valid is None else np.asarray(self.valid, dtype=bool).reshape(n)

    def __len__(self):
        return len(self.pts_i)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def valid_points(self) -> tuple[np.ndarray, np.ndarray]:
        return self.pts_i[self.valid], self.pts_j[self.valid]

    def subset(self, idx: np.ndarray) -> "CorrespondenceSet":
        return CorrespondenceSet(self.pts_i[idx], self.pts_j[idx], self.valid[idx], self.weight[idx], self.pair)


@dataclass
class RelPoseEstimate:
    r: np.ndarray
    t_dir: np.ndarray
    inlier_count: int
    residual: float

    def pose(self) -> Pose:
        return Pose(self.r, self.t_dir)


@dataclass
class EpipolarConfig:
    subset_size: int = 24
    trials: int = 8
    ambiguity_fraction: float = 0.05
    max_condition: float = 1e12
    rank_tol: float = 1e-9


# -- estimation ----------------------------------------------------------------
def _hartley(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - centroid) ** 2, axis=1)))
    if rms <= 0:
        raise DegenerateConfiguration("all points coincide")
    s = np.sqrt(2.0) / rms
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def _homog(pts: np.ndarray) -> np.ndarray:
    return np.hstack([pts, np.ones((len(pts), 1))])


def eight_point_fundamental(c: CorrespondenceSet, rank_tol: float = 1e-9) -> np.ndarray:
    """Normalized eight-point estimate of F with ``x_j^T F x_i = 0`` (pixel coords).

    Output has rank 2 and unit Frobenius norm, with the sign fixed so the
    entry of largest magnitude is positive.
    """
    pi, pj = c.valid_points()
    if len(pi) < 8:
        raise DegenerateConfiguration(f"eight-point needs >= 8 valid matches, got {len(pi)}")
    ti, tj = _hartley(pi), _hartley(pj)
    xi = _homog(pi) @ ti.T
    xj = _homog(pj) @ tj.T
    a = (xj[:, :, None] * xi[:, None, :]).reshape(-1, 9)
    _, s, vt = svd_small(a)
    if s[7] <= rank_tol * s[0]:
        raise DegenerateConfiguration(f"design matrix rank < 8 (sigma_8/sigma_1 = {s[7] / s[0]:.3g})")
    fn = vt[-1].reshape(3, 3)
    u, sf, vtf = svd3(fn)
    fn = u @ np.diag([sf[0], sf[1], 0.0]) @ vtf
    f = tj.T @ fn @ ti
    f /= np.linalg.norm(f)
    k = np.argmax(np.abs(f))
    return f if f.flat[k] > 0 else -f


def fundamental_to_essential(f: np.ndarray, ki: Intrinsics, kj: Intrinsics) -> np.ndarray:
    """E = K_j^T F K_i, projected onto the essential manifold.

    The inverse-K form K_j^-1 F K_i^-1 that sometimes appears in write-ups does
    not satisfy x_j^T E x_i = 0 for normalized coordinates, so it is not used.
    """
    e = kj.matrix.T @ np.asarray(f, dtype=np.float64) @ ki.matrix
    u, s, vt = svd3(e)
    sigma = 0.5 * (s[0] + s[1])
    return u @ np.diag([sigma, sigma, 0.0]) @ vt


def decompose_essential(e: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """The four (R, t_dir) factorizations of E.

    Order: ``(U W V^T, +u3), (U W V^T, -u3), (U W^T V^T, +u3), (U W^T V^T, -u3)``.
    """
    u, _, vt = svd3(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    r1 = u @ _W @ vt
    r2 = u @ _W.T @ vt
    t = u[:, 2] / np.linalg.norm(u[:, 2])
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def _projection(pose: Pose) -> np.ndarray:
    return np.hstack([pose.r, pose.t[:, None]])


def _triangulate_batch(xi: np.ndarray, xj: np.ndarray, pose_i: Pose, pose_j: Pose, max_condition: float):
    """DLT triangulation of N normalized point pairs; returns points, depths and a conditioning mask."""
    pmi, pmj = _projection(pose_i), _projection(pose_j)
    a = np.stack(
        [
            xi[:, 0:1] * pmi[2] - pmi[0],
            xi[:, 1:2] * pmi[2] - pmi[1],
            xj[:, 0:1] * pmj[2] - pmj[0],
            xj[:, 1:2] * pmj[2] - pmj[1],
        ],
        axis=1,
    )
    a /= np.linalg.norm(a, axis=2, keepdims=True)
    _, s, vt = jacobi_svd(a)
    xh = vt[:, -1, :]
    cond = s[:, 0] / np.maximum(s[:, 2], 1e-300)
    ok = (cond <= max_condition) & (np.abs(xh[:, 3]) > 1e-14 * np.abs(xh[:, :3]).max(axis=1))
    w = np.where(ok, xh[:, 3], 1.0)
    pts = xh[:, :3] / w[:, None]
    d_i = pts @ pose_i.r[2] + pose_i.t[2]
    d_j = pts @ pose_j.r[2] + pose_j.t[2]
    return pts, d_i, d_j, ok


def triangulate_linear(x_i, x_j, pose_i: Pose, pose_j: Pose, max_condition: float = 1e12):
    """Triangulate one normalized point pair; returns ``(X, d_i, d_j)``."""
    if np.linalg.norm(pose_i.center() - pose_j.center()) <= 1e-9:
        raise IllConditioned("camera centers coincide (zero baseline)")
    pts, d_i, d_j, ok = _triangulate_batch(
        np.asarray(x_i, dtype=np.float64).reshape(1, 2),
        np.asarray(x_j, dtype=np.float64).reshape(1, 2),
        pose_i, pose_j, max_condition,
    )
    if not ok[0]:
        raise IllConditioned("triangulation system is ill-conditioned")
    return pts[0], float(d_i[0]), float(d_j[0])


def chirality_counts(candidates, xi: np.ndarray, xj: np.ndarray, max_condition: float = 1e12) -> np.ndarray:
    """Number of normalized matches triangulating in front of both cameras, per candidate."""
    base = Pose.identity()
    counts = []
    for r, t in candidates:
        _, d_i, d_j, ok = _triangulate_batch(xi, xj, base, Pose(r, t), max_condition)
        counts.append(int(np.sum(ok & (d_i > 0) & (d_j > 0))))
    return np.array(counts)


def select_by_chirality(candidates, c: CorrespondenceSet, ki: Intrinsics, kj: Intrinsics,
                        ambiguity_fraction: float = 0.05, max_condition: float = 1e12) -> RelPoseEstimate:
    pi, pj = c.valid_points()
    if len(pi) < 1:
        raise DegenerateConfiguration("chirality check needs at least one correspondence")
    xi, xj = ki.normalize(pi), kj.normalize(pj)
    counts = chirality_counts(candidates, xi, xj, max_condition)
    order = np.argsort(-counts, kind="stable")
    best, second = counts[order[0]], counts[order[1]]
    if best - second <= ambiguity_fraction * len(pi):
        raise AmbiguousChirality(f"chirality counts {counts.tolist()} do not single out a candidate")
    r, t = candidates[order[0]]
    return RelPoseEstimate(r, t, int(best), float("nan"))


def sampson_distances(f: np.ndarray, pts_i: np.ndarray, pts_j: np.ndarray) -> np.ndarray:
    """First-order geometric error (squared pixels) of each match under F."""
    xi, xj = _homog(pts_i), _homog(pts_j)
    fx = xi @ f.T
    ftx = xj @ f
    num = np.sum(xj * fx, axis=1) ** 2
    den = fx[:, 0] ** 2 + fx[:, 1] ** 2 + ftx[:, 0] ** 2 + ftx[:, 1] ** 2
    return num / np.maximum(den, 1e-300)


def essential_from_pose(r: np.ndarray, t: np.ndarray) -> np.ndarray:
    return skew(t) @ r


def fundamental_from_pose(r: np.ndarray, t: np.ndarray, ki: Intrinsics, kj: Intrinsics) -> np.ndarray:
    return kj.inverse.T @ essential_from_pose(r, t) @ ki.inverse


def relative_pose_chain(c: CorrespondenceSet, ki: Intrinsics, kj: Intrinsics,
                        cfg: EpipolarConfig | None = None) -> RelPoseEstimate:
    """Eight-point -> essential -> decomposition -> chirality on every valid match."""
    cfg = cfg or EpipolarConfig()
    f = eight_point_fundamental(c, cfg.rank_tol)
    e = fundamental_to_essential(f, ki, kj)
    est = select_by_chirality(decompose_essential(e), c, ki, kj, cfg.ambiguity_fraction, cfg.max_condition)
    pi, pj = c.valid_points()
    fr = fundamental_from_pose(est.r, est.t_dir, ki, kj)
    est.residual = float(np.mean(sampson_distances(fr, pi, pj)))
    return est


def estimate_relative_pose_subset(c: CorrespondenceSet, ki: Intrinsics, kj: Intrinsics,
                                  rng: np.random.Generator, cfg: EpipolarConfig | None = None) -> RelPoseEstimate:
    """Best of ``cfg.trials`` random-subset eight-point solves.

    Each trial is scored on all valid matches: chirality inliers first, mean
    Sampson error as the tie-breaker.
    """
    cfg = cfg or EpipolarConfig()
    if cfg.subset_size < 8:
        raise ValueError("subset_size must be >= 8")
    idx_valid = np.flatnonzero(c.valid)
    if len(idx_valid) < cfg.subset_size:
        raise DegenerateConfiguration(f"need >= {cfg.subset_size} valid matches, got {len(idx_valid)}")
    pi, pj = c.pts_i[idx_valid], c.pts_j[idx_valid]
    xi, xj = ki.normalize(pi), kj.normalize(pj)
    subsets = [rng.choice(idx_valid, size=cfg.subset_size, replace=False) for _ in range(cfg.trials)]

    best, best_key, last_err = None, None, None
    for sub in subsets:
        try:
            est = relative_pose_chain(c.subset(np.sort(sub)), ki, kj, cfg)
        except EpipolarError as exc:
            last_err = exc
            continue
        inliers = int(chirality_counts([(est.r, est.t_dir)], xi, xj, cfg.max_condition)[0])
        fr = fundamental_from_pose(est.r, est.t_dir, ki, kj)
        residual = float(np.mean(sampson_distances(fr, pi, pj)))
        key = (-inliers, residual)
        if best_key is None or key < best_key:
            best_key = key
            best = RelPoseEstimate(est.r, est.t_dir, inliers, residual)
    if best is None:
        raise DegenerateConfiguration(f"every trial failed (last: {last_err})")
    return best


# -- match file I/O ---------------------------------------------------------------
_HEADER = re.compile(r"^#\s*match-v1\s+N=(\d+)\s+pair=(-?\d+),(-?\d+)\s*$")


def write_matches(path, c: CorrespondenceSet, pair: tuple[int, int]) -> None:
    lines = [f"# match-v1 N={len(c)} pair={pair[0]},{pair[1]}"]
    w = np.where(c.valid, c.weight, 0.0)
    for row in np.column_stack([c.pts_i, c.pts_j, w]).tolist():
        lines.append(" ".join(repr(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_matches(path) -> CorrespondenceSet:
    """Read a ``match-v1`` file; rows with weight <= 0 are marked invalid."""
    text = Path(path).read_text().splitlines()
    if not text:
        raise MatchFileError(f"{path}: empty file")
    m = _HEADER.match(text[0])
    if not m:
        raise MatchFileError(f"{path}:1: bad header {text[0]!r}")
    n, pair = int(m.group(1)), (int(m.group(2)), int(m.group(3)))
    rows = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise MatchFileError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise MatchFileError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
    if len(rows) != n:
        raise MatchFileError(f"{path}: header says N={n} but found {len(rows)} rows")
    arr = np.array(rows, dtype=np.float64).reshape(-1, 5)
    return CorrespondenceSet(arr[:, 0:2], arr[:, 2:4], weight=arr[:, 4], pair=pair)
