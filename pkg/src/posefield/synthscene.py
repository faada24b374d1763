"""Synthetic ground truth: scenes, camera trajectories, images and matches.

Scenes sit around the world origin. Images of the volumetric variants
(``blob`` and ``boxes``) are rendered with the same compositing code as the
learned field; the ``points`` variant is drawn with depth-sorted Gaussian
splats. Landmarks are 3-D points with per-frame visibility; their noisy
projections stand in for optical-flow matches.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .epipolar import CorrespondenceSet, Intrinsics, read_matches, write_matches
from .images import read_rgbf32, write_rgbf32
from .liegroup import Pose, axis_angle_rotation, geodesic_angle, is_rotation, relative_pose
from .radiance import RenderConfig, camera_directions, composite, pixel_grid

MAX_STEP_ROTATION_DEG = 30.0
MIN_VISIBLE = 16
MIN_COVISIBLE = 8


class SceneError(ValueError):
    pass


class EmptyVisibility(SceneError):
    pass


class InsufficientCovisibility(SceneError):
    pass


@dataclass
class SceneSpec:
    variant: str = "blob"  # blob | boxes | points
    extent: float = 1.0
    seed: int = 0
    n_landmarks: int = 300
    splat_radius: float = 0.06

    def __post_init__(self):
        if self.variant not in ("blob", "boxes", "points"):
            raise SceneError(f"unknown scene variant {self.variant!r}")
        if self.extent <= 0:
            raise SceneError("extent must be positive")


@dataclass
class TrajectorySpec:
    kind: str = "orbit"  # orbit | forward
    n_frames: int = 12
    radius: float = 4.0
    sweep_deg: float = 90.0
    elevation_deg: float = 15.0
    step: float = 0.25
    jitter_deg: float = 0.0

    def __post_init__(self):
        if self.kind not in ("orbit", "forward"):
            raise SceneError(f"unknown trajectory kind {self.kind!r}")
        if self.n_frames < 2:
            raise SceneError(f"need at least 2 frames, got {self.n_frames}")


@dataclass
class NoiseSpec:
    pixel_sigma: float = 0.0
    outlier_fraction: float = 0.0
    dropout_fraction: float = 0.0

    def __post_init__(self):
        if self.pixel_sigma < 0:
            raise SceneError("pixel_sigma must be >= 0")
        for name in ("outlier_fraction", "dropout_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise SceneError(f"{name} must lie in [0, 1), got {v}")


def default_intrinsics(width: int, height: int, fov_deg: float = 45.0) -> Intrinsics:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    return Intrinsics(f, f, width / 2.0, height / 2.0)


# -- scenes ----------------------------------------------------------------------
class Scene:
    """Analytic density/color field plus a landmark set."""

    def __init__(self, spec: SceneSpec, rng: np.random.Generator):
        self.spec = spec
        e = spec.extent
        if spec.variant == "blob":
            k = 5
            self.centers = rng.uniform(-0.45 * e, 0.45 * e, size=(k, 3))
            self.scales = rng.uniform(0.25 * e, 0.4 * e, size=k)
            self.peaks = rng.uniform(6.0, 10.0, size=k)
            self.freq = rng.uniform(1.2, 2.2, size=3) / e
            self.phase = rng.uniform(0.0, 2 * np.pi, size=3)
            self.axes = np.linalg.qr(rng.normal(size=(3, 3)))[0]
        elif spec.variant == "boxes":
            k = 4
            self.lo = rng.uniform(-0.6 * e, 0.1 * e, size=(k, 3))
            self.hi = self.lo + rng.uniform(0.25 * e, 0.5 * e, size=(k, 3))
            self.colors = rng.uniform(0.1, 0.9, size=(k, 3))
            self.sharpness = 25.0 / e
        else:
            n = max(spec.n_landmarks, 400)
            self.points = rng.uniform(-0.7 * e, 0.7 * e, size=(n, 3))
            self.point_colors = rng.uniform(0.05, 0.95, size=(n, 3))
        self.landmarks = self._sample_landmarks(rng)

    def _sample_landmarks(self, rng: np.random.Generator) -> np.ndarray:
        n = self.spec.n_landmarks
        if self.spec.variant == "blob":
            which = rng.integers(0, len(self.centers), size=n)
            return self.centers[which] + rng.normal(size=(n, 3)) * 0.5 * self.scales[which, None]
        if self.spec.variant == "boxes":
            which = rng.integers(0, len(self.lo), size=n)
            return self.lo[which] + rng.uniform(size=(n, 3)) * (self.hi[which] - self.lo[which])
        return self.points[:n].copy()

    def density_color(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Volumetric variants only: density (M,) and color (M, 3) at world points (M, 3)."""
        if self.spec.variant == "blob":
            d2 = np.sum((pts[:, None, :] - self.centers[None]) ** 2, axis=2)
            sigma = np.sum(self.peaks * np.exp(-0.5 * d2 / self.scales**2), axis=1)
            rgb = 0.5 + 0.4 * np.sin((pts @ self.axes) * self.freq + self.phase)
            return sigma, rgb
        if self.spec.variant == "boxes":
            s = self.sharpness
            inside = np.prod(
                1.0 / (1.0 + np.exp(-s * (pts[:, None, :] - self.lo[None])))
                * 1.0 / (1.0 + np.exp(-s * (self.hi[None] - pts[:, None, :]))),
                axis=2,
            )  # (M, K)
            dens = 20.0 * inside
            sigma = dens.sum(axis=1)
            rgb = (dens @ self.colors) / np.maximum(sigma, 1e-9)[:, None]
            return sigma, np.where(sigma[:, None] > 1e-9, rgb, 0.5)
        raise SceneError("the points variant has no volumetric field")

    def render(self, pose: Pose, k: Intrinsics, width: int, height: int, cfg: RenderConfig,
               n_samples: int = 128) -> np.ndarray:
        if self.spec.variant == "points":
            return self._render_splats(pose, k, width, height, cfg.background)
        fine = RenderConfig(cfg.d_min, cfg.d_max, n_samples, cfg.batch_rays, cfg.background)
        dirs = camera_directions(pixel_grid(width, height), k) @ pose.r
        depths = fine.sample_depths()
        pts = pose.center()[None, None, :] + dirs[:, None, :] * depths[None, :, None]
        sigma, rgb = self.density_color(pts.reshape(-1, 3))
        n = len(dirs)
        color, _, _ = composite(Tensor(sigma.reshape(n, n_samples)), Tensor(rgb.reshape(n, n_samples, 3)),
                                fine.delta, fine.background)
        return color.data.reshape(height, width, 3)

    def _render_splats(self, pose: Pose, k: Intrinsics, width: int, height: int, background) -> np.ndarray:
        cam = pose.apply(self.points)
        order = np.argsort(-cam[:, 2], kind="stable")  # far to near
        img = np.broadcast_to(np.asarray(background, dtype=np.float64), (height, width, 3)).copy()
        grid = pixel_grid(width, height).reshape(height, width, 2)
        for idx in order:
            z = cam[idx, 2]
            if z <= 1e-6:
                continue
            uv = k.project(cam[idx:idx + 1])[0]
            r = k.fx * self.spec.splat_radius / z
            d2 = np.sum((grid - uv) ** 2, axis=2)
            a = 0.9 * np.exp(-0.5 * d2 / r**2)
            img = img * (1.0 - a[..., None]) + a[..., None] * self.point_colors[idx]
        return img


# -- trajectories -------------------------------------------------------------------
def look_at(center: np.ndarray, target: np.ndarray, down=(0.0, 1.0, 0.0)) -> Pose:
    """World-to-camera pose at ``center`` looking at ``target`` (camera y points along world ``down``)."""
    f = np.asarray(target, dtype=np.float64) - center
    f /= np.linalg.norm(f)
    x = np.cross(np.asarray(down, dtype=np.float64), f)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    r = np.stack([x, y, f])
    return Pose(r, -r @ center)


def trajectory(spec: TrajectorySpec, rng: np.random.Generator) -> list[Pose]:
    n = spec.n_frames
    poses = []
    if spec.kind == "orbit":
        elev = np.radians(spec.elevation_deg)
        for phi in np.radians(np.linspace(0.0, spec.sweep_deg, n)):
            c = spec.radius * np.array([np.sin(phi) * np.cos(elev), -np.sin(elev), -np.cos(phi) * np.cos(elev)])
            poses.append(look_at(c, np.zeros(3)))
    else:
        for i in range(n):
            x = (i - (n - 1) / 2.0) * spec.step
            # shallow arc rather than a line so similarity alignment stays well-posed
            c = np.array([x, 0.0, -spec.radius + 0.5 * x * x / spec.radius])
            p = Pose(np.eye(3), -c)
            if spec.jitter_deg > 0:
                jr = axis_angle_rotation(rng.normal(size=3), np.radians(spec.jitter_deg) * rng.uniform(-1, 1))
                p = Pose(jr @ p.r, jr @ p.t)
            poses.append(p)
    for a, b in zip(poses[:-1], poses[1:]):
        step = np.degrees(geodesic_angle(a.r, b.r))
        if step > MAX_STEP_ROTATION_DEG:
            raise SceneError(f"consecutive-frame rotation {step:.1f} deg exceeds {MAX_STEP_ROTATION_DEG}")
    return poses


# -- generation ------------------------------------------------------------------------
@dataclass
class Dataset:
    intrinsics: Intrinsics
    width: int
    height: int
    poses: list[Pose]
    images: list[np.ndarray]
    landmarks: np.ndarray
    visibility: np.ndarray  # (n_frames, n_landmarks) bool
    matches: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.poses)


def visibility(landmarks: np.ndarray, poses: list[Pose], k: Intrinsics, width: int, height: int,
               min_depth: float = 0.1) -> np.ndarray:
    vis = []
    for p in poses:
        cam = p.apply(landmarks)
        ok = cam[:, 2] > min_depth
        uv = k.project(np.where(ok[:, None], cam, 1.0))
        ok &= (uv[:, 0] >= 0) & (uv[:, 0] < width) & (uv[:, 1] >= 0) & (uv[:, 1] < height)
        vis.append(ok)
    return np.array(vis)


def generate(scene_spec: SceneSpec, traj: TrajectorySpec, k: Intrinsics, width: int, height: int,
             rng: np.random.Generator, render_cfg: RenderConfig | None = None) -> Dataset:
    render_cfg = render_cfg or RenderConfig()
    scene = Scene(scene_spec, rng)
    poses = trajectory(traj, rng)
    for p in poses:
        assert is_rotation(p.r)
    vis = visibility(scene.landmarks, poses, k, width, height)
    counts = vis.sum(axis=1)
    if counts.min() < MIN_VISIBLE:
        raise EmptyVisibility(f"frame {int(np.argmin(counts))} sees only {int(counts.min())} landmarks")
    images = [scene.render(p, k, width, height, render_cfg).astype(np.float32) for p in poses]
    return Dataset(k, width, height, poses, images, scene.landmarks, vis)


def correspondences(ds: Dataset, i: int, j: int, noise: NoiseSpec, rng: np.random.Generator) -> CorrespondenceSet:
    co = np.flatnonzero(ds.visibility[i] & ds.visibility[j])
    if len(co) < MIN_COVISIBLE:
        raise InsufficientCovisibility(f"frames {i},{j} share only {len(co)} landmarks")
    lm = ds.landmarks[co]
    k = ds.intrinsics
    pi = k.project(ds.poses[i].apply(lm))
    pj = k.project(ds.poses[j].apply(lm))
    n = len(co)
    if noise.pixel_sigma > 0:
        pi = pi + rng.normal(0.0, noise.pixel_sigma, size=pi.shape)
        pj = pj + rng.normal(0.0, noise.pixel_sigma, size=pj.shape)
    n_out = int(round(noise.outlier_fraction * n))
    if n_out:
        rows = rng.choice(n, size=n_out, replace=False)
        pj[rows] = rng.uniform([0.0, 0.0], [ds.width, ds.height], size=(n_out, 2))
    valid = np.ones(n, dtype=bool)
    n_drop = int(round(noise.dropout_fraction * n))
    if n_drop:
        valid[rng.choice(n, size=n_drop, replace=False)] = False
    return CorrespondenceSet(pi, pj, valid, pair=(i, j))


def match_pairs(n_frames: int, max_gap: int = 2) -> list[tuple[int, int]]:
    return [(i, j) for j in range(n_frames) for i in range(max(0, j - max_gap), j)]


def relative_rotations_deg(poses: list[Pose]) -> list[float]:
    return [float(np.degrees(geodesic_angle(a.r, b.r))) for a, b in zip(poses[:-1], poses[1:])]


# -- dataset directories ----------------------------------------------------------------
def _pose_dict(p: Pose) -> dict:
    return {"R": p.r.tolist(), "t": p.t.tolist()}


def write_dataset(root, ds: Dataset, scene_spec: SceneSpec, traj: TrajectorySpec, noise: NoiseSpec,
                  render_cfg: RenderConfig, seed: int) -> Path:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "matches").mkdir(exist_ok=True)
    for idx, img in enumerate(ds.images):
        write_rgbf32(root / "frames" / f"frame_{idx:04d}.rgbf32", img)
    for (i, j), c in sorted(ds.matches.items()):
        write_matches(root / "matches" / f"pair_{i}_{j}.txt", c, (i, j))
    meta = {
        "format": "scene-v1",
        "seed": seed,
        "width": ds.width,
        "height": ds.height,
        "intrinsics": ds.intrinsics.to_dict(),
        "scene": asdict(scene_spec),
        "trajectory": asdict(traj),
        "noise": asdict(noise),
        "render": {"d_min": render_cfg.d_min, "d_max": render_cfg.d_max, "background": list(render_cfg.background)},
        "frames": [f"frames/frame_{i:04d}.rgbf32" for i in range(len(ds))],
        "poses": [_pose_dict(p) for p in ds.poses],
        "pairs": [list(p) for p in sorted(ds.matches)],
        "landmarks": {"count": int(len(ds.landmarks)), "visible_per_frame": ds.visibility.sum(axis=1).tolist()},
    }
    (root / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "scene.json").read_text())
    k = Intrinsics(**meta["intrinsics"])
    poses = [Pose(np.array(p["R"]), np.array(p["t"])) for p in meta["poses"]]
    images = [read_rgbf32(root / f) for f in meta["frames"]]
    matches = {}
    for path in sorted((root / "matches").glob("pair_*_*.txt")):
        c = read_matches(path)
        matches[tuple(c.pair)] = c
    return Dataset(k, meta["width"], meta["height"], poses, images, np.zeros((0, 3)),
                   np.zeros((len(poses), 0), dtype=bool), matches, meta)


def build_dataset(scene_spec: SceneSpec, traj: TrajectorySpec, noise: NoiseSpec, width: int = 64, height: int = 64,
                  fov_deg: float = 45.0, seed: int = 0, max_gap: int = 2,
                  render_cfg: RenderConfig | None = None) -> Dataset:
    """Generate poses, images and matches for every pair at most ``max_gap`` frames apart."""
    rng = np.random.default_rng(seed)
    k = default_intrinsics(width, height, fov_deg)
    ds = generate(scene_spec, traj, k, width, height, rng, render_cfg)
    for i, j in match_pairs(len(ds), max_gap):
        ds.matches[(i, j)] = correspondences(ds, i, j, noise, rng)
    return ds


def ground_truth_relative(ds: Dataset, i: int, j: int) -> Pose:
    return relative_pose(ds.poses[i], ds.poses[j])
