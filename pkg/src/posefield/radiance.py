"""Small radiance field: ray casting, ReLU MLP, alpha compositing, photometric loss.

Camera convention: x right, y down, z forward. The pixel with integer index
``(col, row)`` has its center at coordinates ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .epipolar import Intrinsics
from .liegroup import Pose


@dataclass
class RenderConfig:
    d_min: float = 2.0
    d_max: float = 6.0
    n_samples: int = 32  # full-scale setting: 64 coarse samples
    batch_rays: int = 1024
    background: tuple = (1.0, 1.0, 1.0)
    loss: str = "l1"  # or "l2"

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"unknown photometric loss {self.loss!r}")
        self.background = tuple(float(c) for c in self.background)

    def sample_depths(self) -> np.ndarray:
        """Midpoints of ``n_samples`` equal bins in ``[d_min, d_max]``."""
        edges = np.linspace(self.d_min, self.d_max, self.n_samples + 1)
        return 0.5 * (edges[:-1] + edges[1:])

    @property
    def delta(self) -> float:
        return (self.d_max - self.d_min) / self.n_samples


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray


# -- rays ------------------------------------------------------------------------
def pixel_grid(width: int, height: int) -> np.ndarray:
    """Centers of every pixel, row-major, shape (H*W, 2)."""
    cols, rows = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return np.stack([cols.ravel(), rows.ravel()], axis=1)


def camera_directions(px: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Unit viewing directions in the camera frame for pixel coordinates (N, 2)."""
    px = np.asarray(px, dtype=np.float64).reshape(-1, 2)
    d = np.stack([(px[:, 0] - k.cx) / k.fx, (px[:, 1] - k.cy) / k.fy, np.ones(len(px))], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def pixel_to_ray(px, pose: Pose, k: Intrinsics) -> Ray:
    d = camera_directions(px, k)[0] @ pose.r
    return Ray(pose.center(), d / np.linalg.norm(d))


def rays_from_pose(px: np.ndarray, rot: Tensor, trans: Tensor, k: Intrinsics) -> tuple[Tensor, Tensor]:
    """Differentiable world-frame rays for one camera with rotation (3, 3) and translation (3,)."""
    dirs_cam = Tensor(camera_directions(px, k))
    n = dirs_cam.shape[0]
    dirs = ad.matmul(dirs_cam, rot)  # row-wise R^T d; rotation keeps unit norm
    center = -ad.matmul(ad.reshape(trans, (1, 3)), rot)
    return ad.expand(center, (n, 3)), dirs


# -- field -------------------------------------------------------------------------
@dataclass
class FieldConfig:
    depth: int = 8
    width: int = 64  # full-scale setting: 256
    input_scale: float = 0.25
    dtype: str = "float32"  # MLP arithmetic only; rays, poses and compositing stay float64


class RadianceField:
    """ReLU MLP ``(x, d) -> (sigma, rgb)``; the view direction is concatenated at the input."""

    def __init__(self, params: dict[str, np.ndarray], cfg: FieldConfig):
        self.params = params
        self.cfg = cfg

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: FieldConfig | None = None) -> "RadianceField":
        cfg = cfg or FieldConfig()
        params = {}
        fan_in = 6
        for i in range(cfg.depth):
            bound = np.sqrt(6.0 / fan_in)
            params[f"w{i}"] = rng.uniform(-bound, bound, size=(fan_in, cfg.width))
            params[f"b{i}"] = np.zeros(cfg.width)
            fan_in = cfg.width
        bound = np.sqrt(3.0 / fan_in)
        params["w_sigma"] = rng.uniform(-bound, bound, size=(fan_in, 1))
        params["b_sigma"] = np.full(1, 0.1)
        params["w_rgb"] = rng.uniform(-bound, bound, size=(fan_in, 3))
        params["b_rgb"] = np.zeros(3)
        return cls({k: v.astype(cfg.dtype) for k, v in params.items()}, cfg)

    def copy(self) -> "RadianceField":
        return RadianceField({k: v.copy() for k, v in self.params.items()}, self.cfg)

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def forward(self, points: Tensor, dirs: Tensor, leaves: dict[str, Tensor] | None = None):
        """Points and directions (M, 3) -> sigma (M,), rgb (M, 3)."""
        p = leaves if leaves is not None else self.leaves(False)
        h = ad.concat([points * self.cfg.input_scale, dirs], axis=1)
        out_dtype = h.dtype
        if h.dtype != np.dtype(self.cfg.dtype):
            h = ad.astype(h, self.cfg.dtype)
        for i in range(self.cfg.depth):
            h = ad.relu(ad.linear(h, p[f"w{i}"], p[f"b{i}"]))
        sigma = ad.relu(ad.linear(h, p["w_sigma"], p["b_sigma"]))
        rgb = ad.sigmoid(ad.linear(h, p["w_rgb"], p["b_rgb"]))
        if sigma.dtype != out_dtype:
            sigma, rgb = ad.astype(sigma, out_dtype), ad.astype(rgb, out_dtype)
        return ad.reshape(sigma, (-1,)), rgb


# -- compositing --------------------------------------------------------------------
def composite(sigma: Tensor, rgb: Tensor, delta: float, background) -> tuple[Tensor, Tensor, Tensor]:
    """Alpha-composite (R, S) densities and (R, S, 3) colors sampled at uniform spacing.

    Returns per-ray color (R, 3), accumulated opacity (R,) and the sample
    weights ``T_k alpha_k`` (R, S).
    """
    sigma, rgb = ad.as_tensor(sigma), ad.as_tensor(rgb)
    nr, ns = sigma.shape
    tau = sigma * delta
    acc = ad.cumsum(tau, axis=1)
    trans = ad.exp(-(acc - tau))  # exclusive prefix: T_k = prod_{l<k} (1 - alpha_l)
    alpha = 1.0 - ad.exp(-tau)
    weights = trans * alpha
    t_final = ad.exp(-ad.reshape(acc[:, ns - 1], (nr,)))
    color = ad.sum_(ad.expand(ad.reshape(weights, (nr, ns, 1)), (nr, ns, 3)) * rgb, axis=1)
    bg = Tensor(np.broadcast_to(np.asarray(background, dtype=sigma.dtype), (nr, 3)))
    color = color + ad.expand(ad.reshape(t_final, (nr, 1)), (nr, 3)) * bg
    # 1 - T_final rather than the weight sum: equal in exact arithmetic, and never rounds above 1
    return color, 1.0 - t_final, weights


def render_rays(origins: Tensor, dirs: Tensor, field_: RadianceField, cfg: RenderConfig,
                leaves: dict[str, Tensor] | None = None):
    """Volume-render rays (R, 3) -> color (R, 3), opacity (R,), expected depth (R,)."""
    origins, dirs = ad.as_tensor(origins), ad.as_tensor(dirs)
    nr, ns = origins.shape[0], cfg.n_samples
    depths = cfg.sample_depths()
    o = ad.expand(ad.reshape(origins, (nr, 1, 3)), (nr, ns, 3))
    d = ad.expand(ad.reshape(dirs, (nr, 1, 3)), (nr, ns, 3))
    pts = o + d * Tensor(np.broadcast_to(depths[None, :, None], (nr, ns, 3)))
    sigma, rgb = field_.forward(ad.reshape(pts, (nr * ns, 3)), ad.reshape(d, (nr * ns, 3)), leaves)
    color, opacity, weights = composite(
        ad.reshape(sigma, (nr, ns)), ad.reshape(rgb, (nr, ns, 3)), cfg.delta, cfg.background
    )
    depth = ad.sum_(weights * Tensor(np.broadcast_to(depths, (nr, ns))), axis=1)
    return color, opacity, depth


def render_ray(ray: Ray, field_: RadianceField, cfg: RenderConfig):
    color, opacity, depth = render_rays(Tensor(ray.origin[None]), Tensor(ray.direction[None]), field_, cfg)
    return color.data[0], float(opacity.data[0]), float(depth.data[0])


def render_image(field_: RadianceField, pose: Pose, k: Intrinsics, width: int, height: int,
                 cfg: RenderConfig, chunk: int = 4096) -> np.ndarray:
    """Render an (H, W, 3) image without recording a tape."""
    px = pixel_grid(width, height)
    rot, trans = Tensor(pose.r), Tensor(pose.t)
    out = []
    for s in range(0, len(px), chunk):
        o, d = rays_from_pose(px[s:s + chunk], rot, trans, k)
        out.append(render_rays(o, d, field_, cfg)[0].data)
    return np.concatenate(out).reshape(height, width, 3)


# -- photometric loss -----------------------------------------------------------------
@dataclass
class PixelBatch:
    """Observed pixels: image index, pixel coordinates and color for each ray."""

    image: np.ndarray
    px: np.ndarray
    color: np.ndarray

    def __len__(self):
        return len(self.image)


def sample_pixels(images: list[np.ndarray], image_ids, n_rays: int, rng: np.random.Generator) -> PixelBatch:
    """Uniformly sample ``n_rays`` pixels, spread evenly over the listed images."""
    image_ids = list(image_ids)
    per = np.full(len(image_ids), n_rays // len(image_ids))
    per[: n_rays % len(image_ids)] += 1
    idx, pxs, cols = [], [], []
    for local, count in zip(image_ids, per):
        img = images[local]
        h, w = img.shape[:2]
        flat = rng.integers(0, h * w, size=int(count))
        rows, cols_ = np.divmod(flat, w)
        idx.append(np.full(int(count), local))
        pxs.append(np.stack([cols_ + 0.5, rows + 0.5], axis=1))
        cols.append(img[rows, cols_, :3])
    return PixelBatch(np.concatenate(idx), np.concatenate(pxs), np.concatenate(cols).astype(np.float64))


def photometric_loss(batch: PixelBatch, field_: RadianceField, poses: dict, k: Intrinsics, cfg: RenderConfig,
                     leaves: dict[str, Tensor] | None = None) -> Tensor:
    """Mean per-channel L1 (or squared) color error over the batch.

    ``poses`` maps image index -> ``(rotation Tensor (3, 3), translation Tensor (3,))``.
    Gradients flow to the field leaves and to whatever produced the pose tensors.
    """
    origins, dirs, targets = [], [], []
    for img in np.unique(batch.image):
        sel = batch.image == img
        rot, trans = poses[int(img)]
        o, d = rays_from_pose(batch.px[sel], rot, trans, k)
        origins.append(o)
        dirs.append(d)
        targets.append(batch.color[sel])
    color, _, _ = render_rays(ad.concat(origins, 0), ad.concat(dirs, 0), field_, cfg, leaves)
    diff = color - Tensor(np.concatenate(targets))
    if cfg.loss == "l1":
        return ad.mean(ad.abs_(diff))
    return ad.mean(ad.square(diff))


def pose_tensors(poses: list[Pose]) -> dict:
    return {i: (Tensor(p.r), Tensor(p.t)) for i, p in enumerate(poses)}
