"""Per-frame pose updates: the implicit filter network and its ablation variants.

The filter maps learnable motion embeddings (one shared global row plus one
local row per frame) through an 8-layer ReLU MLP with an additive skip around
the middle layer to an (N, 6) twist matrix. In ``direct`` mode the twists are
themselves the learnable parameters.

Updates are applied either on the group (``SE3``: ``P <- exp(d) . P``) or in
the tangent space (``se3``: ``P <- exp(log(P) + d)``).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .liegroup import Pose, exp_map, log_map

PARAMETERIZATIONS = ("direct", "implicit_local", "implicit_local_global")
DOMAINS = ("SE3", "se3")
CHECKPOINT_MAGIC = b"rapf-v1\n"


@dataclass(frozen=True)
class UpdateMode:
    parameterization: str = "implicit_local_global"
    domain: str = "SE3"

    def __post_init__(self):
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}, got {self.parameterization!r}")
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {self.domain!r}")


@dataclass
class FilterConfig:
    embed_dim: int = 64  # full-scale setting: 256
    hidden: int = 64  # full-scale setting: 256
    layers: int = 8
    skip_layer: int = 4  # skip connection wraps this (1-based) layer
    embed_std: float = 1e-2  # N(0, 1e-4) variance


class PoseFilter:
    """Learnable state producing one twist per frame of the current stage."""

    def __init__(self, n_frames: int, mode: UpdateMode, cfg: FilterConfig, params: dict[str, np.ndarray]):
        self.n_frames = n_frames
        self.mode = mode
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, n_frames: int, mode: UpdateMode, rng: np.random.Generator,
             cfg: FilterConfig | None = None) -> "PoseFilter":
        cfg = cfg or FilterConfig()
        if mode.parameterization == "direct":
            return cls(n_frames, mode, cfg, {"twist": np.zeros((n_frames, 6))})
        d, h = cfg.embed_dim, cfg.hidden
        params = {
            "global": rng.normal(0.0, cfg.embed_std, size=(1, d)),
            "local": rng.normal(0.0, cfg.embed_std, size=(n_frames, d)),
        }
        fan_in = 2 * d
        for i in range(cfg.layers):
            bound = np.sqrt(6.0 / fan_in)
            params[f"w{i}"] = rng.uniform(-bound, bound, size=(fan_in, h))
            params[f"b{i}"] = np.zeros(h)
            fan_in = h
        params["w_out"] = np.zeros((h, 6))  # zero head: a fresh filter is an exact no-op
        params["b_out"] = np.zeros(6)
        return cls(n_frames, mode, cfg, params)

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def forward(self, leaves: dict[str, Tensor] | None = None) -> Tensor:
        p = leaves if leaves is not None else self.leaves(False)
        if self.mode.parameterization == "direct":
            return p["twist"]
        n = self.n_frames
        glob = p["global"]
        if self.mode.parameterization == "implicit_local":
            glob = Tensor(np.zeros(glob.shape))
        return filter_forward(glob, p["local"], p, self.cfg, n)

    def checkpoint_bytes(self) -> bytes:
        return save_checkpoint_bytes(self)


def filter_forward(glob: Tensor, local: Tensor, p: dict[str, Tensor], cfg: FilterConfig, n: int) -> Tensor:
    """Rows ``MLP(concat(global, local_i))`` -> (N, 6)."""
    if glob.shape != (1, cfg.embed_dim) or local.shape != (n, cfg.embed_dim):
        raise ad.ShapeMismatch(f"embeddings {glob.shape}, {local.shape} for N={n}, D={cfg.embed_dim}")
    h = ad.concat([ad.expand(glob, (n, cfg.embed_dim)), local], axis=1)
    skip = None
    for i in range(cfg.layers):
        if i == cfg.skip_layer - 1:
            skip = h
        h = ad.relu(ad.linear(h, p[f"w{i}"], p[f"b{i}"]))
        if i == cfg.skip_layer - 1 and skip.shape == h.shape:
            h = h + skip
    return ad.linear(h, p["w_out"], p["b_out"])


# -- applying twists ---------------------------------------------------------------
def _skew_batch(w: Tensor) -> Tensor:
    n = w.shape[0]
    zero = Tensor(np.zeros(n, dtype=w.dtype))
    wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]
    rows = [ad.stack([zero, -wz, wy], 1), ad.stack([wz, zero, -wx], 1), ad.stack([-wy, wx, zero], 1)]
    return ad.stack(rows, 1)


def exp_map_tensor(x: Tensor) -> tuple[Tensor, Tensor]:
    """Batched differentiable twist exponential: (N, 6) -> rotations (N, 3, 3), translations (N, 3)."""
    n = x.shape[0]
    t, w = x[:, 0:3], x[:, 3:6]
    wx = _skew_batch(w)
    wx2 = ad.matmul(wx, wx)
    a, b, c = ad.rodrigues_coefficients(ad.sum_(ad.square(w), axis=1))

    def bcast(s):
        return ad.expand(ad.reshape(s, (n, 1, 1)), (n, 3, 3))

    eye = Tensor(np.broadcast_to(np.eye(3), (n, 3, 3)))
    rot = eye + bcast(a) * wx + bcast(b) * wx2
    v = eye + bcast(b) * wx + bcast(c) * wx2
    trans = ad.reshape(ad.matmul(v, ad.reshape(t, (n, 3, 1))), (n, 3))
    return rot, trans


def apply_update_tensor(base: list[Pose], delta: Tensor, mode: UpdateMode) -> tuple[Tensor, Tensor]:
    """Updated poses as tensors on the tape: rotations (N, 3, 3), translations (N, 3)."""
    n = len(base)
    if delta.shape != (n, 6):
        raise ad.ShapeMismatch(f"twists {delta.shape} for {n} poses")
    if mode.domain == "se3":
        logs = Tensor(np.stack([log_map(p) for p in base]))
        return exp_map_tensor(logs + delta)
    rd, td = exp_map_tensor(delta)
    rb = Tensor(np.stack([p.r for p in base]))
    tb = Tensor(np.stack([p.t for p in base]))
    rot = ad.matmul(rd, rb)
    trans = ad.reshape(ad.matmul(rd, ad.reshape(tb, (n, 3, 1))), (n, 3)) + td
    return rot, trans


def apply_update(base: list[Pose], delta: np.ndarray, mode: UpdateMode) -> list[Pose]:
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (len(base), 6):
        raise ad.ShapeMismatch(f"twists {delta.shape} for {len(base)} poses")
    if mode.domain == "se3":
        return [exp_map(log_map(p) + d) for p, d in zip(base, delta)]
    return [exp_map(d) @ p for p, d in zip(base, delta)]


def reinitialize(filt: PoseFilter, rng: np.random.Generator, n_frames: int | None = None) -> PoseFilter:
    return PoseFilter.init(filt.n_frames if n_frames is None else n_frames, filt.mode, rng, filt.cfg)


# -- checkpoint format ----------------------------------------------------------------
def save_checkpoint_bytes(filt: PoseFilter) -> bytes:
    """``rapf-v1``: magic, u32 header length, JSON header, then little-endian float64 arrays."""
    names = sorted(filt.params)
    header = {
        "mode": {"parameterization": filt.mode.parameterization, "domain": filt.mode.domain},
        "n_frames": filt.n_frames,
        "config": vars(filt.cfg),
        "arrays": [{"name": k, "shape": list(filt.params[k].shape)} for k in names],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for k in names:
        buf.write(np.ascontiguousarray(filt.params[k], dtype="<f8").tobytes())
    return buf.getvalue()


def load_checkpoint_bytes(blob: bytes) -> PoseFilter:
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a rapf-v1 checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off:off + hlen])
    off += hlen
    params = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"]))
        params[spec["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(spec["shape"]).copy()
        off += 8 * count
    if off != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return PoseFilter(header["n_frames"], UpdateMode(**header["mode"]), FilterConfig(**header["config"]), params)


def save_checkpoint(path, filt: PoseFilter) -> None:
    Path(path).write_bytes(save_checkpoint_bytes(filt))


def load_checkpoint(path) -> PoseFilter:
    return load_checkpoint_bytes(Path(path).read_bytes())
