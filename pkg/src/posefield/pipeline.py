"""Incremental scheduler: initialization, localization, partial and global optimization.

Each stage minimizes ``L = L_p + gate * lambda_f * L_f`` where ``gate`` is 1
in initialization/localization and 0 in the optimization stages. Field
weights persist across stages; the pose filter and Adam state are rebuilt at
every stage start.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .epipolar import CorrespondenceSet, EpipolarConfig, Intrinsics
from .liegroup import Pose, rotation_to_quaternion
from .optim import AdamState, lr_factor, step
from .posefilter import FilterConfig, PoseFilter, UpdateMode, apply_update, apply_update_tensor
from .radiance import FieldConfig, RadianceField, RenderConfig, photometric_loss, sample_pixels
from .regulation import RelativePoseTarget, build_targets, regulation_loss

logger = logging.getLogger(__name__)

STAGES = ("init", "localize", "partial", "global")


class PipelineError(RuntimeError):
    pass


class InsufficientImages(PipelineError):
    pass


class NoCorrespondences(PipelineError):
    pass


@dataclass
class Schedule:
    xi_init: int = 3100
    xi_loc: int = 1100
    xi_part: int = 3100
    xi_glob: int = 3100
    n_init: int = 2
    n_loc: int = 2
    n_part: int = 5
    n_glob: int = 5
    lambda_f: float = 0.1
    lambda_r: float = 3.0
    lr: float = 1e-3  # 5e-4 at the full iteration budget
    divisor: int = 10  # desk scale; 1 restores the full iteration counts

    def __post_init__(self):
        for name in ("xi_init", "xi_loc", "xi_part", "xi_glob", "n_part", "n_glob", "divisor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_init < 2 or self.n_loc < 2:
            raise ValueError("n_init and n_loc must be >= 2")
        if self.lambda_f < 0 or self.lambda_r < 0 or self.lr <= 0:
            raise ValueError("loss weights must be >= 0 and lr > 0")

    def iterations(self, stage: str) -> int:
        xi = {"init": self.xi_init, "localize": self.xi_loc, "partial": self.xi_part, "global": self.xi_glob}[stage]
        return max(1, int(round(xi / self.divisor)))


@dataclass
class PipelineConfig:
    schedule: Schedule = field(default_factory=Schedule)
    render: RenderConfig = field(default_factory=RenderConfig)
    field_cfg: FieldConfig = field(default_factory=FieldConfig)
    filter_cfg: FilterConfig = field(default_factory=FilterConfig)
    epipolar: EpipolarConfig = field(default_factory=EpipolarConfig)
    mode: UpdateMode = field(default_factory=UpdateMode)
    regulation: bool = True
    rotation_norm: str = "l1"
    lr_field: float | None = None  # None: schedule.lr
    lr_filter: float | None = None
    # filter lr in partial/global stages; photometric-only refinement drifts the poses at the full rate
    lr_filter_refine: float | None = 1e-5
    lr_final_ratio: float = 0.1
    lr_schedule: str = "exp"
    target_pool: int = 16
    log_every: int = 10
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["render"]["background"] = list(self.render.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        sub = {
            "schedule": Schedule, "render": RenderConfig, "field_cfg": FieldConfig,
            "filter_cfg": FilterConfig, "epipolar": EpipolarConfig, "mode": UpdateMode,
        }
        kw = {}
        for key, value in d.items():
            if key in sub:
                kw[key] = sub[key](**value)
            elif key in cls.__dataclass_fields__:
                kw[key] = value
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(**kw)


@dataclass
class PipelineState:
    poses: list[Pose]
    field_: RadianceField
    rng: np.random.Generator
    stage: str = "none"
    stage_index: int = 0
    iteration: int = 0  # global iteration counter across stages
    filter_: PoseFilter | None = None
    adam: AdamState | None = None
    targets: dict = field(default_factory=dict)  # pair -> list of RelativePoseTarget (or reason str)

    @property
    def registered(self) -> int:
        return len(self.poses)


@dataclass
class RunResult:
    poses: list[Pose]
    field_: RadianceField
    stage_log: list[dict]
    filter_: PoseFilter | None


def _pose_record(p: Pose) -> list[float]:
    c = p.center()
    q = rotation_to_quaternion(p.r.T)
    return [float(v) for v in (*c, *q)]


class Pipeline:
    """Drives the four stages over a list of images.

    ``correspondences`` maps ordered pairs ``(i, j)`` with ``i < j`` to
    matches; pairs not present are treated as having no matches. ``emit``
    receives every event record (a JSON-serializable dict).
    """

    def __init__(self, images: list[np.ndarray], intrinsics: Intrinsics, correspondences: dict,
                 cfg: PipelineConfig | None = None, emit: Callable[[dict], None] | None = None):
        self.images = [np.asarray(img, dtype=np.float64) for img in images]
        self.k = intrinsics
        self.matches: dict[tuple[int, int], CorrespondenceSet] = {tuple(p): c for p, c in correspondences.items()}
        self.cfg = cfg or PipelineConfig()
        self.emit = emit or (lambda rec: None)
        self.stage_log: list[dict] = []

    # -- state ---------------------------------------------------------------------
    def new_state(self) -> PipelineState:
        rng = np.random.default_rng(self.cfg.seed)
        field_ = RadianceField.init(rng, self.cfg.field_cfg)
        return PipelineState([], field_, rng)

    # -- regulation targets ----------------------------------------------------------
    def _pair_targets(self, state: PipelineState, pair: tuple[int, int]) -> list[RelativePoseTarget] | str:
        """Pool of subset estimates for one pair, computed once per run and cycled by iteration."""
        if pair in state.targets:
            return state.targets[pair]
        c = self.matches.get(pair)
        if c is None:
            state.targets[pair] = "no correspondences"
            return state.targets[pair]
        pool, reason = [], None
        for slot in range(self.cfg.target_pool):
            rng = np.random.default_rng([self.cfg.seed, pair[0], pair[1], slot])
            got, dropped = build_targets([pair], {pair: c}, self.k, rng, self.cfg.epipolar)
            pool.extend(got)
            if dropped:
                reason = dropped[pair]
        state.targets[pair] = pool if pool else (reason or "no estimate")
        return state.targets[pair]

    def _regulation_pairs(self, state: PipelineState, pairs) -> list[tuple[int, int]]:
        usable = []
        for pair in pairs:
            pool = self._pair_targets(state, pair)
            if isinstance(pool, str):
                self._event(state, {"event": "pair_dropped", "pair": list(pair), "reason": pool})
            else:
                usable.append(pair)
        return usable

    # -- events ------------------------------------------------------------------------
    def _event(self, state: PipelineState, rec: dict) -> None:
        base = {"stage": state.stage, "stage_index": state.stage_index}
        base.update(rec)
        self.emit(base)

    # -- the stage loop -------------------------------------------------------------------
    def _optimize(self, state: PipelineState, stage: str, frames: list[int], trainable: list[int],
                  pairs: list[tuple[int, int]], gate: int) -> dict:
        cfg, sch = self.cfg, self.cfg.schedule
        state.stage = stage
        state.stage_index += 1
        iters = sch.iterations(stage)
        n = len(frames)
        base = [state.poses[i] for i in frames]
        state.filter_ = PoseFilter.init(n, cfg.mode, state.rng, cfg.filter_cfg)
        lr_field = cfg.lr_field if cfg.lr_field is not None else sch.lr
        lr_filter = cfg.lr_filter if cfg.lr_filter is not None else sch.lr
        if stage in ("partial", "global") and cfg.lr_filter_refine is not None:
            lr_filter = cfg.lr_filter_refine
        state.adam = AdamState(lr={"field": lr_field, "filter": lr_filter})
        mask = np.zeros((n, 6))
        for i in trainable:
            mask[frames.index(i)] = 1.0
        mask_t = Tensor(mask)
        pairs = self._regulation_pairs(state, pairs) if (gate and cfg.regulation) else []
        self._event(state, {"event": "stage_start", "frames": frames, "trainable": trainable,
                            "pairs": [list(p) for p in pairs], "iterations": iters})

        first_lp = last_lp = None
        delta_np = np.zeros((n, 6))
        for it in range(iters):
            fl = state.field_.leaves()
            pl = state.filter_.leaves()
            delta = state.filter_.forward(pl) * mask_t
            rot, trans = apply_update_tensor(base, delta, cfg.mode)
            poses_t = {img: (rot[k], trans[k]) for k, img in enumerate(frames)}
            batch = sample_pixels(self.images, frames, cfg.render.batch_rays, state.rng)
            lp = photometric_loss(batch, state.field_, poses_t, self.k, cfg.render, fl)
            loss, lf_val = lp, None
            if pairs:
                # one pooled estimate per pair, cycled by iteration
                targets = [state.targets[pair][it % len(state.targets[pair])] for pair in pairs]
                lf = regulation_loss(poses_t, targets, sch.lambda_r, cfg.rotation_norm)
                lf_val = float(lf.data)
                loss = lp + lf * (sch.lambda_f * gate)
            tape = ad.backward(loss)
            del tape
            grads = {
                "field": {k: v.grad for k, v in fl.items() if v.grad is not None},
                "filter": {k: v.grad for k, v in pl.items() if v.grad is not None},
            }
            params = {"field": state.field_.params, "filter": state.filter_.params}
            step(params, grads, state.adam, lr_factor(it, iters, cfg.lr_final_ratio, cfg.lr_schedule))
            state.iteration += 1
            lp_val = float(lp.data)
            if first_lp is None:
                first_lp = lp_val
            last_lp = lp_val
            if it % cfg.log_every == 0 or it == iters - 1:
                current = dict(enumerate(state.poses))
                delta_np = state.filter_.forward().data * mask
                for img, p in zip(frames, self._commit_preview(base, delta_np, trainable, frames)):
                    current[img] = p
                self._event(state, {"event": "iter", "iteration": it, "global_iteration": state.iteration,
                                    "L_p": lp_val, "L_f": lf_val,
                                    "poses": {str(i): _pose_record(p) for i, p in sorted(current.items())}})

        delta_np = state.filter_.forward().data * mask
        for img, p in zip(frames, self._commit_preview(base, delta_np, trainable, frames)):
            state.poses[img] = p
        summary = {"stage": stage, "stage_index": state.stage_index, "frames": frames,
                   "iterations": iters, "L_p_first": first_lp, "L_p_last": last_lp}
        self.stage_log.append(summary)
        self._event(state, {"event": "stage_end", "L_p_first": first_lp, "L_p_last": last_lp})
        return summary

    def _commit_preview(self, base: list[Pose], delta: np.ndarray, trainable: list[int], frames: list[int]):
        updated = apply_update(base, delta, self.cfg.mode)
        # frozen frames keep their exact pose; se3 round trips are not bit-exact
        return [updated[k] if img in trainable else base[k] for k, img in enumerate(frames)]

    # -- stages -------------------------------------------------------------------------
    def initialize(self, state: PipelineState) -> dict:
        n = self.cfg.schedule.n_init
        if len(self.images) < n:
            raise InsufficientImages(f"initialization needs {n} images, got {len(self.images)}")
        state.poses = [Pose.identity() for _ in range(n)]
        frames = list(range(n))
        pairs = [(i, j) for j in frames for i in frames if i < j]
        return self._optimize(state, "init", frames, frames, pairs, gate=1)

    def localize(self, state: PipelineState, new: int) -> dict:
        n_loc = self.cfg.schedule.n_loc
        if state.registered < n_loc or new != state.registered:
            raise InsufficientImages(f"localizing image {new} needs {n_loc} registered predecessors")
        anchors = list(range(new - n_loc, new))
        state.poses.append(state.poses[new - 1])
        pairs = [(a, new) for a in anchors]
        if self.cfg.regulation and all(isinstance(self._pair_targets(state, p), str) for p in pairs):
            raise NoCorrespondences(f"image {new}: every anchor pair is degenerate")
        return self._optimize(state, "localize", anchors + [new], [new], pairs, gate=1)

    def optimize_partial(self, state: PipelineState) -> dict:
        window = partial_window(state.registered, self.cfg.schedule.n_part)
        return self._optimize(state, "partial", window, window, [], gate=0)

    def optimize_global(self, state: PipelineState) -> dict:
        frames = list(range(state.registered))
        return self._optimize(state, "global", frames, frames, [], gate=0)

    def run(self, state: PipelineState | None = None) -> RunResult:
        if len(self.images) < 2:
            raise InsufficientImages("need at least 2 images")
        state = state or self.new_state()
        self._guard(state, "init", None, lambda: self.initialize(state))
        sch = self.cfg.schedule
        for new in range(sch.n_init, len(self.images)):
            self._guard(state, "localize", new, lambda: self.localize(state, new))
            self._guard(state, "partial", new, lambda: self.optimize_partial(state))
            if (new + 1 - sch.n_init) % sch.n_glob == 0:
                self._guard(state, "global", new, lambda: self.optimize_global(state))
        self._event(state, {"event": "run_end", "registered": state.registered,
                            "poses": {str(i): _pose_record(p) for i, p in enumerate(state.poses)}})
        return RunResult(list(state.poses), state.field_, self.stage_log, state.filter_)

    @staticmethod
    def _guard(state: PipelineState, stage: str, image: int | None, fn):
        try:
            return fn()
        except PipelineError as exc:
            if image is None:
                raise
            raise type(exc)(f"image {image}, stage {stage}: {exc}") from exc
        except Exception as exc:
            where = "initialization" if image is None else f"image {image}"
            raise PipelineError(f"{where}, stage {stage}: {type(exc).__name__}: {exc}") from exc


def partial_window(registered: int, n_part: int) -> list[int]:
    """Indices of the newest ``min(n_part, registered)`` registered images."""
    return list(range(max(0, registered - n_part), registered))


def event_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, allow_nan=True)


def identity_baseline(n: int) -> list[Pose]:
    return [Pose.identity() for _ in range(n)]
