"""Adam over named parameter groups, plus the per-stage learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeMismatch


@dataclass
class AdamState:
    lr: dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    v: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    clip_norm: float | None = None


def step(params: dict[str, dict[str, np.ndarray]], grads: dict[str, dict[str, np.ndarray]],
         state: AdamState, lr_scale: float = 1.0) -> dict[str, dict[str, np.ndarray]]:
    """One bias-corrected Adam update, in place.

    ``params`` and ``grads`` are ``{group: {name: array}}``; a missing gradient
    counts as zero. ``lr_scale`` multiplies every group's learning rate.
    """
    state.step_count += 1
    k = state.step_count
    bc1 = 1.0 - state.beta1**k
    bc2 = 1.0 - state.beta2**k
    for group, tensors in params.items():
        lr = state.lr[group] * lr_scale
        gm = state.m.setdefault(group, {})
        gv = state.v.setdefault(group, {})
        ggrads = grads.get(group, {})
        for name, p in tensors.items():
            g = ggrads.get(name)
            if g is None:
                g = np.zeros_like(p)
            elif g.shape != p.shape:
                raise ShapeMismatch(f"gradient for {group}.{name} has shape {g.shape}, parameter {p.shape}")
            if state.clip_norm is not None:
                n = np.linalg.norm(g)
                if n > state.clip_norm:
                    g = g * (state.clip_norm / n)
            if name not in gm:
                gm[name] = np.zeros_like(p)
                gv[name] = np.zeros_like(p)
            m, v = gm[name], gv[name]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * (g * g)
            p -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params


def lr_factor(iteration: int, total: int, final_ratio: float = 0.1, schedule: str = "exp") -> float:
    """Multiplier decaying exponentially from 1 to ``final_ratio`` over ``total`` iterations."""
    if schedule == "constant" or total <= 1:
        return 1.0
    return float(final_ratio ** (iteration / (total - 1)))
