"""Relative-pose regulation from pixel correspondences.

Targets ``(R_hat, t_hat)`` come from the epipolar chain and are constants for
differentiation. The loss compares them with the relative pose implied by
the current absolute poses; only the translation direction is regulated
because two views carry no metric scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .epipolar import CorrespondenceSet, EpipolarConfig, EpipolarError, Intrinsics, estimate_relative_pose_subset

logger = logging.getLogger(__name__)

TRANSLATION_GUARD = 1e-9


@dataclass
class RelativePoseTarget:
    pair: tuple[int, int]
    r_hat: np.ndarray
    t_hat_dir: np.ndarray
    weight: float = 1.0


def build_targets(pairs, correspondences: dict, intrinsics, rng: np.random.Generator,
                  cfg: EpipolarConfig | None = None) -> tuple[list[RelativePoseTarget], dict]:
    """Estimate one target per pair; failing pairs are dropped with the reason recorded.

    ``intrinsics`` is either one :class:`Intrinsics` shared by all images or a
    mapping from image index to intrinsics. Returns ``(targets, dropped)`` where
    ``dropped`` maps pair -> reason string.
    """
    cfg = cfg or EpipolarConfig()
    targets, dropped = [], {}
    for pair in pairs:
        i, j = pair
        ki = intrinsics if isinstance(intrinsics, Intrinsics) else intrinsics[i]
        kj = intrinsics if isinstance(intrinsics, Intrinsics) else intrinsics[j]
        c: CorrespondenceSet | None = correspondences.get(tuple(pair))
        if c is None:
            dropped[tuple(pair)] = "no correspondences"
            continue
        try:
            est = estimate_relative_pose_subset(c, ki, kj, rng, cfg)
        except (EpipolarError, ValueError) as exc:
            dropped[tuple(pair)] = f"{type(exc).__name__}: {exc}"
            logger.info("regulation pair %s dropped: %s", pair, dropped[tuple(pair)])
            continue
        targets.append(RelativePoseTarget((int(i), int(j)), est.r, est.t_dir))
    return targets, dropped


def regulation_loss(poses: dict, targets: list[RelativePoseTarget], lambda_r: float = 3.0,
                    rotation_norm: str = "l1") -> Tensor:
    """Mean over targets of ``|T/|T| - t_hat|_1 + lambda_r |R_ij - R_hat|``.

    ``poses`` maps image index -> ``(rotation (3, 3), translation (3,))``
    tensors. The rotation term is the elementwise L1 (or Frobenius, with
    ``rotation_norm="fro"``) distance. Translation terms with ``|T_ij|`` below
    1e-9 are skipped since the direction is undefined.
    """
    if not targets:
        return Tensor(np.asarray(0.0))
    terms = []
    for tg in targets:
        i, j = tg.pair
        ri, ti = poses[i]
        rj, tj = poses[j]
        r_ij = ad.matmul(rj, ad.transpose(ri))
        t_ij = tj - ad.reshape(ad.matmul(r_ij, ad.reshape(ti, (3, 1))), (3,))
        diff_r = r_ij - Tensor(tg.r_hat)
        if rotation_norm == "fro":
            rot_term = ad.l2_norm(diff_r)
        else:
            rot_term = ad.l1_norm(diff_r)
        term = lambda_r * rot_term
        norm = ad.l2_norm(t_ij)
        if norm.item() >= TRANSLATION_GUARD:
            term = term + ad.l1_norm(t_ij / ad.expand(norm, (3,)) - Tensor(tg.t_hat_dir))
        terms.append(term * tg.weight)
    return ad.sum_(ad.stack(terms)) / float(len(terms))
