"""Adaptive density control: clone/split high-gradient splats, prune weak ones."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import SplatModel, quat_to_matrix


@dataclass
class DensityConfig:
    grad_threshold: float = 1e-5     # mean image-space positional gradient
    prune_opacity: float = 0.005     # effective opacity below which to prune
    max_radius_px: float = 256.0     # prune screen-space giants
    split_scale: float = 0.02        # meters; larger splats split, smaller clone
    split_shrink: float = 1.6
    seed: int = 0


def adaptive_density_control(model: SplatModel,
                             cfg: DensityConfig = DensityConfig()) -> None:
    """Clone small / split large high-gradient splats, then prune, in place.

    Split children are sampled from the parent's own distribution and
    shrunk by cfg.split_shrink; statistics reset afterwards.
    """
    n = len(model)
    if n == 0:
        return
    rng = np.random.default_rng((cfg.seed, model.step_count))

    seen = model.obs_count > 0
    mean_grad = np.where(seen, model.pos_grad_sum
                         / np.maximum(model.obs_count, 1), 0.0)
    dense = seen & (mean_grad > cfg.grad_threshold)
    max_scale = np.exp(model.log_scale).max(axis=1)
    clone = dense & (max_scale <= cfg.split_scale)
    split = dense & (max_scale > cfg.split_scale)

    new = {g: [] for g in SplatModel.PARAM_GROUPS}

    if clone.any():
        for g in SplatModel.PARAM_GROUPS:
            new[g].append(getattr(model, g)[clone].copy())

    if split.any():
        idx = np.flatnonzero(split)
        mus, log_scales = [], []
        for i in idx:
            R = quat_to_matrix(model.quat[i] / np.linalg.norm(model.quat[i]))
            s = np.exp(model.log_scale[i])
            # antithetic pair from the parent's own distribution: the two
            # children preserve the parent's mean position exactly
            d = (rng.normal(size=3) * s) @ R.T
            samples = np.stack([model.mu[i] + d, model.mu[i] - d])
            mus.append(samples)
            log_scales.append(np.tile(model.log_scale[i]
                                      - np.log(cfg.split_shrink), (2, 1)))
        reps = {"mu": np.concatenate(mus),
                "log_scale": np.concatenate(log_scales)}
        for g in SplatModel.PARAM_GROUPS:
            if g in reps:
                new[g].append(reps[g])
            else:
                new[g].append(np.repeat(getattr(model, g)[idx], 2, axis=0))
        # the parent is replaced by its two children
    keep_mask = ~split

    if any(len(v) for v in new.values()):
        model.append_raw(**{g: np.concatenate(new[g]) for g in
                            SplatModel.PARAM_GROUPS})
        keep_mask = np.concatenate(
            [keep_mask, np.ones(len(model) - n, dtype=bool)])
    model.keep(keep_mask)

    prune = (model.opacity < cfg.prune_opacity) \
        | (model.max_radius_px > cfg.max_radius_px)
    if prune.any():
        model.keep(~prune)
    model.reset_density_stats()
