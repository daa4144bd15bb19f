"""First-order adaptive optimizer over a SplatModel's parameter groups."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import SplatModel
from .raster import Gradients

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class LearningRates:
    mu: float = 2e-4
    log_scale: float = 5e-3
    quat: float = 1e-3
    opacity_logit: float = 5e-2
    color: float = 5e-3
    beta_raw: float = 1e-3


def step(model: SplatModel, grads: Gradients,
         lrs: LearningRates = LearningRates()) -> None:
    """Adam-style update in place; quaternions renormalized afterwards.

    Splats with a non-finite gradient in some group skip that group's
    update and are counted in model.skipped_updates.
    """
    model.step_count += 1
    t = model.step_count
    bc1 = 1.0 - BETA1 ** t
    bc2 = 1.0 - BETA2 ** t

    for group in SplatModel.PARAM_GROUPS:
        g = getattr(grads, group)
        p = getattr(model, group)
        finite = np.isfinite(g)
        if g.ndim > 1:
            finite = finite.all(axis=tuple(range(1, g.ndim)))
        n_bad = int((~finite).sum())
        if n_bad:
            model.skipped_updates += n_bad
            g = np.where(finite.reshape((-1,) + (1,) * (g.ndim - 1)), g, 0.0)

        m = model.m[group]
        v = model.v[group]
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        upd = getattr(lrs, group) * (m / bc1) / (np.sqrt(v / bc2) + EPS)
        if g.ndim > 1:
            upd = np.where(finite.reshape(-1, *([1] * (g.ndim - 1))), upd, 0.0)
        else:
            upd = np.where(finite, upd, 0.0)
        p -= upd

    # keep rotations on the unit sphere and colors displayable
    norms = np.linalg.norm(model.quat, axis=1, keepdims=True)
    norms = np.where(norms > 0, norms, 1.0)
    model.quat /= norms
    np.clip(model.color, 0.0, 1.0, out=model.color)
