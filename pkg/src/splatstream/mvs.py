"""Plane-sweep multi-view stereo with a cascaded coarse-to-fine structure.

Matching uses windowed normalized cross-correlation against the neighboring
keyframes; depth and confidence are read out of each cost volume with a
temperature softmax that combines expectation depth with a classification
style reliability score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import (CameraIntrinsics, ConfidenceMap, DepthMap, ImageBuffer,
                       Pose, unproject_grid)

MIN_DEPTH = 0.01
TEXTURELESS_STD = 1e-4


class InsufficientViewsError(RuntimeError):
    pass


class NoPriorError(RuntimeError):
    pass


@dataclass(frozen=True)
class CascadeStage:
    scale: int          # resolution divisor
    hypotheses: int
    narrowing: float    # multiplies the relative half-range of the stage


@dataclass
class CascadeConfig:
    stages: list = field(default_factory=lambda: [
        CascadeStage(4, 48, 1.0),
        CascadeStage(2, 16, 0.33),
        CascadeStage(1, 8, 0.15),
    ])
    ncc_window: int = 7
    stage1_rel_range: float = 0.4
    # NCC cost bowls are shallow; a soft temperature smears the expectation
    # across the whole range, so the default is much sharper than 0.1
    temperature: float = 0.005
    # median window applied to each stage's depth (1 disables); suppresses
    # isolated coarse-stage outliers that a narrowed range cannot recover
    smooth_size: int = 9
    # restrict the expectation to hypotheses within this index radius of the
    # cost argmin (None = full softmax); confidence always uses the full one
    readout_radius: int | None = 1

    def __post_init__(self):
        self.stages = [s if isinstance(s, CascadeStage) else CascadeStage(*s)
                       for s in self.stages]
        if self.ncc_window % 2 != 1:
            raise ValueError("ncc_window must be odd")
        scales = [s.scale for s in self.stages]
        if any(a < b for a, b in zip(scales, scales[1:])):
            raise ValueError("stage scale divisors must be non-increasing")
        if any(s.hypotheses < 2 for s in self.stages):
            raise ValueError("each stage needs at least 2 hypotheses")
        if any(not (0 < s.narrowing <= 1) for s in self.stages):
            raise ValueError("narrowing factors must lie in (0, 1]")
        if self.smooth_size < 1 or self.smooth_size % 2 != 1:
            raise ValueError("smooth_size must be a positive odd integer")


@dataclass
class CostVolume:
    costs: np.ndarray       # (H, W, D) in [0, 2]
    hypotheses: np.ndarray  # (H, W, D) strictly increasing along D

    def __post_init__(self):
        if self.hypotheses.shape[-1] < 2:
            raise ValueError("need at least 2 hypotheses")
        if not np.all(np.diff(self.hypotheses, axis=-1) > 0):
            raise ValueError("hypotheses must be strictly increasing")
        if not np.all(np.isfinite(self.costs)):
            raise ValueError("costs must be finite")


@dataclass(frozen=True)
class View:
    """Minimal posed image, the unit MVS consumes."""
    image: ImageBuffer
    pose: Pose
    index: int = 0


def select_sources(k: int, buffer_indices, n_nbr: int) -> list[int]:
    """The up-to-n_nbr keyframe indices immediately before and after k."""
    present = sorted(buffer_indices)
    if not present:
        raise ValueError("empty keyframe buffer")
    before = [i for i in present if i < k][-n_nbr:]
    after = [i for i in present if i > k][:n_nbr]
    return before + after


def _downsample(values: np.ndarray, divisor: int) -> np.ndarray:
    if divisor == 1:
        return values
    h, w = values.shape[:2]
    h2, w2 = h // divisor, w // divisor
    v = values[:h2 * divisor, :w2 * divisor]
    shape = (h2, divisor, w2, divisor) + v.shape[2:]
    return v.reshape(shape).mean(axis=(1, 3))


def _downsample_nearest(values: np.ndarray, divisor: int) -> np.ndarray:
    if divisor == 1:
        return values
    off = divisor // 2
    return values[off::divisor, off::divisor]


def _upsample_nearest(values: np.ndarray, out_shape) -> np.ndarray:
    h, w = values.shape
    ratio_h = out_shape[0] // h
    ratio_w = out_shape[1] // w
    return np.repeat(np.repeat(values, ratio_h, axis=0), ratio_w, axis=1)


def _sample_bilinear(image: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Bilinear sample with NaN outside the frame."""
    return ndimage.map_coordinates(image, [v, u], order=1, mode="constant",
                                   cval=np.nan, prefilter=False)


def _ncc_cost(ref_gray, src_gray, u, v, in_front, window):
    """Per-pixel 1 - NCC between the reference and a warped source view.

    The source is resampled at the reprojection (u, v) and correlation is
    aggregated over a `window` box; pixels without a usable sample get the
    uninformative cost 1.
    """
    warped = _sample_bilinear(src_gray, u, v)
    valid = np.isfinite(warped) & in_front
    s = np.where(valid, warped, 0.0)
    vf = valid.astype(np.float64)

    size = (window, window)
    n = ndimage.uniform_filter(vf, size)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu_r = ndimage.uniform_filter(ref_gray * vf, size) / n
        mu_s = ndimage.uniform_filter(s, size) / n
        var_r = ndimage.uniform_filter(ref_gray ** 2 * vf, size) / n - mu_r ** 2
        var_s = ndimage.uniform_filter(s ** 2, size) / n - mu_s ** 2
        cov = ndimage.uniform_filter(ref_gray * s, size) / n - mu_r * mu_s
        sd_r = np.sqrt(np.maximum(var_r, 0.0))
        sd_s = np.sqrt(np.maximum(var_s, 0.0))
        ncc = cov / (sd_r * sd_s)

    textured = (sd_r > TEXTURELESS_STD) & (sd_s > TEXTURELESS_STD)
    usable = valid & textured & (n > 0.5) & np.isfinite(ncc)
    cost = np.where(usable, 1.0 - ncc, 1.0)
    return np.clip(cost, 0.0, 2.0)


def build_cost_volume(ref, sources, K: CameraIntrinsics,
                      hypotheses: np.ndarray, cfg: CascadeConfig) -> CostVolume:
    """Mean (1 - NCC) matching cost over all source views.

    `ref` and each source expose .image, .pose and .index (see View);
    hypotheses is (H, W, D) per-pixel depths, front-to-back.
    """
    if not sources:
        raise InsufficientViewsError("insufficient views: no sources")
    sources = sorted(sources, key=lambda s: s.index)

    ref_gray = ref.image.gray()
    h, w, d = hypotheses.shape
    costs = np.zeros((h, w, d))

    src_data = []
    for src in sources:
        rel = src.pose.inverse().compose(ref.pose)
        src_data.append((src.image.gray(), rel.R, rel.t))

    rays = unproject_grid(np.ones((h, w)), K)  # unit-depth rays
    for di in range(d):
        depth = hypotheses[:, :, di]
        pts_ref = rays * depth[..., None]
        acc = np.zeros((h, w))
        for src_gray, R, t in src_data:
            pts = pts_ref @ R.T + t
            z = pts[..., 2]
            in_front = z > MIN_DEPTH
            zs = np.where(in_front, z, 1.0)
            u = K.fx * pts[..., 0] / zs + K.cx
            v = K.fy * pts[..., 1] / zs + K.cy
            acc += _ncc_cost(ref_gray, src_gray, u, v, in_front,
                             cfg.ncc_window)
        costs[:, :, di] = acc / len(src_data)

    return CostVolume(costs=costs, hypotheses=hypotheses)


def extract_depth_confidence(vol: CostVolume, temperature: float,
                             readout_radius: int | None = None):
    """Temperature softmax readout: expectation depth plus the maximum
    probability mass inside any 3-hypothesis window as confidence.

    With `readout_radius` the expectation is taken only over hypotheses
    within that index distance of the per-pixel cost argmin, which keeps a
    multi-modal cost curve from dragging the depth between its modes; the
    confidence is always computed from the full distribution.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = -vol.costs / temperature
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)

    if readout_radius is None:
        pe = p
    else:
        am = np.argmin(vol.costs, axis=-1)
        near = np.abs(np.arange(vol.costs.shape[-1])[None, None, :]
                      - am[..., None]) <= readout_radius
        pe = np.where(near, p, 0.0)
        pe = pe / pe.sum(axis=-1, keepdims=True)
    depth = (pe * vol.hypotheses).sum(axis=-1)

    padded = np.pad(p, [(0, 0), (0, 0), (1, 1)])
    windows = padded[:, :, :-2] + padded[:, :, 1:-1] + padded[:, :, 2:]
    conf = np.clip(windows.max(axis=-1), 0.0, 1.0)
    return DepthMap(depth), ConfidenceMap(conf)


def cascade_estimate(ref, sources, prior: DepthMap, K: CameraIntrinsics,
                     cfg: CascadeConfig):
    """Coarse-to-fine depth + confidence for a reference view.

    Stage 1 centers per-pixel hypothesis ranges on the prior; each later
    stage recenters on a median-smoothed copy of the previous stage's depth
    and shrinks the relative range by its narrowing factor. The returned
    depth carries the same smoothing (confidence is returned unsmoothed).
    """
    prior_mask = prior.valid_mask()
    if not prior_mask.any():
        raise NoPriorError("no prior: the prior depth map is entirely invalid")
    lo, hi = prior.values[prior_mask].min(), prior.values[prior_mask].max()

    rel_half = cfg.stage1_rel_range
    depth = conf = smoothed = None
    for si, stage in enumerate(cfg.stages):
        Ks = K.scaled(stage.scale)
        ref_s = View(ImageBuffer(_downsample(ref.image.pixels, stage.scale)),
                     ref.pose, getattr(ref, "index", 0))
        srcs_s = [View(ImageBuffer(_downsample(s.image.pixels, stage.scale)),
                       s.pose, getattr(s, "index", i))
                  for i, s in enumerate(sources)]

        if si == 0:
            c = _downsample_nearest(prior.values, stage.scale).astype(np.float64).copy()
            c[c == 0] = 0.5 * (lo + hi)
            rel_half = cfg.stage1_rel_range * stage.narrowing
        else:
            c = _upsample_nearest(smoothed, (Ks.height, Ks.width))
            rel_half = rel_half * stage.narrowing

        half = rel_half * c
        d = stage.hypotheses
        steps = np.linspace(0.0, 1.0, d)
        hyp = (c - half)[..., None] + (2 * half)[..., None] * steps
        hyp = np.maximum(hyp, MIN_DEPTH)
        # keep per-pixel hypotheses strictly increasing after the clamp
        eps = 1e-6
        hyp = np.maximum.accumulate(hyp + eps * np.arange(d), axis=-1)

        vol = build_cost_volume(ref_s, srcs_s, Ks, hyp, cfg)
        depth, conf = extract_depth_confidence(vol, cfg.temperature,
                                               cfg.readout_radius)
        smoothed = depth.values
        if cfg.smooth_size > 1:
            smoothed = ndimage.median_filter(smoothed, size=cfg.smooth_size)

    return DepthMap(smoothed), conf
