"""Multi-view depth fusion and outlier filtering.

A keyframe's MVS depth is refined by pooling candidates from neighboring
keyframes inside a confidence-weighted hypothesis band, scoring each
candidate with per-view visibility counts (support / occlusion / free-space
violation), then filtering by confidence and multi-view geometric
consistency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (INVALID_DEPTH, CameraIntrinsics, ConfidenceMap,
                       DepthMap, Pose, unproject_grid, warp_depth_with)


@dataclass
class FusionConfig:
    support_rel_tol: float = 0.01
    conf_threshold: float = 0.7
    consistency_rel_tol: float = 0.01
    min_consistent_views: int = 3

    def __post_init__(self):
        if self.support_rel_tol <= 0 or self.consistency_rel_tol <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 <= self.conf_threshold <= 1:
            raise ValueError("conf_threshold must lie in [0, 1]")
        if self.min_consistent_views < 1:
            raise ValueError("min_consistent_views must be at least 1")


@dataclass
class VisibilityCounts:
    support: np.ndarray              # (H, W) int
    occlusion: np.ndarray            # (H, W) int
    free_space_violation: np.ndarray  # (H, W) int


def _lookup_in_neighbor(candidate_values, ref_pose: Pose, n_depth: DepthMap,
                        n_pose: Pose, K: CameraIntrinsics):
    """Project candidate depths into a neighbor view and gather its depth.

    Returns (z, d_n, usable): the candidate's depth in the neighbor camera,
    the neighbor's stored depth at the landing pixel, and where both exist.
    """
    h, w = candidate_values.shape
    valid = candidate_values != INVALID_DEPTH
    pts = unproject_grid(np.where(valid, candidate_values, 1.0), K)
    rel = n_pose.inverse().compose(ref_pose)
    pts_n = pts.reshape(-1, 3) @ rel.R.T + rel.t
    z = pts_n[:, 2].reshape(h, w)

    in_front = z > 0
    zs = np.where(in_front, z, 1.0)
    u = K.fx * pts_n[:, 0].reshape(h, w) / zs + K.cx
    v = K.fy * pts_n[:, 1].reshape(h, w) / zs + K.cy
    in_frame = (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
    usable = valid & in_front & in_frame

    # bilinear depth lookup; a pixel is usable only when all four taps are
    # valid, so interpolation never blends across an invalid cell
    uc = np.clip(u, 0, K.width - 1)
    vc = np.clip(v, 0, K.height - 1)
    u0 = np.clip(np.floor(uc).astype(np.int64), 0, K.width - 2)
    v0 = np.clip(np.floor(vc).astype(np.int64), 0, K.height - 2)
    fu = uc - u0
    fv = vc - v0
    taps = [n_depth.values[v0, u0], n_depth.values[v0, u0 + 1],
            n_depth.values[v0 + 1, u0], n_depth.values[v0 + 1, u0 + 1]]
    wgt = [(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv]
    d_n = sum(t * g for t, g in zip(taps, wgt))
    usable &= np.all([t != INVALID_DEPTH for t in taps], axis=0)
    d_n = np.where(usable, d_n, 0.0)
    return z, d_n, usable


def hypothesis_range(D_k: DepthMap, C_k: ConfidenceMap, neighbors):
    """Confidence-weighted depth mean and std per pixel.

    `neighbors` is a list of (DepthMap, ConfidenceMap) already warped into
    the reference view. Pixels with zero total weight get mean = std = 0.
    """
    h, w = D_k.shape
    wsum = np.zeros((h, w))
    dsum = np.zeros((h, w))
    d2sum = np.zeros((h, w))
    for depth, conf in [(D_k, C_k)] + list(neighbors):
        m = depth.valid_mask()
        wgt = np.where(m, conf.values, 0.0)
        wsum += wgt
        dsum += wgt * depth.values
        d2sum += wgt * depth.values ** 2
    ok = wsum > 0
    mean = np.where(ok, dsum / np.where(ok, wsum, 1.0), 0.0)
    var = np.where(ok, d2sum / np.where(ok, wsum, 1.0) - mean ** 2, 0.0)
    std = np.sqrt(np.maximum(var, 0.0))
    return mean, std


def count_visibility(candidate: DepthMap, ref_pose: Pose, neighbors,
                     K: CameraIntrinsics, cfg: FusionConfig) -> VisibilityCounts:
    """Per-pixel support / occlusion / free-space counts against neighbors.

    `neighbors` is a list of (DepthMap, Pose) in their own camera frames.
    """
    h, w = candidate.shape
    support = np.zeros((h, w), dtype=np.int64)
    occlusion = np.zeros((h, w), dtype=np.int64)
    fsv = np.zeros((h, w), dtype=np.int64)
    tol = cfg.support_rel_tol
    for n_depth, n_pose in neighbors:
        z, d_n, usable = _lookup_in_neighbor(candidate.values, ref_pose,
                                             n_depth, n_pose, K)
        dn = np.where(usable, d_n, 1.0)
        support += (usable & (np.abs(z - dn) / dn <= tol)).astype(np.int64)
        occlusion += (usable & (z > dn * (1 + tol))).astype(np.int64)
        fsv += (usable & (z < dn * (1 - tol))).astype(np.int64)
    return VisibilityCounts(support, occlusion, fsv)


def fuse(D_k: DepthMap, C_k: ConfidenceMap, ref_pose: Pose, neighbors,
         K: CameraIntrinsics, cfg: FusionConfig):
    """Fused depth + confidence for one keyframe.

    `neighbors` is a list of (DepthMap, ConfidenceMap, Pose) in their own
    views. Candidates per pixel are the reference depth and each neighbor's
    depth warped into the reference view, restricted to mean +/- 2 std of
    the confidence-weighted hypothesis range; each candidate map is scored
    conf * (1 + support) / (1 + occlusion + free_space_violation) and the
    output is the score-weighted mean. Fused confidence is the best
    surviving score clamped to [0, 1], so any supported, unoccluded
    candidate keeps full confidence regardless of how many neighbors
    happen to observe the pixel.
    """
    if not neighbors:
        raise ValueError("fusion needs at least one neighbor")
    h, w = D_k.shape
    n_views = [(d, p) for d, _, p in neighbors]

    warped = []
    for n_depth, n_conf, n_pose in neighbors:
        wd, wc = warp_depth_with(n_depth, n_conf.values, n_pose, ref_pose, K)
        warped.append((wd, ConfidenceMap(np.clip(wc, 0.0, 1.0))))

    mean, std = hypothesis_range(D_k, C_k, warped)
    lo, hi = mean - 2 * std, mean + 2 * std

    score_sum = np.zeros((h, w))
    depth_sum = np.zeros((h, w))
    best = np.zeros((h, w))
    for depth, conf in [(D_k, C_k)] + warped:
        counts = count_visibility(depth, ref_pose, n_views, K, cfg)
        score = (conf.values * (1.0 + counts.support)
                 / (1.0 + counts.occlusion + counts.free_space_violation))
        ok = (depth.valid_mask() & (depth.values >= lo)
              & (depth.values <= hi) & (score > 0))
        score = np.where(ok, score, 0.0)
        score_sum += score
        depth_sum += score * depth.values
        best = np.maximum(best, score)

    ok = score_sum > 0
    fused = np.where(ok, depth_sum / np.where(ok, score_sum, 1.0), INVALID_DEPTH)
    conf = np.clip(best, 0.0, 1.0)
    conf[~ok] = 0.0
    return DepthMap(fused), ConfidenceMap(conf)


def confidence_filter(D: DepthMap, C: ConfidenceMap,
                      threshold: float) -> DepthMap:
    """Invalidate cells whose confidence is below the threshold."""
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    out = D.values.copy()
    out[C.values < threshold] = INVALID_DEPTH
    return DepthMap(out)


def geometric_consistency_filter(D: DepthMap, ref_pose: Pose, neighbors,
                                 K: CameraIntrinsics,
                                 cfg: FusionConfig) -> DepthMap:
    """Keep depths re-observed consistently by >= min_consistent_views.

    `neighbors` is a list of (DepthMap, Pose); a neighbor agrees at a pixel
    when the relative depth difference at the reprojection is below
    consistency_rel_tol.
    """
    h, w = D.shape
    count = np.zeros((h, w), dtype=np.int64)
    for n_depth, n_pose in neighbors:
        z, d_n, usable = _lookup_in_neighbor(D.values, ref_pose, n_depth,
                                             n_pose, K)
        dn = np.where(usable, d_n, 1.0)
        count += (usable
                  & (np.abs(z - dn) / dn < cfg.consistency_rel_tol)).astype(np.int64)
    out = D.values.copy()
    out[count < cfg.min_consistent_views] = INVALID_DEPTH
    return DepthMap(out)
