"""Backend densification and optimization scheduling.

Turns poorly reconstructed image regions into new splats: mask patches whose
rendered PSNR is low (or never-seen pixels), unproject the filtered depths
there into a colored point cloud, thin it with a voxel-grid filter, and
initialize one isotropic splat per surviving point. Also draws the
per-keyframe optimization schedule: half the iterations target a time window
around the current keyframe, half target the whole set so earlier geometry
is not forgotten.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import spatial

from .geometry import CameraIntrinsics, DepthMap, ImageBuffer, Pose, \
    unproject_grid
from .splats import Splat, inv_sigmoid, inv_softplus
from .splats.raster import MIN_ALPHA_THRESHOLD, RenderOutput

INIT_OPACITY = 0.1
INIT_BETA = 2.0


@dataclass
class PointCloud:
    """Colored world-space points."""

    positions: np.ndarray  # (N, 3) meters
    colors: np.ndarray     # (N, 3) RGB in [0, 1]

    def __post_init__(self):
        self.positions = np.asarray(self.positions,
                                    dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.positions.shape != self.colors.shape:
            raise ValueError("positions and colors must pair up")
        if self.positions.size and not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")

    def __len__(self):
        return self.positions.shape[0]

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))


@dataclass
class MapperConfig:
    psnr_threshold: float = 40.0   # dB; patches below this are unexplored
    patch_size: int = 16
    voxel_size: float = 0.005      # meters
    iters_window: int = 500
    iters_global: int = 500
    window_span: int = 10          # keyframes on each side of the current one
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.iters_window < 0 or self.iters_global < 0:
            raise ValueError("iteration counts must be non-negative")

    @property
    def iters_per_keyframe(self) -> int:
        return self.iters_window + self.iters_global


def _patch_psnr(err2: np.ndarray, patch: int) -> np.ndarray:
    """Per-patch PSNR of an H x W mean-squared-error image, capped 100 dB."""
    h, w = err2.shape
    ny = -(-h // patch)
    nx = -(-w // patch)
    out = np.empty((ny, nx))
    for py in range(ny):
        for px in range(nx):
            mse = err2[py * patch:(py + 1) * patch,
                       px * patch:(px + 1) * patch].mean()
            out[py, px] = 100.0 if mse <= 1e-10 else min(
                10.0 * np.log10(1.0 / mse), 100.0)
    return out


def unexplored_mask(original: ImageBuffer, rendered: RenderOutput,
                    cfg: MapperConfig = MapperConfig()) -> np.ndarray:
    """Boolean H x W mask of image regions the model does not yet explain.

    The image is tiled into patch_size^2 patches; every pixel of a patch
    whose PSNR against the render falls below the threshold is marked, as is
    every pixel with near-zero rendered coverage.
    """
    if original.shape != rendered.color.shape:
        raise ValueError("resolution mismatch")
    err2 = ((original.pixels - rendered.color.pixels) ** 2).mean(axis=2)
    patch_db = _patch_psnr(err2, cfg.patch_size)
    low = patch_db < cfg.psnr_threshold
    h, w = err2.shape
    mask = np.repeat(np.repeat(low, cfg.patch_size, axis=0),
                     cfg.patch_size, axis=1)[:h, :w]
    return mask | (rendered.alpha < MIN_ALPHA_THRESHOLD)


def extract_points(depth: DepthMap, image: ImageBuffer, mask: np.ndarray,
                   pose: Pose, K: CameraIntrinsics) -> PointCloud:
    """Unproject every valid masked depth pixel into a world-space point."""
    take = depth.valid_mask() & np.asarray(mask, dtype=bool)
    if not take.any():
        return PointCloud.empty()
    cam = unproject_grid(depth.values, K)[take]
    return PointCloud(pose.to_world(cam), image.pixels[take])


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """One point per occupied voxel: the centroid of its members.

    Output voxels appear in order of first occurrence, so the result is
    deterministic for a given input ordering.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if len(cloud) == 0:
        return PointCloud.empty()
    keys = np.floor(cloud.positions / voxel_size).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True,
                                  return_inverse=True)
    # renumber groups by first occurrence to keep the input order
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    groups = rank[inverse]
    n = order.size
    counts = np.bincount(groups, minlength=n).astype(np.float64)
    pos = np.zeros((n, 3))
    col = np.zeros((n, 3))
    for axis in range(3):
        pos[:, axis] = np.bincount(groups, cloud.positions[:, axis], n)
        col[:, axis] = np.bincount(groups, cloud.colors[:, axis], n)
    return PointCloud(pos / counts[:, None], col / counts[:, None])


def init_splats(cloud: PointCloud, voxel_size: float = 0.005) -> list[Splat]:
    """One isotropic splat per point: beta = 2, identity rotation.

    The per-point scale is half the nearest-neighbor distance within the
    cloud, clamped to [voxel_size/2, 10*voxel_size], so neighboring splats
    roughly tile the sampled surface.
    """
    n = len(cloud)
    if n == 0:
        return []
    if n == 1:
        nn = np.array([2.0 * voxel_size])
    else:
        tree = spatial.cKDTree(cloud.positions)
        dist, _ = tree.query(cloud.positions, k=2)
        nn = dist[:, 1]
    scale = np.clip(0.5 * nn, 0.5 * voxel_size, 10.0 * voxel_size)
    opacity_logit = float(inv_sigmoid(np.array(INIT_OPACITY)))
    beta_raw = float(inv_softplus(np.array(INIT_BETA)))
    return [Splat(mu=cloud.positions[i].copy(),
                  log_scale=np.full(3, np.log(scale[i])),
                  quat=np.array([1.0, 0.0, 0.0, 0.0]),
                  opacity_logit=opacity_logit,
                  color=cloud.colors[i].copy(),
                  beta_raw=beta_raw)
            for i in range(n)]


def schedule_iterations(current_k: int, all_keyframes,
                        cfg: MapperConfig = MapperConfig()) -> np.ndarray:
    """Keyframe index per optimization iteration for one integration round.

    The first iters_window entries sample keyframes within window_span of
    the current one; the rest sample the entire set. Seeded per keyframe,
    so schedules are reproducible.
    """
    indices = np.asarray([int(k) for k in all_keyframes], dtype=np.int64)
    if indices.size == 0:
        raise ValueError("need at least one keyframe")
    rng = np.random.default_rng((cfg.seed, current_k))
    near = indices[np.abs(indices - current_k) <= cfg.window_span]
    if near.size == 0:
        near = indices
    windowed = rng.choice(near, size=cfg.iters_window, replace=True)
    global_ = rng.choice(indices, size=cfg.iters_global, replace=True)
    return np.concatenate([windowed, global_])
