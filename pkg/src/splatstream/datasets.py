"""Synthetic ray-cast scenes with exact ground truth, and TUM-format loading."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import (CameraIntrinsics, DepthMap, ImageBuffer, Pose,
                       matrix_to_quat)

ASSOCIATION_TOLERANCE = 0.02  # seconds, TUM toolkit convention


def _hash01(ix, iy, iz, salt):
    """Deterministic lattice hash -> uniform [0, 1) per integer cell."""
    h = (ix * np.uint32(374761393) + iy * np.uint32(668265263)
         + iz * np.uint32(2246822519) + np.uint32(salt))
    h ^= h >> np.uint32(13)
    h *= np.uint32(1274126177)
    h ^= h >> np.uint32(16)
    return h.astype(np.float64) / 4294967296.0


def _value_noise(p: np.ndarray, salt: int) -> np.ndarray:
    """Trilinear value noise in [-1, 1] on the unit integer lattice."""
    i = np.floor(p).astype(np.int64).astype(np.uint32)
    f = p - np.floor(p)
    f = f * f * (3.0 - 2.0 * f)  # smoothstep fade
    ix, iy, iz = i[..., 0], i[..., 1], i[..., 2]
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    one = np.uint32(1)
    c000 = _hash01(ix, iy, iz, salt)
    c100 = _hash01(ix + one, iy, iz, salt)
    c010 = _hash01(ix, iy + one, iz, salt)
    c110 = _hash01(ix + one, iy + one, iz, salt)
    c001 = _hash01(ix, iy, iz + one, salt)
    c101 = _hash01(ix + one, iy, iz + one, salt)
    c011 = _hash01(ix, iy + one, iz + one, salt)
    c111 = _hash01(ix + one, iy + one, iz + one, salt)
    x00 = c000 + (c100 - c000) * fx
    x10 = c010 + (c110 - c010) * fx
    x01 = c001 + (c101 - c001) * fx
    x11 = c011 + (c111 - c011) * fx
    y0 = x00 + (x10 - x00) * fy
    y1 = x01 + (x11 - x01) * fy
    return 2.0 * (y0 + (y1 - y0) * fz) - 1.0


@dataclass
class SequenceFrame:
    timestamp: float
    pose: Pose
    image: ImageBuffer | None = None
    image_path: str | None = None
    depth: DepthMap | None = None

    def load_image(self) -> ImageBuffer:
        if self.image is None:
            from .fileio import read_png
            self.image = read_png(self.image_path)
        return self.image


# ---------------------------------------------------------------------------
# scene geometry


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    hollow: bool = False  # hollow boxes are seen from inside (room walls)

    def intersect(self, origin, dirs):
        """First-hit distance per ray (inf where missed).

        Rays are origin + t * dirs; dirs are unnormalized with unit
        camera-z so t equals z-depth.
        """
        with np.errstate(divide="ignore", invalid="ignore"):
            lo = (self.lo - origin) / dirs
            hi = (self.hi - origin) / dirs
        tmin = np.minimum(lo, hi).max(axis=-1)
        tmax = np.maximum(lo, hi).min(axis=-1)
        if self.hollow:
            t = tmax
            hit = tmax > 1e-9
        else:
            t = tmin
            hit = (tmin <= tmax) & (tmin > 1e-9)
        return np.where(hit, t, np.inf)


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def intersect(self, origin, dirs):
        oc = origin - self.center
        a = (dirs * dirs).sum(axis=-1)
        b = 2.0 * (dirs * oc).sum(axis=-1)
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t = (-b - sq) / (2 * a)
        hit = ok & (t > 1e-9)
        return np.where(hit, t, np.inf)


@dataclass
class SyntheticScene:
    objects: list
    trajectory: str = "orbit"  # or "dolly"
    frames: int = 60
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(220.0, 220.0, 128.0, 128.0, 256, 256))
    orbit_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orbit_radius: float = 1.2
    orbit_span_deg: float = 360.0
    dolly_step: float = 0.05
    seed: int = 0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        n = len(self.objects)
        self._bases = rng.uniform(0.3, 0.7, size=(n, 3))
        self._salts = rng.integers(1, 2 ** 31, size=(n, 3))

    # -- texturing ---------------------------------------------------------

    def shade(self, obj_idx: int, points: np.ndarray) -> np.ndarray:
        """Procedural color for hit points of one object (N, 3) -> (N, 3)."""
        checker = (np.floor(points / 0.35).sum(axis=-1) % 2)
        rgb = np.empty(points.shape)
        octaves = [(0.40, 0.16), (0.13, 0.12), (0.045, 0.08), (0.015, 0.10)]
        for ch in range(3):
            s = np.zeros(points.shape[:-1])
            for cell, amp in octaves:
                s += amp * _value_noise(points / cell,
                                        int(self._salts[obj_idx, ch]))
            rgb[..., ch] = (self._bases[obj_idx, ch]
                            + 0.12 * (2 * checker - 1) + s)
        return np.clip(rgb, 0.0, 1.0)

    # -- trajectory --------------------------------------------------------

    def pose(self, i: int) -> Pose:
        if self.trajectory == "orbit":
            theta = np.deg2rad(self.orbit_span_deg) * i / self.frames
            pos = self.orbit_center + self.orbit_radius * np.array(
                [np.cos(theta), 0.0, np.sin(theta)])
            pos = pos + np.array([0.0, 0.05 * np.sin(3 * theta), 0.0])
            forward = np.array([np.cos(theta), 0.0, np.sin(theta)])
        elif self.trajectory == "dolly":
            pos = self.orbit_center + np.array([0.0, 0.0, self.dolly_step * i])
            forward = np.array([0.0, 0.0, 1.0])
        else:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        down = np.array([0.0, 1.0, 0.0])
        right = np.cross(down, forward)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=1)
        return Pose(matrix_to_quat(R), pos)

    # -- rendering ---------------------------------------------------------

    def _trace(self, pose: Pose, u, v):
        """First-hit distance and object id for rays through pixel (u, v)."""
        K = self.intrinsics
        dirs_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy,
                             np.ones_like(u)], axis=-1)
        dirs = dirs_cam @ pose.R.T
        t_best = np.full(u.shape, np.inf)
        idx_best = np.full(u.shape, -1, dtype=np.int64)
        for i, obj in enumerate(self.objects):
            t = obj.intersect(pose.t, dirs)
            closer = t < t_best
            t_best = np.where(closer, t, t_best)
            idx_best = np.where(closer, i, idx_best)
        return t_best, idx_best, dirs

    def _shade_hits(self, pose, t_best, idx_best, dirs):
        depth = np.where(np.isfinite(t_best), t_best, 0.0)
        rgb = np.zeros(t_best.shape + (3,))
        points = pose.t + dirs * depth[..., None]
        for i in range(len(self.objects)):
            sel = idx_best == i
            if sel.any():
                rgb[sel] = self.shade(i, points[sel])
        return rgb, depth

    def raycast(self, pose: Pose) -> tuple[ImageBuffer, DepthMap]:
        K = self.intrinsics
        # depth is the exact center-ray hit; color is 2x2 supersampled so
        # fine texture stays consistent across views instead of aliasing
        v, u = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
        t, idx, dirs = self._trace(pose, u, v)
        _, depth = self._shade_hits(pose, t, idx, dirs)

        v2, u2 = np.mgrid[0:2 * K.height, 0:2 * K.width].astype(np.float64)
        u2 = u2 / 2.0 - 0.25
        v2 = v2 / 2.0 - 0.25
        t2, idx2, dirs2 = self._trace(pose, u2, v2)
        rgb2, _ = self._shade_hits(pose, t2, idx2, dirs2)
        rgb = rgb2.reshape(K.height, 2, K.width, 2, 3).mean(axis=(1, 3))
        return ImageBuffer(np.clip(rgb, 0.0, 1.0)), DepthMap(depth)


def generate(scene: SyntheticScene) -> list[SequenceFrame]:
    frames = []
    for i in range(scene.frames):
        pose = scene.pose(i)
        image, depth = scene.raycast(pose)
        frames.append(SequenceFrame(timestamp=float(i) / 30.0, pose=pose,
                                    image=image, depth=depth))
    return frames


def default_room_scene(frames: int = 60, resolution: int = 256,
                       seed: int = 0, span_deg: float | None = None) -> SyntheticScene:
    """Textured 4 x 4 x 3 m room with two interior objects, interior orbit."""
    f = 220.0 * resolution / 256.0
    room = Box(lo=np.array([-2.0, -1.5, -2.0]), hi=np.array([2.0, 1.5, 2.0]),
               hollow=True)
    crate = Box(lo=np.array([1.0, 0.4, -1.5]), hi=np.array([1.7, 1.5, -0.8]))
    ball = Sphere(center=np.array([-1.35, 0.9, 1.1]), radius=0.45)
    return SyntheticScene(
        objects=[room, crate, ball],
        trajectory="orbit",
        frames=frames,
        intrinsics=CameraIntrinsics(f, f, resolution / 2.0, resolution / 2.0,
                                    resolution, resolution),
        orbit_radius=1.2,
        orbit_span_deg=6.0 * frames if span_deg is None else span_deg,
        seed=seed,
    )


def scene_from_toml(path) -> SyntheticScene:
    from .fileio import load_toml

    cfg = load_toml(path)
    sc = cfg.get("scene", {})
    kind = sc.get("kind", "room")
    if kind != "room":
        raise ValueError(f"unknown scene kind {kind!r}")
    return default_room_scene(frames=sc.get("frames", 60),
                              resolution=sc.get("resolution", 256),
                              seed=sc.get("seed", 0),
                              span_deg=sc.get("span_deg"))


# ---------------------------------------------------------------------------
# TUM RGB-D format


def _parse_tum_file(path, n_fields):
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != n_fields:
                raise ValueError(f"{path}:{lineno}: expected {n_fields} fields, "
                                 f"got {len(parts)}")
            try:
                rows.append((float(parts[0]), parts[1:]))
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    return rows


def load_tum(directory) -> tuple[list[SequenceFrame], int]:
    """Load a TUM RGB-D sequence (RGB + ground-truth poses only).

    Returns (frames, dropped) where dropped counts RGB frames without a
    pose within the association tolerance.
    """
    rgb_path = os.path.join(directory, "rgb.txt")
    gt_path = os.path.join(directory, "groundtruth.txt")
    for p in (rgb_path, gt_path):
        if not os.path.exists(p):
            raise FileNotFoundError(p)

    rgb = _parse_tum_file(rgb_path, 2)
    gt = _parse_tum_file(gt_path, 8)
    gt_times = np.array([t for t, _ in gt])

    frames, dropped = [], 0
    for t, (rel,) in rgb:
        i = int(np.argmin(np.abs(gt_times - t)))
        if abs(gt_times[i] - t) > ASSOCIATION_TOLERANCE:
            dropped += 1
            continue
        vals = [float(x) for x in gt[i][1]]
        tx, ty, tz, qx, qy, qz, qw = vals
        pose = Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))
        frames.append(SequenceFrame(timestamp=t, pose=pose,
                                    image_path=os.path.join(directory, rel)))
    return frames, dropped
