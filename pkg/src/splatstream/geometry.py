"""Pinhole cameras, rigid-body poses, and cross-view depth warping.

Conventions (fixed globally): +z forward, +x right, +y down; poses are
camera-to-world; depth maps use 0 as the invalid sentinel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

INVALID_DEPTH = 0.0


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n <= 0:
        raise ValueError("zero-norm quaternion")
    return q / n


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return quat_normalize(q)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def scaled(self, divisor: int) -> "CameraIntrinsics":
        """Intrinsics for an image block-downsampled by an integer divisor.

        Output pixel i covers input pixels [i*d, (i+1)*d), so its center sits
        at input coordinate i*d + (d-1)/2.
        """
        d = divisor
        return CameraIntrinsics(
            fx=self.fx / d, fy=self.fy / d,
            cx=(self.cx - (d - 1) / 2) / d, cy=(self.cy - (d - 1) / 2) / d,
            width=self.width // d, height=self.height // d)

    def matrix(self):
        return np.array([[self.fx, 0, self.cx],
                         [0, self.fy, self.cy],
                         [0, 0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform (unit quaternion + translation)."""

    q: np.ndarray  # (4,) w,x,y,z, unit norm
    t: np.ndarray  # (3,) meters

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @staticmethod
    def from_matrix(T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return Pose(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Pose") -> "Pose":
        return Pose(quat_multiply(self.q, other.q), self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        qinv = quat_conjugate(self.q)
        return Pose(qinv, -(quat_to_matrix(qinv) @ self.t))

    def to_world(self, points_cam: np.ndarray) -> np.ndarray:
        return points_cam @ self.R.T + self.t

    def to_camera(self, points_world: np.ndarray) -> np.ndarray:
        return (points_world - self.t) @ self.R


@dataclass
class DepthMap:
    """H x W depth in meters; invalid cells hold exactly 0."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        bad = self.values[self.values != INVALID_DEPTH]
        if bad.size and (not np.all(np.isfinite(bad)) or np.any(bad < 0)):
            raise ValueError("valid depths must be positive and finite")

    @property
    def shape(self):
        return self.values.shape

    def valid_mask(self) -> np.ndarray:
        return self.values != INVALID_DEPTH

    def copy(self) -> "DepthMap":
        return DepthMap(self.values.copy())


@dataclass
class ConfidenceMap:
    """H x W confidence in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("confidence values must lie in [0, 1]")

    @property
    def shape(self):
        return self.values.shape

    def copy(self) -> "ConfidenceMap":
        return ConfidenceMap(self.values.copy())


@dataclass
class ImageBuffer:
    """H x W x 3 linear RGB in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("expected an H x W x 3 buffer")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError("channels must lie in [0, 1]")

    @property
    def shape(self):
        return self.pixels.shape

    def gray(self) -> np.ndarray:
        return self.pixels.mean(axis=2)


# ---------------------------------------------------------------------------
# projection


def project(point_camera, K: CameraIntrinsics):
    """Pinhole projection of one camera-space point.

    Returns (pixel, depth) or None when the point falls outside the frustum
    (z <= 0 or pixel outside [0, width) x [0, height)).
    """
    x, y, z = point_camera
    if z <= 0:
        return None
    u = K.fx * x / z + K.cx
    v = K.fy * y / z + K.cy
    if not (0 <= u < K.width and 0 <= v < K.height):
        return None
    return np.array([u, v]), float(z)


def unproject(pixel, depth: float, K: CameraIntrinsics) -> np.ndarray:
    if depth <= 0:
        raise ValueError("depth must be positive")
    u, v = pixel
    return np.array([(u - K.cx) / K.fx * depth,
                     (v - K.cy) / K.fy * depth,
                     depth])


def project_points(points_cam: np.ndarray, K: CameraIntrinsics):
    """Vectorized projection. Returns (pixels Nx2, depth N, in_frustum N)."""
    points_cam = np.asarray(points_cam, dtype=np.float64)
    z = points_cam[:, 2]
    safe_z = np.where(z > 0, z, 1.0)
    u = K.fx * points_cam[:, 0] / safe_z + K.cx
    v = K.fy * points_cam[:, 1] / safe_z + K.cy
    ok = (z > 0) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    return np.stack([u, v], axis=1), z, ok


def unproject_grid(depth_values: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Camera-space points for every cell of an H x W depth array (H, W, 3)."""
    h, w = depth_values.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    x = (u - K.cx) / K.fx * depth_values
    y = (v - K.cy) / K.fy * depth_values
    return np.stack([x, y, depth_values], axis=2)


def warp_depth(src: DepthMap, src_pose: Pose, dst_pose: Pose,
               K: CameraIntrinsics) -> DepthMap:
    warped, _ = warp_depth_with(src, None, src_pose, dst_pose, K)
    return warped


def warp_depth_with(src: DepthMap, aux: np.ndarray | None, src_pose: Pose,
                    dst_pose: Pose, K: CameraIntrinsics):
    """Scatter a source depth map into a destination view.

    Each valid source pixel is unprojected, moved into the destination
    camera, and written to the nearest destination cell; collisions keep the
    nearer depth. `aux` optionally carries a per-pixel payload (e.g. a
    confidence map) alongside the winning depth.
    """
    h, w = src.shape
    mask = src.valid_mask()
    if not mask.any():
        return DepthMap(np.zeros((h, w))), (np.zeros((h, w)) if aux is not None else None)

    pts_cam = unproject_grid(src.values, K)[mask]
    rel = dst_pose.inverse().compose(src_pose)
    pts_dst = pts_cam @ rel.R.T + rel.t
    pixels, z, _ = project_points(pts_dst, K)
    ok = z > 0  # bounds are checked on the rounded cell index below

    ui = np.rint(pixels[ok, 0]).astype(np.int64)
    vi = np.rint(pixels[ok, 1]).astype(np.int64)
    zk = z[ok]
    keep = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    ui, vi, zk = ui[keep], vi[keep], zk[keep]

    out = np.full((h, w), np.inf)
    np.minimum.at(out, (vi, ui), zk)

    warped_aux = None
    if aux is not None:
        src_aux = np.asarray(aux)[mask][ok][keep]
        warped_aux = np.zeros((h, w))
        # second pass: carry the payload of the depth that won the z-buffer
        winners = zk == out[vi, ui]
        warped_aux[vi[winners], ui[winners]] = src_aux[winners]

    out[~np.isfinite(out)] = INVALID_DEPTH
    return DepthMap(out), warped_aux
