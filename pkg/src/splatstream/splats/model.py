"""Generalized exponential splat primitives and the growable scene model.

Each splat is an anisotropic generalized-exponential blob: position mu,
covariance R diag(scale^2) R^T, opacity, RGB color, and a sharpness
exponent beta (beta = 2 is the Gaussian case). Parameters with a
constrained range are stored unconstrained (log-scale, logit opacity,
softplus beta) so optimization is unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, Pose, quat_to_matrix

NEAR_PLANE = 0.01
COV2D_DILATION = 0.3  # pixels^2 added to the diagonal; keeps cov2d invertible


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inv_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 30, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def inv_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30, y, np.log(np.expm1(np.maximum(y, 1e-12))))


@dataclass
class Splat:
    """One splat with raw (unconstrained) parameter storage."""

    mu: np.ndarray            # (3,) meters
    log_scale: np.ndarray     # (3,) log of per-axis std dev
    quat: np.ndarray          # (4,) w,x,y,z; renormalized by the optimizer
    opacity_logit: float
    color: np.ndarray         # (3,) RGB in [0, 1]
    beta_raw: float           # softplus^-1 of the shape exponent

    @property
    def scale(self):
        return np.exp(np.asarray(self.log_scale, dtype=np.float64))

    @property
    def opacity(self):
        return float(sigmoid(np.array(self.opacity_logit)))

    @property
    def beta(self):
        return float(softplus(np.array(self.beta_raw)))

    def covariance(self):
        R = quat_to_matrix(self.quat / np.linalg.norm(self.quat))
        return R @ np.diag(self.scale ** 2) @ R.T


def gef_density(x, s: Splat) -> float:
    """Generalized exponential falloff exp(-(beta/4) Q) at a world point.

    Q is the Mahalanobis distance under the splat's 3D covariance; beta = 2
    reduces to the Gaussian exp(-Q/2).
    """
    d = np.asarray(x, dtype=np.float64) - np.asarray(s.mu, dtype=np.float64)
    Q = d @ np.linalg.solve(s.covariance(), d)
    return float(np.exp(-(s.beta / 4.0) * Q))


def frustum_margin_px(z, sigma_max, opacity, beta, K: CameraIntrinsics):
    """Image-border margin (pixels) outside which a splat cannot contribute.

    Every point whose density clears the 1/255 alpha skip lies within
    sqrt(q_cut)*sigma_max of the mean in 3D; projecting that ball bounds the
    splat's image footprint. The EWA linearization wildly overestimates the
    footprint of splats passing close beside the camera, so this bound (from
    the true 3D extent, with a 1.5x safety factor) is what decides culling.
    """
    q_cut = np.maximum(4.0 / beta * np.log(np.maximum(255.0 * opacity, 1.0)),
                       0.0)
    rho = np.sqrt(q_cut) * sigma_max
    # projection depth of the nearest ball point, floored at z/2 so the
    # margin stays finite (and proportional to the center's own 1/z) even
    # when the ball straddles the camera
    near = np.maximum(z - rho, 0.5 * z)
    return 1.5 * rho * max(K.fx, K.fy) / near


def project_splat(s: Splat, view: Pose, K: CameraIntrinsics):
    """EWA projection of one splat into a camera.

    Returns (mean2d, cov2d, depth) or None when culled: behind the near
    plane, or with the projected mean so far outside the image that no point
    of the splat above the 1/255 alpha level can touch it.
    `view` is the camera-to-world pose of the viewpoint.
    """
    R_cw = view.R.T
    pc = R_cw @ (np.asarray(s.mu, dtype=np.float64) - view.t)
    x, y, z = pc
    if z <= NEAR_PLANE:
        return None
    u = np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])
    margin = frustum_margin_px(z, s.scale.max(), s.opacity, s.beta, K)
    if (u[0] < -margin or u[0] > K.width - 1 + margin
            or u[1] < -margin or u[1] > K.height - 1 + margin):
        return None
    J = np.array([[K.fx / z, 0.0, -K.fx * x / z ** 2],
                  [0.0, K.fy / z, -K.fy * y / z ** 2]])
    M = J @ R_cw
    cov2d = M @ s.covariance() @ M.T + COV2D_DILATION * np.eye(2)
    return u, cov2d, float(z)


class SplatModel:
    """Structure-of-arrays splat container with optimizer + density state."""

    PARAM_GROUPS = ("mu", "log_scale", "quat", "opacity_logit", "color",
                    "beta_raw")

    def __init__(self):
        self.mu = np.zeros((0, 3))
        self.log_scale = np.zeros((0, 3))
        self.quat = np.zeros((0, 4))
        self.opacity_logit = np.zeros(0)
        self.color = np.zeros((0, 3))
        self.beta_raw = np.zeros(0)
        # first/second moment accumulators per parameter group
        self.m = {g: np.zeros_like(getattr(self, g)) for g in self.PARAM_GROUPS}
        self.v = {g: np.zeros_like(getattr(self, g)) for g in self.PARAM_GROUPS}
        self.step_count = 0
        self.skipped_updates = 0
        # densification statistics, reset by adaptive_density_control
        self.pos_grad_sum = np.zeros(0)
        self.obs_count = np.zeros(0, dtype=np.int64)
        self.max_radius_px = np.zeros(0)

    @staticmethod
    def empty() -> "SplatModel":
        return SplatModel()

    def __len__(self):
        return self.mu.shape[0]

    # -- growth -------------------------------------------------------------

    def append_raw(self, mu, log_scale, quat, opacity_logit, color, beta_raw):
        n = np.asarray(mu).shape[0]
        self.mu = np.concatenate([self.mu, np.asarray(mu, dtype=np.float64)])
        self.log_scale = np.concatenate(
            [self.log_scale, np.asarray(log_scale, dtype=np.float64)])
        self.quat = np.concatenate(
            [self.quat, np.asarray(quat, dtype=np.float64)])
        self.opacity_logit = np.concatenate(
            [self.opacity_logit, np.asarray(opacity_logit, dtype=np.float64)])
        self.color = np.concatenate(
            [self.color, np.asarray(color, dtype=np.float64)])
        self.beta_raw = np.concatenate(
            [self.beta_raw, np.asarray(beta_raw, dtype=np.float64)])
        for g in self.PARAM_GROUPS:
            pad = np.zeros((n,) + getattr(self, g).shape[1:])
            self.m[g] = np.concatenate([self.m[g], pad])
            self.v[g] = np.concatenate([self.v[g], pad])
        self.pos_grad_sum = np.concatenate([self.pos_grad_sum, np.zeros(n)])
        self.obs_count = np.concatenate(
            [self.obs_count, np.zeros(n, dtype=np.int64)])
        self.max_radius_px = np.concatenate([self.max_radius_px, np.zeros(n)])

    def append_splats(self, splats):
        if not splats:
            return
        self.append_raw(
            mu=np.array([s.mu for s in splats], dtype=np.float64),
            log_scale=np.array([s.log_scale for s in splats], dtype=np.float64),
            quat=np.array([s.quat for s in splats], dtype=np.float64),
            opacity_logit=np.array([s.opacity_logit for s in splats],
                                   dtype=np.float64),
            color=np.array([s.color for s in splats], dtype=np.float64),
            beta_raw=np.array([s.beta_raw for s in splats], dtype=np.float64))

    def keep(self, mask):
        """Drop splats where mask is False (optimizer state follows)."""
        mask = np.asarray(mask, dtype=bool)
        for g in self.PARAM_GROUPS:
            setattr(self, g, getattr(self, g)[mask])
            self.m[g] = self.m[g][mask]
            self.v[g] = self.v[g][mask]
        self.pos_grad_sum = self.pos_grad_sum[mask]
        self.obs_count = self.obs_count[mask]
        self.max_radius_px = self.max_radius_px[mask]

    def reset_density_stats(self):
        n = len(self)
        self.pos_grad_sum = np.zeros(n)
        self.obs_count = np.zeros(n, dtype=np.int64)
        self.max_radius_px = np.zeros(n)

    # -- derived quantities ---------------------------------------------------

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return sigmoid(self.opacity_logit)

    @property
    def beta(self):
        return softplus(self.beta_raw)

    def get(self, i: int) -> Splat:
        return Splat(mu=self.mu[i].copy(), log_scale=self.log_scale[i].copy(),
                     quat=self.quat[i].copy(),
                     opacity_logit=float(self.opacity_logit[i]),
                     color=self.color[i].copy(),
                     beta_raw=float(self.beta_raw[i]))

    def snapshot(self) -> "SplatModel":
        """Read-only parameter copy for concurrent evaluation."""
        out = SplatModel()
        out.append_raw(self.mu.copy(), self.log_scale.copy(),
                       self.quat.copy(), self.opacity_logit.copy(),
                       self.color.copy(), self.beta_raw.copy())
        return out
