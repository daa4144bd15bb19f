"""Photometric losses: L1 + (1 - SSIM) + edge-weighted L1, with analytic
per-pixel gradients w.r.t. the rendered image.

SSIM follows the standard formulation: 11x11 Gaussian window (sigma 1.5),
C1 = 0.01^2, C2 = 0.03^2 for unit dynamic range, computed per channel and
averaged over the valid (border-cropped) region. The edge mask is the
normalized absolute difference-of-Gaussians of the target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
DOG_SIGMAS = (1.0, 2.0)


@dataclass
class LossWeights:
    l1: float = 0.8
    ssim: float = 0.2
    edge: float = 0.1


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2
    x = np.arange(size) - half
    k = np.exp(-(x ** 2) / (2 * sigma ** 2))
    k /= k.sum()
    return k


_KERNEL_1D = _gaussian_kernel()


def _filt(img):
    # the Gaussian window is separable: two 1D passes instead of an 11x11
    # 2D correlation
    tmp = ndimage.correlate1d(img, _KERNEL_1D, axis=0, mode="constant",
                              cval=0.0)
    return ndimage.correlate1d(tmp, _KERNEL_1D, axis=1, mode="constant",
                               cval=0.0)


def _ssim_channel(x, y):
    """Per-channel SSIM map plus the pieces needed for the gradient."""
    mx = _filt(x)
    my = _filt(y)
    mxx = _filt(x * x)
    myy = _filt(y * y)
    mxy = _filt(x * y)
    vx = mxx - mx * mx
    vy = myy - my * my
    cxy = mxy - mx * my
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * cxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = vx + vy + SSIM_C2
    S = (A1 * A2) / (B1 * B2)
    return S, (mx, my, A1, A2, B1, B2)


def ssim(x: np.ndarray, y: np.ndarray, grad: bool = False):
    """Mean SSIM over the border-cropped region; channels averaged.

    With grad=True also returns d(mean SSIM)/dx as an image. Both inputs
    are H x W x 3 (or H x W) in [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    pad = SSIM_WINDOW // 2
    h, w, nc = x.shape
    crop = np.zeros((h, w))
    crop[pad:h - pad, pad:w - pad] = 1.0
    n_valid = crop.sum() * nc

    total = 0.0
    gx = np.zeros_like(x) if grad else None
    for ch in range(nc):
        S, (mx, my, A1, A2, B1, B2) = _ssim_channel(x[..., ch], y[..., ch])
        total += (S * crop).sum()
        if grad:
            # S = (A1 A2)/(B1 B2) with A1,B1 functions of mx and A2,B2 of
            # the (co)variances; distribute the cropped mean through the
            # (self-adjoint) Gaussian filter
            wgt = crop / n_valid
            d_A1 = wgt * A2 / (B1 * B2)          # dS/dA1 etc.
            d_A2 = wgt * A1 / (B1 * B2)
            d_B1 = -wgt * S / B1
            d_B2 = -wgt * S / B2
            # A1,B1: via mx; A2: via cxy = mxy - mx my; B2: via vx
            d_mx = 2 * my * d_A1 + 2 * mx * d_B1 - 2 * my * d_A2 - 2 * mx * d_B2
            d_mxy = 2 * d_A2
            d_mxx = d_B2
            xc = x[..., ch]
            yc = y[..., ch]
            gx[..., ch] = (_filt(d_mx) + _filt(d_mxy) * yc
                           + 2 * _filt(d_mxx) * xc)
    mean = total / n_valid
    if grad:
        return mean, gx if nc > 1 else gx[..., 0]
    return mean


def dog_edge_mask(target: np.ndarray) -> np.ndarray:
    """Normalized |difference-of-Gaussians| of the target's gray image."""
    t = np.asarray(target, dtype=np.float64)
    gray = t.mean(axis=2) if t.ndim == 3 else t
    dog = (ndimage.gaussian_filter(gray, DOG_SIGMAS[0])
           - ndimage.gaussian_filter(gray, DOG_SIGMAS[1]))
    mag = np.abs(dog)
    peak = mag.max()
    return mag / peak if peak > 0 else mag


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range, capped 100."""
    mse = float(np.mean((np.asarray(x, dtype=np.float64)
                         - np.asarray(y, dtype=np.float64)) ** 2))
    if mse <= 1e-10:
        return 100.0
    return min(10.0 * np.log10(1.0 / mse), 100.0)


def loss(rendered: np.ndarray, target: np.ndarray,
         weights: LossWeights = LossWeights()):
    """Weighted L1 + (1 - SSIM) + edge-masked L1.

    Returns (scalar, dL/drendered image). `rendered` and `target` are
    H x W x 3 arrays in [0, 1].
    """
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    diff = x - y
    n = diff.size

    l1 = np.abs(diff).mean()
    g_l1 = np.sign(diff) / n

    s, g_s = ssim(x, y, grad=True)

    mask = dog_edge_mask(y)[..., None]
    l_edge = (np.abs(diff) * mask).mean()
    g_edge = np.sign(diff) * mask / n

    total = weights.l1 * l1 + weights.ssim * (1.0 - s) + weights.edge * l_edge
    grad = weights.l1 * g_l1 - weights.ssim * g_s + weights.edge * g_edge
    return float(total), grad
