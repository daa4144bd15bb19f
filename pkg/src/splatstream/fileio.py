"""File formats: PFM depth maps, PNG images, PLY splat models."""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

from .geometry import DepthMap, ImageBuffer

# ---------------------------------------------------------------------------
# PFM (single channel, little endian, scale -1.0); rows stored bottom-up


def write_pfm(path, depth: DepthMap) -> None:
    values = depth.values.astype(np.float32)
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(values[::-1].tobytes())


def read_pfm(path) -> DepthMap:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise ValueError(f"not a single-channel PFM file: {header!r}")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(w * h * 4), dtype="<f4" if scale < 0 else ">f4")
    return DepthMap(data.reshape(h, w)[::-1].astype(np.float64))


# ---------------------------------------------------------------------------
# PNG (8-bit sRGB on disk, linear RGB in memory)


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1 / 2.4) - 0.055)


def read_png(path) -> ImageBuffer:
    raw = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return ImageBuffer(_srgb_to_linear(raw))


def write_png(path, image: ImageBuffer) -> None:
    srgb = _linear_to_srgb(np.clip(image.pixels, 0.0, 1.0))
    Image.fromarray(np.rint(srgb * 255).astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# PLY splat export (binary little endian)

PLY_FIELDS = ["x", "y", "z",
              "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3",
              "opacity",
              "red", "green", "blue",
              "beta"]


def write_splat_ply(path, model) -> None:
    """Write a SplatModel; scales are log-scale, opacity is the raw logit."""
    n = len(model)
    rows = np.hstack([
        model.mu,
        model.log_scale,
        model.quat,
        model.opacity_logit[:, None],
        model.color,
        model.beta_raw[:, None],
    ]).astype("<f4")
    with open(path, "wb") as f:
        f.write(b"ply\nformat binary_little_endian 1.0\n")
        f.write(f"element vertex {n}\n".encode())
        for name in PLY_FIELDS:
            f.write(f"property float {name}\n".encode())
        f.write(b"end_header\n")
        f.write(rows.tobytes())


def read_splat_ply(path):
    from .splats.model import SplatModel

    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError("not a PLY file")
        n = None
        names = []
        while True:
            line = f.readline()
            if not line:
                raise ValueError("truncated PLY header")
            parts = line.split()
            if parts[0] == b"element" and parts[1] == b"vertex":
                n = int(parts[2])
            elif parts[0] == b"property":
                names.append(parts[2].decode())
            elif parts[0] == b"end_header":
                break
        if n is None or names != PLY_FIELDS:
            raise ValueError("unexpected PLY layout for a splat model")
        rows = np.frombuffer(f.read(n * len(names) * 4), dtype="<f4")
    rows = rows.reshape(n, len(names)).astype(np.float64)
    model = SplatModel.empty()
    model.append_raw(mu=rows[:, 0:3], log_scale=rows[:, 3:6], quat=rows[:, 6:10],
                     opacity_logit=rows[:, 10], color=rows[:, 11:14],
                     beta_raw=rows[:, 14])
    return model


def load_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    with open(path, "rb") as f:
        return tomllib.load(f)
