"""TOML configuration for the reconstruction pipeline.

Every section is optional; omitted keys keep the dataclass defaults.

    [pipeline]   n_nbr, queue_capacity, queue_policy, seed, ...
    [mvs]        stages = [[4, 48, 1.0], ...], ncc_window, temperature, ...
    [fusion]     support_rel_tol, conf_threshold, ...
    [mapper]     psnr_threshold, patch_size, voxel_size, iters_*, window_span
    [optimizer]  per-parameter-group learning rates
    [density]    grad_threshold, prune_opacity, ...
    [loss]       l1, ssim, edge weights
"""

from __future__ import annotations

import dataclasses

from .fileio import load_toml
from .fusion import FusionConfig
from .mapper import MapperConfig
from .mvs import CascadeConfig
from .pipeline import PipelineConfig
from .splats import DensityConfig, LearningRates, LossWeights


def _build(cls, section: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ValueError(f"[{name}] has unknown keys: {sorted(unknown)}")
    return cls(**section)


def config_from_dict(data: dict) -> PipelineConfig:
    pipeline = dict(data.get("pipeline", {}))
    unknown = set(data) - {"pipeline", "mvs", "fusion", "mapper", "optimizer",
                           "density", "loss", "scene"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    mvs_section = dict(data.get("mvs", {}))
    if "stages" in mvs_section:
        mvs_section["stages"] = [tuple(s) for s in mvs_section["stages"]]
    pipeline["mvs"] = _build(CascadeConfig, mvs_section, "mvs")
    pipeline["fusion"] = _build(FusionConfig, data.get("fusion", {}),
                                "fusion")
    pipeline["mapper"] = _build(MapperConfig, data.get("mapper", {}),
                                "mapper")
    pipeline["lrs"] = _build(LearningRates, data.get("optimizer", {}),
                             "optimizer")
    pipeline["density"] = _build(DensityConfig, data.get("density", {}),
                                 "density")
    pipeline["loss_weights"] = _build(LossWeights, data.get("loss", {}),
                                      "loss")
    return _build(PipelineConfig, pipeline, "pipeline")


def load_config(path) -> PipelineConfig:
    return config_from_dict(load_toml(path))
