from .model import (Splat, SplatModel, gef_density, inv_sigmoid,
                    inv_softplus, project_splat, sigmoid, softplus)
from .raster import RenderOutput, Gradients, backward, render
from .losses import LossWeights, dog_edge_mask, loss, psnr, ssim
from .optim import LearningRates, step
from .density import DensityConfig, adaptive_density_control

__all__ = [
    "Splat", "SplatModel", "gef_density", "project_splat",
    "sigmoid", "inv_sigmoid", "softplus", "inv_softplus",
    "RenderOutput", "Gradients", "render", "backward",
    "LossWeights", "loss", "ssim", "psnr", "dog_edge_mask",
    "LearningRates", "step",
    "DensityConfig", "adaptive_density_control",
]
