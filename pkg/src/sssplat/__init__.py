"""Differentiable 3D Gaussian splatting with a neural subsurface-scattering
residual: OLAT reconstruction, relighting and material editing."""

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (OlatDataset, generate_light_stage, load_dataset,
                      synthesize_ground_truth)
from .mlp import MlpParams
from .model import SubsurfaceSplatModel
from .pipeline import RenderOptions, render
from .projection import RasterConfig
from .relight import (MaterialEdit, ReflectanceField, build_reflectance_field,
                      ibl_compose, render_olat, sample_envmap, tone_map)
from .scene import Aabb, Camera, Gaussian, GaussianCloud, PointLight, Scene
from .shading import ShadingConfig
from .train import LossWeights, TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "Aabb", "Camera", "Gaussian", "GaussianCloud", "LossWeights",
    "MaterialEdit", "MlpParams", "OlatDataset", "PointLight", "RasterConfig",
    "ReflectanceField", "RenderOptions", "Scene", "ShadingConfig",
    "SubsurfaceSplatModel", "TrainConfig", "Trainer",
    "build_reflectance_field", "generate_light_stage", "ibl_compose",
    "load_checkpoint", "load_dataset", "render", "render_olat",
    "sample_envmap", "save_checkpoint", "synthesize_ground_truth",
    "tone_map", "train",
]
