"""Post-training applications: novel relighting, material editing,
reflectance fields and image-based lighting.

The reflectance field is the stack of unit-intensity renders, one per
stage light, for a fixed camera; environment relighting is a linear
combination of that basis weighted by the environment's energy around
each light direction (spherical Voronoi binning).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .dataset import LightStage
from .mlp import MlpParams
from .pipeline import RenderOptions, render
from .projection import RasterConfig
from .scene import Camera, PointLight, Scene
from .shading import ShadingConfig

_SCALARS = ("roughness", "metalness", "subsurfaceness")


@dataclass
class MaterialEdit:
    """Attribute overrides applied before compositing.

    ``*_set`` fields replace a value outright, ``*_scale`` fields multiply;
    results are re-clamped to the attribute's declared range.  Set-type
    overrides are idempotent.
    """

    basecolor_tint: tuple | None = None  # per-channel multiplier
    roughness_set: float | None = None
    roughness_scale: float | None = None
    metalness_set: float | None = None
    metalness_scale: float | None = None
    subsurfaceness_set: float | None = None
    subsurfaceness_scale: float | None = None
    residual_tint: tuple | None = None
    residual_intensity: float | None = None
    opacity_scale: float | None = None

    def is_identity(self) -> bool:
        return all(getattr(self, f.name) is None for f in fields(self))

    def apply(self, basecolor, roughness, metalness, subsurfaceness,
              residual, incident, opacity):
        basecolor = basecolor.copy()
        roughness = roughness.copy()
        metalness = metalness.copy()
        subsurfaceness = subsurfaceness.copy()
        residual = residual.copy()
        opacity = opacity.copy()
        if self.basecolor_tint is not None:
            basecolor *= np.asarray(self.basecolor_tint, dtype=np.float64)
        scalars = {"roughness": roughness, "metalness": metalness,
                   "subsurfaceness": subsurfaceness}
        for name in _SCALARS:
            if getattr(self, f"{name}_set") is not None:
                scalars[name][:] = float(getattr(self, f"{name}_set"))
            if getattr(self, f"{name}_scale") is not None:
                scalars[name] *= float(getattr(self, f"{name}_scale"))
        if self.residual_tint is not None:
            residual *= np.asarray(self.residual_tint, dtype=np.float64)
        if self.residual_intensity is not None:
            residual *= float(self.residual_intensity)
        if self.opacity_scale is not None:
            opacity *= float(self.opacity_scale)
        basecolor = np.clip(basecolor, 0.0, 1.0)
        roughness = np.clip(roughness, 0.0, 1.0)
        metalness = np.clip(metalness, 0.0, 1.0)
        subsurfaceness = np.clip(subsurfaceness, 0.0, 1.0)
        residual = np.clip(residual, 0.0, 1.0)
        opacity = np.clip(opacity, 0.0, 1.0 - 1e-6)
        return (basecolor, roughness, metalness, subsurfaceness, residual,
                incident, opacity)

    @classmethod
    def from_strings(cls, items) -> "MaterialEdit":
        """Parse repeated ``key=value`` CLI arguments."""
        kw = {}
        valid = {f.name for f in fields(cls)}
        for item in items or []:
            if "=" not in item:
                raise ValueError(f"edit must be key=value, got {item!r}")
            key, value = item.split("=", 1)
            key = key.strip()
            if key not in valid:
                raise ValueError(f"unknown edit field {key!r}; "
                                 f"choose from {sorted(valid)}")
            if key.endswith("_tint"):
                kw[key] = tuple(float(x) for x in value.split(","))
            else:
                kw[key] = float(value)
        return cls(**kw)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if getattr(self, f.name) is not None}

    @classmethod
    def from_dict(cls, d: dict | None) -> "MaterialEdit":
        if not d:
            return cls()
        valid = {f.name for f in fields(cls)}
        unknown = set(d) - valid
        if unknown:
            raise ValueError(f"unknown edit fields {sorted(unknown)}")
        kw = {k: (tuple(v) if k.endswith("_tint") and v is not None else v)
              for k, v in d.items()}
        return cls(**kw)


def render_olat(scene: Scene, params: MlpParams, camera: Camera,
                light: PointLight, edit: MaterialEdit | None = None,
                raster_cfg: RasterConfig | None = None,
                shading_cfg: ShadingConfig | None = None,
                options: RenderOptions | None = None,
                background=None):
    """Relight from any light position (stage-bound or free) with optional
    material edits; returns the linear RGB image."""
    if edit is not None and edit.is_identity():
        edit = None
    result = render(scene, params, camera, light, raster_cfg, shading_cfg,
                    options, background=background, want_grad=False,
                    edit=edit)
    return result.image


@dataclass
class ReflectanceField:
    basis: np.ndarray  # (L, H, W, 3) linear, unit light intensity
    alpha: np.ndarray  # (H, W)
    light_positions: np.ndarray  # (L, 3)

    def __post_init__(self):
        if len(self.basis) != len(self.light_positions):
            raise ValueError("basis count must equal stage light count")

    def save(self, path) -> None:
        np.savez_compressed(Path(path), basis=self.basis.astype(np.float16),
                            alpha=self.alpha.astype(np.float32),
                            lights=self.light_positions.astype(np.float32))

    @classmethod
    def load(cls, path) -> "ReflectanceField":
        with np.load(Path(path)) as z:
            return cls(z["basis"].astype(np.float32),
                       z["alpha"].astype(np.float64),
                       z["lights"].astype(np.float64))


def build_reflectance_field(scene: Scene, params: MlpParams, camera: Camera,
                            stage: LightStage,
                            raster_cfg: RasterConfig | None = None,
                            shading_cfg: ShadingConfig | None = None,
                            options: RenderOptions | None = None,
                            edit: MaterialEdit | None = None) -> ReflectanceField:
    """One unit-intensity linear render per stage light."""
    if len(stage) < 1:
        raise ValueError("stage needs at least one light")
    basis = []
    alpha = None
    for i in range(len(stage)):
        result = render(scene, params, camera, stage.light(i, 1.0),
                        raster_cfg, shading_cfg, options, want_grad=False,
                        edit=edit if edit and not edit.is_identity() else None)
        basis.append(result.image)
        if alpha is None:
            alpha = result.gbuffer.alpha
    return ReflectanceField(np.stack(basis), alpha, stage.positions.copy())


def ibl_compose(field: ReflectanceField, weights) -> np.ndarray:
    """Pixelwise sum of the reflectance basis scaled per light: exact
    linearity in the weights."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 1:
        weights = np.repeat(weights[:, None], 3, axis=1)
    if len(weights) != len(field.basis):
        raise ValueError(f"weight count {len(weights)} != basis count "
                         f"{len(field.basis)}")
    return np.einsum("lc,lhwc->hwc", weights,
                     field.basis.astype(np.float64))


def sample_envmap(envmap, stage: LightStage) -> np.ndarray:
    """Bin an equirectangular environment into per-light RGB weights.

    Every upper-hemisphere texel contributes its radiance times solid
    angle to the nearest stage light direction (spherical Voronoi cell);
    the lower hemisphere is ignored.
    """
    env = np.asarray(envmap, dtype=np.float64)
    if env.ndim != 3 or env.shape[2] < 3:
        raise ValueError("envmap must be (H, W, 3)")
    he, we = env.shape[:2]
    theta = (np.arange(he) + 0.5) / he * np.pi  # polar from +z
    phi = (np.arange(we) + 0.5) / we * 2.0 * np.pi
    sin_t = np.sin(theta)
    dirs = np.stack([
        np.outer(sin_t, np.cos(phi)),
        np.outer(sin_t, np.sin(phi)),
        np.outer(np.cos(theta), np.ones(we)),
    ], axis=-1)  # (He, We, 3)
    d_omega = sin_t[:, None] * (np.pi / he) * (2.0 * np.pi / we)

    upper = dirs[..., 2] > 0.0
    light_dirs = stage.positions / np.linalg.norm(stage.positions, axis=1,
                                                  keepdims=True)
    flat_dirs = dirs[upper]
    nearest = np.argmax(flat_dirs @ light_dirs.T, axis=1)
    contrib = env[upper][:, :3] * np.broadcast_to(d_omega, (he, we))[upper][:, None]
    weights = np.zeros((len(stage), 3))
    np.add.at(weights, nearest, contrib)
    return weights


def tone_map(linear, exposure: float = 1.0) -> np.ndarray:
    """clamp(exposure * x) ** (1/2.2) into display range [0, 1]."""
    if exposure <= 0:
        raise ValueError("exposure must be positive")
    x = np.clip(exposure * np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return x ** (1.0 / 2.2)
