"""Joint optimization of the Gaussian scene and the implicit network.

One step renders a sampled OLAT frame, evaluates the weighted loss stack,
backpropagates through rasterizer, shading and network, and applies Adam
to every parameter.  Schedules: staircase learning-rate decay, per-step
exponential decay for the network, a linear ramp on the incident-light
constraint that is removed afterwards, a roughness freeze during warmup,
and the usual clone/split/prune density control.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .checkpoint import save_checkpoint
from .dataset import FrameData, OlatDataset, linear_to_srgb
from .mlp import AdamState, MlpParams, SplitMlpParams, adam_step
from .pipeline import (RenderOptions, derived_maps, derived_maps_backward,
                       render, render_backward)
from .projection import RasterConfig
from .scene import GaussianCloud, Scene, eval_sh, logit, sh_basis
from .shading import ShadingConfig
from .validation import normalize
from .visibility import build_bvh, visibility_targets


@dataclass
class LossWeights:
    dssim: float = 0.2
    lpips: float = 0.2  # applies only when an LPIPS plugin is attached
    normal: float = 0.02
    incident: float = 0.02
    mask: float = 0.1
    smooth_metalness: float = 0.002
    smooth_roughness: float = 0.002
    smooth_subsurfaceness: float = 0.002
    smooth_basecolor: float = 0.006
    enhance: float = 0.005
    raytrace_vis: float = 0.01

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


@dataclass
class TrainConfig:
    total_steps: int = 60000
    lr: float = 0.001
    lr_decay: float = 0.99
    lr_decay_every: int = 1000
    mlp_lr_gamma: float = 0.9999
    incident_ramp_end: int = 7000
    roughness_freeze_until: int = 10000
    roughness_freeze_value: float = 0.5
    densify_from: int = 500
    densify_until: int = 15000
    densify_every: int = 100
    densify_grad_threshold: float = 2e-4
    densify_percent: float = 0.01  # world-size split threshold vs scene extent
    opacity_reset_every: int = 3000
    prune_opacity: float = 0.005
    vis_update_every: int = 10
    vis_samples: int = 16
    bvh_refit_every: int = 100
    eval_every: int = 500
    seed: int = 0
    use_enhance: bool = False
    use_lpips: bool = False
    deferred: bool = True
    use_residual: bool = True
    use_pbr: bool = True
    joint_mlp: bool = True
    densify: bool = True
    # Per-property multipliers on the base rate, following the reference
    # splatting schedule (positions slow, opacity fast).
    lr_scale_positions: float = 0.32
    lr_scale_rotations: float = 1.0
    lr_scale_scales: float = 5.0
    lr_scale_opacity: float = 50.0
    lr_scale_material: float = 2.5
    lr_scale_normals: float = 2.5
    lr_scale_vis_sh: float = 2.5
    background: tuple = (0.0, 0.0, 0.0)
    weights: LossWeights = field(default_factory=LossWeights)
    raster: RasterConfig = field(default_factory=RasterConfig)
    shading: ShadingConfig = field(default_factory=ShadingConfig)

    def __post_init__(self):
        if not (self.incident_ramp_end < self.roughness_freeze_until
                < self.total_steps):
            raise ValueError(
                "schedule must satisfy incident_ramp_end < "
                "roughness_freeze_until < total_steps")

    def incident_weight(self, step: int) -> float:
        """Linear ramp up to the configured weight, then removed."""
        if step >= self.incident_ramp_end:
            return 0.0
        return self.weights.incident * (step + 1) / self.incident_ramp_end

    def scene_lr(self, step: int) -> float:
        return self.lr * self.lr_decay ** (step // self.lr_decay_every)

    def mlp_lr(self, step: int) -> float:
        return self.lr * self.mlp_lr_gamma**step


_FLAT_SECTIONS = {"weights": LossWeights, "raster": RasterConfig,
                  "shading": ShadingConfig}


def config_to_text(cfg: TrainConfig) -> str:
    """Flat ``key = value`` serialization, nested sections dot-prefixed."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _FLAT_SECTIONS:
            for g in dataclasses.fields(v):
                lines.append(f"{f.name}.{g.name} = {getattr(v, g.name)!r}")
        elif f.name == "background":
            lines.append(f"background = {','.join(str(x) for x in v)}")
        else:
            lines.append(f"{f.name} = {v!r}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> TrainConfig:
    import ast

    plain: dict = {}
    sections = {name: {} for name in _FLAT_SECTIONS}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line: {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "background":
            plain[key] = tuple(float(x) for x in value.split(","))
            continue
        parsed = ast.literal_eval(value)
        if "." in key:
            section, sub = key.split(".", 1)
            if section not in sections:
                raise ValueError(f"unknown config section {section!r}")
            sections[section][sub] = parsed
        else:
            plain[key] = parsed
    for name, cls in _FLAT_SECTIONS.items():
        if sections[name]:
            plain[name] = cls(**sections[name])
    return TrainConfig(**plain)


class TrainingDiverged(RuntimeError):
    pass


def init_mlp(cfg: TrainConfig):
    if cfg.joint_mlp:
        return MlpParams.init(cfg.seed)
    return SplitMlpParams.init(cfg.seed)


def init_scene_from_dataset(dataset: OlatDataset, n_gaussians: int = 2000,
                            grid: int = 24, seed: int = 0,
                            max_frames: int = 16) -> Scene:
    """Seed Gaussians from mask-carved visual-hull voxel centers."""
    rng = np.random.default_rng(seed)
    bounds = dataset.bounds
    axes = [np.linspace(bounds.lo[a], bounds.hi[a], grid) for a in range(3)]
    xs, ys, zs = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
    keep = np.ones(len(centers), bool)
    idx = dataset.indices("train") or dataset.indices()
    step = max(1, len(idx) // max_frames)
    for i in idx[::step]:
        fd = dataset.frame_data(i)
        cam = fd.camera
        xc = cam.world_to_cam_points(centers)
        z = xc[:, 2]
        inside = z > 1e-3
        u = np.where(inside, cam.focal[0] * xc[:, 0] / np.where(inside, z, 1.0)
                     + cam.principal[0], -1.0)
        v = np.where(inside, cam.focal[1] * xc[:, 1] / np.where(inside, z, 1.0)
                     + cam.principal[1], -1.0)
        height, width = fd.mask.shape
        ui = np.clip(u.astype(np.int64), 0, width - 1)
        vi = np.clip(v.astype(np.int64), 0, height - 1)
        on_screen = (u >= 0) & (u < width) & (v >= 0) & (v < height) & inside
        keep &= on_screen & (fd.mask[vi, ui] > 0.5)
    hull = centers[keep]
    if len(hull) == 0:  # degenerate masks: fall back to random-in-bounds
        hull = rng.uniform(bounds.lo, bounds.hi, (n_gaussians, 3))
    if len(hull) > n_gaussians:
        hull = hull[rng.choice(len(hull), n_gaussians, replace=False)]
    n = len(hull)
    voxel = float(np.mean((bounds.hi - bounds.lo) / grid))
    cloud = GaussianCloud.empty(n)
    cloud.positions[:] = hull + rng.normal(0.0, 0.1 * voxel, (n, 3))
    q = rng.normal(0.0, 1.0, (n, 4))
    cloud.rotations[:] = normalize(q)
    cloud.log_scales[:] = np.log(voxel * rng.uniform(0.4, 0.8, (n, 3)))
    cloud.opacity_logits[:] = logit(0.1)
    cloud.basecolor_logits[:] = logit(0.5)
    cloud.roughness_logits[:] = logit(0.5)
    cloud.metalness_logits[:] = logit(0.1)
    cloud.subsurface_logits[:] = logit(0.5)
    centroid = hull.mean(axis=0)
    cloud.normals[:] = normalize(cloud.positions - centroid)
    from .scene import visibility_sh_init
    cloud.vis_sh[:] = visibility_sh_init(1.0)
    scene = Scene(cloud, bounds)
    scene.validate()
    return scene


def perturb_scene(scene: Scene, rng, position_sigma=0.01, logit_sigma=0.25,
                  quat_sigma=0.05, log_scale_sigma=0.1, normal_sigma=0.1,
                  vis_sigma=0.05) -> Scene:
    """Noisy copy of a scene (recovery experiments start here)."""
    cloud = scene.cloud.copy()
    n = len(cloud)
    extent = float(np.mean(scene.bounds.hi - scene.bounds.lo))
    cloud.positions += rng.normal(0.0, position_sigma * extent, (n, 3))
    cloud.positions = np.clip(cloud.positions, scene.bounds.lo, scene.bounds.hi)
    cloud.rotations += rng.normal(0.0, quat_sigma, (n, 4))
    cloud.rotations = normalize(cloud.rotations)
    cloud.log_scales += rng.normal(0.0, log_scale_sigma, (n, 3))
    for name in ("opacity_logits", "basecolor_logits", "roughness_logits",
                 "metalness_logits", "subsurface_logits"):
        arr = getattr(cloud, name)
        arr += rng.normal(0.0, logit_sigma, arr.shape)
    cloud.normals += rng.normal(0.0, normal_sigma, (n, 3))
    cloud.vis_sh += rng.normal(0.0, vis_sigma, (n, 9))
    return Scene(cloud, scene.bounds)


def perturb_mlp(params, rng, rel_sigma=0.05):
    out = params.copy()
    for key, arr in out.tensors.items():
        scale = max(float(np.abs(arr).mean()), 0.05)
        arr += rng.normal(0.0, rel_sigma * scale, arr.shape)
    return out


def compute_step(scene: Scene, params, frame: FrameData, cfg: TrainConfig,
                 step: int, vis_pack=None, lpips_fn=None, want_grad=True):
    """One frame's loss stack and gradients.

    Returns (parts, cloud_grads, mlp_grads, aux); ``parts['total']`` is the
    weighted sum of the enabled terms.  With ``want_grad=False`` only the
    loss values are computed and the gradient returns are None.
    """
    w = cfg.weights
    background = np.asarray(cfg.background, dtype=np.float64)
    frozen = step < cfg.roughness_freeze_until
    opts = RenderOptions(
        deferred=cfg.deferred, use_residual=cfg.use_residual,
        use_pbr=cfg.use_pbr,
        roughness_override=cfg.roughness_freeze_value if frozen else None)
    result = render(scene, params, frame.camera, frame.light, cfg.raster,
                    cfg.shading, opts, background=background,
                    want_grad=want_grad, fast=False)

    # Frames are object-on-black composites; fill the configured training
    # background into the off-object region.
    gt = frame.image + background * (1.0 - frame.mask[:, :, None])
    parts = {}
    val_img, c_img = L.loss_image(result.image, gt, w.dssim)
    parts["image"] = val_img

    val_mask, c_mask = L.loss_mask(result.gbuffer.alpha, frame.mask)
    parts["mask"] = val_mask

    maps, c_maps = derived_maps(result.gbuffer, cfg.shading.alpha_eps)
    val_norm, c_norm = L.loss_normal(maps["zbar"], maps["unit_normal"],
                                     maps["valid"], frame.camera)
    parts["normal"] = val_norm

    smooth_caches = {}
    for name, weight in (("metalness", w.smooth_metalness),
                         ("roughness", w.smooth_roughness),
                         ("subsurfaceness", w.smooth_subsurfaceness),
                         ("basecolor", w.smooth_basecolor)):
        val, c = L.loss_smooth(maps[name], gt, maps["valid"])
        parts[f"smooth_{name}"] = val
        smooth_caches[name] = (c, weight)

    lam_inc = cfg.incident_weight(step)
    val_inc, c_inc = L.loss_incident(result.incident, result.visibility)
    parts["incident"] = val_inc

    c_ray = None
    parts["raytrace_vis"] = 0.0
    if vis_pack is not None:
        dirs, targets = vis_pack
        sh_vals = eval_sh(scene.cloud.vis_sh[:, None, :], dirs)
        val_ray, c_ray = L.loss_sh_visibility(sh_vals, targets)
        parts["raytrace_vis"] = val_ray

    c_enh = None
    parts["enhance"] = 0.0
    if cfg.use_enhance:
        val_enh, c_enh = L.loss_enhance(result.image, gt)
        parts["enhance"] = val_enh

    lpips_grad = None
    parts["lpips"] = 0.0
    if cfg.use_lpips and lpips_fn is not None:
        val_lp, lpips_grad = lpips_fn(result.image, gt)
        parts["lpips"] = float(val_lp)

    total = (parts["image"] + w.mask * parts["mask"]
             + w.normal * parts["normal"]
             + w.smooth_metalness * parts["smooth_metalness"]
             + w.smooth_roughness * parts["smooth_roughness"]
             + w.smooth_subsurfaceness * parts["smooth_subsurfaceness"]
             + w.smooth_basecolor * parts["smooth_basecolor"]
             + lam_inc * parts["incident"]
             + w.raytrace_vis * parts["raytrace_vis"]
             + (w.enhance * parts["enhance"] if cfg.use_enhance else 0.0)
             + (w.lpips * parts["lpips"] if cfg.use_lpips else 0.0))
    parts["total"] = float(total)
    parts["incident_weight"] = lam_inc
    if not want_grad:
        return parts, None, None, {"result": result}

    # ---- backward
    d_image = L.loss_image_backward(c_img)
    if cfg.use_enhance:
        d_image = d_image + L.loss_enhance_backward(c_enh, w.enhance)
    if lpips_grad is not None:
        d_image = d_image + w.lpips * lpips_grad

    d_zbar, d_unit_normal = L.loss_normal_backward(c_norm, w.normal)
    d_maps = {"zbar": d_zbar, "unit_normal": d_unit_normal}
    for name, (c, weight) in smooth_caches.items():
        d_maps[name] = L.loss_smooth_backward(c, weight)
    d_attr_planes, d_alpha_planes, d_depth_planes = \
        derived_maps_backward(c_maps, d_maps)
    d_alpha_planes = d_alpha_planes + L.loss_mask_backward(c_mask, w.mask)

    d_inc_pg, d_vis_pg = L.loss_incident_backward(c_inc, lam_inc)

    cloud_grads, mlp_grads, aux = render_backward(
        result, d_image, d_attr_planes, d_alpha_planes, d_depth_planes,
        d_incident=d_inc_pg, d_visibility=d_vis_pg)

    if c_ray is not None:
        d_sh_vals = L.loss_sh_visibility_backward(c_ray, w.raytrace_vis)
        cloud_grads["vis_sh"] += np.einsum("nsb,ns->nb", sh_basis(vis_pack[0]),
                                           d_sh_vals)
    aux["result"] = result
    return parts, cloud_grads, mlp_grads, aux


class Trainer:
    """Owns the optimization state for one scene."""

    def __init__(self, dataset: OlatDataset, cfg: TrainConfig,
                 scene: Scene | None = None, params=None, lpips_fn=None,
                 out_dir=None):
        self.dataset = dataset
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.scene = scene if scene is not None else \
            init_scene_from_dataset(dataset, seed=cfg.seed)
        self.params = params if params is not None else init_mlp(cfg)
        self.lpips_fn = lpips_fn
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.step = 0
        self.adam_scene = AdamState.for_params(self.scene.cloud.param_arrays(),
                                               cfg.lr)
        self.adam_mlp = AdamState.for_params(self.params.tensors, cfg.lr)
        self.scene_lr_scales = {
            "positions": cfg.lr_scale_positions,
            "rotations": cfg.lr_scale_rotations,
            "log_scales": cfg.lr_scale_scales,
            "opacity_logits": cfg.lr_scale_opacity,
            "basecolor_logits": cfg.lr_scale_material,
            "roughness_logits": cfg.lr_scale_material,
            "metalness_logits": cfg.lr_scale_material,
            "subsurface_logits": cfg.lr_scale_material,
            "normals": cfg.lr_scale_normals,
            "vis_sh": cfg.lr_scale_vis_sh,
        }
        self.train_indices = dataset.indices("train") or dataset.indices()
        self.bvh = build_bvh(self.scene)
        self.vis_pack = None
        self.grad2d_accum = np.zeros(len(self.scene.cloud))
        self.grad2d_count = np.zeros(len(self.scene.cloud))
        self.metrics: list[dict] = []
        self._metrics_file = None
        probe = dataset.indices("test") or self.train_indices
        self.probe_index = probe[0]

    # ------------------------------------------------------------- schedule
    def _refresh_visibility(self, light):
        self.vis_pack = visibility_targets(self.bvh, self.scene, light,
                                           self.cfg.vis_samples, self.rng)

    def _maintain(self, light):
        cfg = self.cfg
        if cfg.densify and cfg.densify_from <= self.step <= cfg.densify_until \
                and self.step > 0 and self.step % cfg.densify_every == 0:
            self._densify_and_prune()
            self.bvh = build_bvh(self.scene)
        elif self.step % cfg.bvh_refit_every == 0:
            self.bvh = build_bvh(self.scene)
        if cfg.densify and cfg.opacity_reset_every > 0 and self.step > 0 \
                and self.step % cfg.opacity_reset_every == 0:
            cap = logit(0.01)
            np.minimum(self.scene.cloud.opacity_logits, cap,
                       out=self.scene.cloud.opacity_logits)
            self.adam_scene.m["opacity_logits"][:] = 0.0
            self.adam_scene.v["opacity_logits"][:] = 0.0
        if self.step % cfg.vis_update_every == 0:
            self._refresh_visibility(light)

    def train_step(self) -> dict:
        cfg = self.cfg
        frame_idx = self.train_indices[self.rng.integers(len(self.train_indices))]
        fd = self.dataset.frame_data(frame_idx)
        self._maintain(fd.light)

        parts, cloud_grads, mlp_grads, aux = compute_step(
            self.scene, self.params, fd, cfg, self.step, self.vis_pack,
            self.lpips_fn)
        if not np.isfinite(parts["total"]):
            self._dump_divergence(parts)
            raise TrainingDiverged(
                f"non-finite loss at step {self.step}: {parts}")

        # densification statistics (screen-space position gradients, half-res
        # normalized as in the reference schedule)
        g2d = aux["mean2d_grad"]
        width, height = fd.camera.resolution
        norm = np.linalg.norm(g2d * np.array([width / 2.0, height / 2.0]),
                              axis=1)
        seen = np.zeros(len(self.scene.cloud), bool)
        seen[aux["result"].visible] = True
        self.grad2d_accum[seen] += norm[seen]
        self.grad2d_count[seen] += 1

        self.adam_scene.lr = cfg.scene_lr(self.step)
        adam_step(self.adam_scene, self.scene.cloud.param_arrays(), cloud_grads,
                  lr_scale=self.scene_lr_scales)
        self.adam_mlp.lr = cfg.mlp_lr(self.step)
        adam_step(self.adam_mlp, self.params.tensors, mlp_grads)
        # keep quaternions unit after every optimizer step
        self.scene.cloud.rotations[:] = normalize(self.scene.cloud.rotations)
        self.step += 1

        if self.step % cfg.eval_every == 0 or self.step == cfg.total_steps:
            self._log_metrics(parts)
        return parts

    def fit(self):
        while self.step < self.cfg.total_steps:
            self.train_step()
        if self.out_dir:
            save_checkpoint(self.out_dir / "scene.sssgs", self.scene,
                            self.params)
            (self.out_dir / "config.txt").write_text(config_to_text(self.cfg))
            self._close_metrics()
        return self.scene, self.params

    # ------------------------------------------------------------- metrics
    def probe_psnr(self) -> float:
        fd = self.dataset.frame_data(self.probe_index)
        result = render(self.scene, self.params, fd.camera, fd.light,
                        self.cfg.raster, self.cfg.shading,
                        RenderOptions(deferred=self.cfg.deferred,
                                      use_residual=self.cfg.use_residual,
                                      use_pbr=self.cfg.use_pbr),
                        background=np.asarray(self.cfg.background),
                        want_grad=False)
        return L.psnr(linear_to_srgb(np.clip(result.image, 0, 1)),
                      linear_to_srgb(np.clip(fd.image, 0, 1)))

    def _log_metrics(self, parts):
        row = {"step": self.step, "gaussians": len(self.scene.cloud),
               "psnr_probe": self.probe_psnr()}
        row.update({k: float(v) for k, v in parts.items()})
        self.metrics.append(row)
        if self.out_dir:
            if self._metrics_file is None:
                self._metrics_file = open(self.out_dir / "metrics.ndjson", "a")
            self._metrics_file.write(json.dumps(row) + "\n")
            self._metrics_file.flush()

    def _close_metrics(self):
        if self._metrics_file is not None:
            self._metrics_file.close()
            self._metrics_file = None

    def _dump_divergence(self, parts):
        if not self.out_dir:
            return
        stats = {k: {"min": float(np.min(v)), "max": float(np.max(v)),
                     "finite": bool(np.all(np.isfinite(v)))}
                 for k, v in self.scene.cloud.param_arrays().items()}
        (self.out_dir / "diverged.json").write_text(json.dumps(
            {"step": self.step, "losses": parts, "params": stats}, indent=1))

    # ------------------------------------------------------- density control
    def _rebuild_state(self, keep_idx, appended: GaussianCloud | None):
        cloud = self.scene.cloud
        parts = [cloud.take(keep_idx)]
        if appended is not None and len(appended):
            parts.append(appended)
        new_cloud = GaussianCloud.concatenate(parts)
        n_new = len(new_cloud)
        for key in self.adam_scene.m:
            for buf in (self.adam_scene.m, self.adam_scene.v):
                old = buf[key]
                fresh = np.zeros((n_new,) + old.shape[1:])
                fresh[:len(keep_idx)] = old[keep_idx]
                buf[key] = fresh
        self.scene = Scene(new_cloud, self.scene.bounds)
        self.grad2d_accum = np.zeros(n_new)
        self.grad2d_count = np.zeros(n_new)

    def _densify_and_prune(self):
        cfg = self.cfg
        cloud = self.scene.cloud
        bounds = self.scene.bounds
        extent = float(np.max(bounds.hi - bounds.lo))
        avg = self.grad2d_accum / np.maximum(self.grad2d_count, 1.0)
        scales = cloud.scales()
        max_scale = scales.max(axis=1)
        high = avg > cfg.densify_grad_threshold
        big = max_scale > cfg.densify_percent * extent
        clone_mask = high & ~big
        split_mask = high & big

        opacity = cloud.opacities()
        oob = ~((cloud.positions >= bounds.lo) & (cloud.positions <= bounds.hi)
                ).all(axis=1)
        prune = (opacity < cfg.prune_opacity) | oob \
            | (max_scale > 0.5 * extent) | split_mask
        keep_idx = np.nonzero(~prune)[0]

        appended = []
        if clone_mask.any():
            appended.append(cloud.take(np.nonzero(clone_mask & ~prune)[0]))
        if split_mask.any():
            src = cloud.take(np.nonzero(split_mask)[0])
            cov = src.covariances()
            children = []
            for _ in range(2):
                child = src.copy()
                noise = self.rng.normal(0.0, 1.0, (len(src), 3))
                offsets = np.einsum("nij,nj->ni",
                                    np.linalg.cholesky(cov), noise)
                child.positions = src.positions + offsets
                child.positions = np.clip(child.positions, bounds.lo, bounds.hi)
                child.log_scales = src.log_scales - np.log(1.6)
                children.append(child)
            appended.append(GaussianCloud.concatenate(children))
        extra = GaussianCloud.concatenate(appended) if appended else None
        if len(keep_idx) == 0 and (extra is None or len(extra) == 0):
            return  # never drop the whole scene
        self._rebuild_state(keep_idx, extra)


def train(dataset: OlatDataset, cfg: TrainConfig, out_dir=None,
          scene: Scene | None = None, params=None, lpips_fn=None):
    """Run the full schedule; returns (scene, params, trainer)."""
    trainer = Trainer(dataset, cfg, scene=scene, params=params,
                      lpips_fn=lpips_fn, out_dir=out_dir)
    trainer.fit()
    return trainer.scene, trainer.params, trainer
