"""OLAT dataset model: light stage geometry, manifest IO, synthetic
ground-truth generation and image metrics.

A dataset is a JSON manifest naming image/mask files, per-frame camera
intrinsics and camera-to-world transforms, a light index into the stage,
and a split tag.  Images are stored display-encoded (8-bit sRGB PNG) or
as float EXR; training always works in linear radiance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import images
from .losses import psnr, ssim_value
from .mlp import MlpParams
from .pipeline import RenderOptions, render
from .projection import RasterConfig
from .scene import Aabb, Camera, GaussianCloud, PointLight, Scene, logit
from .shading import ShadingConfig
from .validation import as_float_array, normalize
from .visibility import build_bvh, visibility_targets


class DatasetError(ValueError):
    pass


@dataclass
class LightStage:
    positions: np.ndarray  # (L, 3), upper hemisphere
    radius: float
    rings: int
    per_ring: int

    def __post_init__(self):
        self.positions = as_float_array(self.positions, (-1, 3), "positions")

    def __len__(self):
        return len(self.positions)

    def light(self, index: int, intensity: float = 1.0) -> PointLight:
        return PointLight(self.positions[index], intensity)


def generate_light_stage(radius: float, rings: int = 7,
                         per_ring: int = 16) -> LightStage:
    """Fixed light positions: ``rings`` elevation rings of ``per_ring``
    uniformly spaced azimuths on the upper hemisphere.

    Ring elevations are uniform in the open interval (0, 90) degrees, so
    neither the equator nor the pole carries lights.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    elevations = (np.arange(rings) + 0.5) / rings * (np.pi / 2.0)
    azimuths = np.arange(per_ring) / per_ring * (2.0 * np.pi)
    pos = []
    for el in elevations:
        z = np.sin(el)
        r = np.cos(el)
        for az in azimuths:
            pos.append([r * np.cos(az), r * np.sin(az), z])
    return LightStage(radius * np.array(pos), radius, rings, per_ring)


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, x * 12.92, 1.055 * x ** (1.0 / 2.4) - 0.055)


@dataclass
class OlatFrame:
    file: str
    mask: str
    light_index: int
    camera: Camera
    split: str = "train"


@dataclass
class FrameData:
    """One decoded training frame: linear image, float mask, camera, light."""

    camera: Camera
    light: PointLight
    image: np.ndarray  # (H, W, 3) linear
    mask: np.ndarray  # (H, W) in [0, 1]
    name: str = ""


@dataclass
class OlatDataset:
    frames: list
    stage: LightStage
    bounds: Aabb
    root: Path = Path(".")
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.frames)

    def indices(self, split: str | None = None):
        if split is None:
            return list(range(len(self.frames)))
        return [i for i, f in enumerate(self.frames) if f.split == split]

    def frame_data(self, i: int) -> FrameData:
        if i not in self._cache:
            f: OlatFrame = self.frames[i]
            path = self.root / f.file
            if path.suffix.lower() == ".exr":
                img = images.read_exr(path)
            else:
                img = srgb_to_linear(images.read_png(path))
            if img.ndim == 2:
                img = np.repeat(img[:, :, None], 3, axis=2)
            mask = images.read_mask(self.root / f.mask)
            self._cache[i] = FrameData(
                camera=f.camera, light=self.stage.light(f.light_index),
                image=img[:, :, :3], mask=mask, name=f.file)
        return self._cache[i]


def _camera_from_entry(entry, name):
    transform = np.asarray(entry["transform"], dtype=np.float64)
    if transform.shape != (4, 4):
        raise DatasetError(f"{name}: transform must be 4x4 row-major")
    try:
        world_to_cam = np.linalg.inv(transform)
    except np.linalg.LinAlgError as e:
        raise DatasetError(f"{name}: non-invertible camera transform") from e
    return Camera(
        world_to_cam=world_to_cam,
        focal=(float(entry["fx"]), float(entry["fy"])),
        principal=(float(entry["cx"]), float(entry["cy"])),
        resolution=(int(entry["w"]), int(entry["h"])),
    )


def load_dataset(manifest_path) -> OlatDataset:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"cannot read manifest {manifest_path}: {e}") from e
    lights = np.asarray(doc.get("lights", []), dtype=np.float64)
    if lights.ndim != 2 or lights.shape[1] != 3 or not len(lights):
        raise DatasetError("manifest: 'lights' must be a non-empty [x,y,z] list")
    radius = float(np.linalg.norm(lights, axis=1).mean())
    stage = LightStage(lights, radius, rings=0, per_ring=0)

    entries = doc.get("frames", [])
    if not entries:
        raise DatasetError("manifest: no frames")
    root = manifest_path.parent
    frames = []
    for entry in entries:
        name = entry.get("file", "<unnamed>")
        idx = int(entry["light"])
        if not 0 <= idx < len(lights):
            raise DatasetError(f"{name}: light index {idx} out of range "
                               f"[0, {len(lights)})")
        for key in ("file", "mask"):
            if not (root / entry[key]).exists():
                raise DatasetError(f"{name}: missing {key} {entry[key]}")
        frames.append(OlatFrame(
            file=entry["file"], mask=entry["mask"], light_index=idx,
            camera=_camera_from_entry(entry, name),
            split=entry.get("split", "train")))
    if "bounds" in doc:
        lo, hi = np.asarray(doc["bounds"], dtype=np.float64).reshape(2, 3)
        bounds = Aabb(lo, hi)
    else:
        half = radius / 3.0
        bounds = Aabb(-half * np.ones(3), half * np.ones(3))
    return OlatDataset(frames=frames, stage=stage, bounds=bounds, root=root)


def save_manifest(dataset: OlatDataset, path) -> None:
    entries = []
    for f in dataset.frames:
        cam = f.camera
        entries.append({
            "file": f.file, "mask": f.mask, "light": f.light_index,
            "transform": np.linalg.inv(cam.world_to_cam).tolist(),
            "fx": cam.focal[0], "fy": cam.focal[1],
            "cx": cam.principal[0], "cy": cam.principal[1],
            "w": cam.resolution[0], "h": cam.resolution[1],
            "split": f.split,
        })
    doc = {
        "lights": dataset.stage.positions.tolist(),
        "frames": entries,
        "bounds": [dataset.bounds.lo.tolist(), dataset.bounds.hi.tolist()],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def make_split(n_frames: int, test_fraction: float, rng) -> list:
    """Disjoint train/test tags covering all frames."""
    tags = np.array(["train"] * n_frames, dtype=object)
    n_test = max(1, int(round(test_fraction * n_frames)))
    test_idx = rng.choice(n_frames, size=n_test, replace=False)
    tags[test_idx] = "test"
    return tags.tolist()


# ------------------------------------------------------- synthetic ground truth
def _quat_from_z_to(direction):
    """Quaternion rotating +z onto ``direction`` (unit)."""
    z = np.array([0.0, 0.0, 1.0])
    d = np.asarray(direction, dtype=np.float64)
    c = float(np.dot(z, d))
    if c > 1.0 - 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    if c < -1.0 + 1e-12:
        return np.array([0.0, 1.0, 0.0, 0.0])
    axis = np.cross(z, d)
    axis /= np.linalg.norm(axis)
    half = 0.5 * np.arccos(np.clip(c, -1.0, 1.0))
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


_BLOB_MATERIALS = {
    # (roughness base/amp, metalness base/amp, subsurfaceness base/amp)
    "translucent": (0.45, 0.2, 0.12, 0.08, 0.62, 0.2),
    "glossy": (0.14, 0.04, 0.55, 0.1, 0.25, 0.1),
}


def make_blob_scene(seed: int = 42, n_gaussians: int = 200,
                    bounds_half: float = 1.0,
                    material: str = "translucent") -> Scene:
    """Translucent blob: an ellipsoid shell of oriented surface splats with
    smooth attribute fields, for self-supervision experiments."""
    rng = np.random.default_rng(seed)
    r_base, r_amp, m_base, m_amp, s_base, s_amp = _BLOB_MATERIALS[material]
    radii = np.array([0.38, 0.33, 0.29])
    dirs = normalize(rng.normal(0.0, 1.0, (n_gaussians, 3)))
    bump = 1.0 + 0.08 * np.sin(3.0 * dirs[:, 0] + 2.0 * dirs[:, 1]) \
        + 0.05 * rng.normal(0.0, 1.0, n_gaussians)
    pos = dirs * radii * bump[:, None]
    normals = normalize(pos / radii**2)

    cloud = GaussianCloud.empty(n_gaussians)
    cloud.positions[:] = pos
    for i in range(n_gaussians):
        cloud.rotations[i] = _quat_from_z_to(normals[i])
    # splat footprint shrinks with count so surface coverage stays constant
    size = np.sqrt(200.0 / n_gaussians)
    tangent = rng.uniform(0.055, 0.085, (n_gaussians, 2)) * size
    thin = rng.uniform(0.015, 0.025, n_gaussians) * np.sqrt(size)
    cloud.log_scales[:] = np.log(np.column_stack([tangent, thin]))
    cloud.opacity_logits[:] = logit(rng.uniform(0.65, 0.92, n_gaussians))
    warm = 0.5 + 0.25 * np.sin(4.0 * pos[:, 0]) * np.cos(3.0 * pos[:, 1])
    cloud.basecolor_logits[:] = logit(np.column_stack([
        np.clip(warm + 0.18, 0.05, 0.95),
        np.clip(warm, 0.05, 0.95),
        np.clip(0.85 - 0.5 * warm, 0.05, 0.95)]))
    cloud.roughness_logits[:] = logit(
        np.clip(r_base + r_amp * np.sin(5.0 * pos[:, 2]), 0.05, 0.9))
    cloud.metalness_logits[:] = logit(
        np.clip(m_base + m_amp * np.cos(4.0 * pos[:, 1]), 0.02, 0.8))
    cloud.subsurface_logits[:] = logit(
        np.clip(s_base + s_amp * np.sin(2.0 * pos[:, 0] + pos[:, 2]),
                0.05, 0.9))
    cloud.normals[:] = normals
    scene = Scene(cloud, Aabb(-bounds_half * np.ones(3),
                              bounds_half * np.ones(3)))
    scene.validate()
    return scene


def fit_visibility_sh(scene: Scene, light_positions, samples: int = 24,
                      seed: int = 0) -> None:
    """Least-squares fit of each Gaussian's SH coefficients to ray-traced
    transmittance so the ground-truth scene is self-consistent."""
    from .scene import sh_basis

    rng = np.random.default_rng(seed)
    bvh = build_bvh(scene)
    light = PointLight(np.asarray(light_positions, dtype=np.float64)[0])
    dirs, values = visibility_targets(bvh, scene, light, samples, rng)
    basis = sh_basis(dirs)  # (N, S, 9)
    for i in range(len(scene)):
        coeffs, *_ = np.linalg.lstsq(basis[i], values[i], rcond=None)
        scene.cloud.vis_sh[i] = coeffs


def calibrate_mlp(params: MlpParams, scene: Scene, stage: LightStage,
                  camera: Camera, seed: int = 0) -> MlpParams:
    """Range-check a randomly initialized network for data generation.

    Shifts and scales the output heads so residual colors spread inside
    (0, 1) and incident light sits in a plausible [0.2, 1.2] band.
    """
    from .pipeline import build_mlp_inputs
    from .projection import activate_geometry

    cloud = scene.cloud
    _, geom = activate_geometry(cloud.positions, cloud.rotations, cloud.log_scales)
    visible = np.arange(len(cloud))
    un = normalize(cloud.normals)
    xs = []
    for li in range(0, len(stage), max(1, len(stage) // 8)):
        x, _, _ = build_mlp_inputs(scene, visible, camera, stage.light(li),
                                   geom, un)
        xs.append(x)
    x = np.concatenate(xs, axis=0)

    t = params.tensors
    _, _, cache = params.forward(x)
    pre_res = cache["pre"]["residual0"]
    t["residual0.w"] *= 1.2 / max(pre_res.std(), 1e-3)
    t["residual0.b"] -= pre_res.mean(axis=0) * 1.2 / max(pre_res.std(), 1e-3)
    _, _, cache = params.forward(x)
    pre_inc = cache["pre"]["incident1"]
    t["incident1.w"] *= 0.25 / max(pre_inc.std(), 1e-3)
    t["incident1.b"] += 0.7 - pre_inc.mean(axis=0) * 0.25 / max(pre_inc.std(), 1e-3)
    params.check_finite()
    return params


def orbit_camera(azimuth_deg: float, elevation_deg: float, distance: float,
                 resolution=(128, 128), fov_deg: float = 45.0,
                 target=(0.0, 0.0, 0.0)) -> Camera:
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    eye = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                    np.sin(el)]) * distance + np.asarray(target)
    return Camera.look_at(eye, target, resolution=resolution, fov_deg=fov_deg)


def synthesize_ground_truth(seed: int, out_dir, n_frames: int = 72,
                            n_views: int = 18, resolution: int = 128,
                            n_gaussians: int = 200, stage_radius: float = 2.5,
                            camera_distance: float = 1.5,
                            test_fraction: float = 0.12,
                            material: str = "translucent"):
    """Build a ground-truth scene + network and render its OLAT dataset.

    Returns (scene, params, manifest_path).  Images are 8-bit sRGB PNGs
    composited on black; masks threshold the alpha plane at 0.5.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    scene = make_blob_scene(seed, n_gaussians, material=material)
    stage = generate_light_stage(stage_radius)
    fit_visibility_sh(scene, stage.positions, seed=seed)
    probe_cam = orbit_camera(30.0, 25.0, camera_distance,
                             (resolution, resolution))
    params = calibrate_mlp(MlpParams.init(seed), scene, stage, probe_cam, seed)

    views = [(float(rng.uniform(0.0, 360.0)), float(rng.uniform(5.0, 55.0)))
             for _ in range(n_views)]
    combo = rng.choice(n_views * len(stage), size=n_frames, replace=False)
    pairs = [(int(c) // len(stage), int(c) % len(stage)) for c in combo]
    split = make_split(n_frames, test_fraction, rng)

    raster_cfg = RasterConfig()
    shading_cfg = ShadingConfig()
    frames = []
    for k, (view_idx, light_idx) in enumerate(pairs):
        az, el = views[view_idx]
        cam = orbit_camera(az, el, camera_distance, (resolution, resolution))
        result = render(scene, params, cam, stage.light(light_idx),
                        raster_cfg, shading_cfg, RenderOptions(),
                        want_grad=False)
        img_name = f"frame_{k:04d}.png"
        mask_name = f"mask_{k:04d}.png"
        images.write_png(out_dir / img_name,
                         linear_to_srgb(np.clip(result.image, 0.0, 1.0)))
        images.write_png(out_dir / mask_name,
                         (result.gbuffer.alpha > 0.5).astype(np.float64))
        frames.append(OlatFrame(file=img_name, mask=mask_name,
                                light_index=light_idx, camera=cam,
                                split=split[k]))
    dataset = OlatDataset(frames=frames, stage=stage, bounds=scene.bounds,
                          root=out_dir)
    manifest = out_dir / "manifest.json"
    save_manifest(dataset, manifest)
    return scene, params, manifest


def evaluate(render_fn, dataset: OlatDataset, split: str = "test",
             matte: bool = False):
    """Mean PSNR/SSIM of ``render_fn(camera, light)`` over a split.

    Metrics compare display-encoded (sRGB) images against the stored
    frames, which are already object-on-background composites; with
    ``matte=True`` the stored frame is re-matted against black first
    (useful for captures whose background is not black).
    """
    rows = []
    for i in dataset.indices(split):
        fd = dataset.frame_data(i)
        pred = render_fn(fd.camera, fd.light)
        gt = fd.image * fd.mask[:, :, None] if matte else fd.image
        pred_srgb = linear_to_srgb(np.clip(pred, 0.0, 1.0))
        gt_srgb = linear_to_srgb(np.clip(gt, 0.0, 1.0))
        rows.append({"frame": fd.name, "psnr": psnr(pred_srgb, gt_srgb),
                     "ssim": ssim_value(pred_srgb, gt_srgb)})
    agg = {"psnr": float(np.mean([r["psnr"] for r in rows])),
           "ssim": float(np.mean([r["ssim"] for r in rows])),
           "count": len(rows)}
    return agg, rows
