"""Command-line entry points.

Subcommands: generate-data, train, eval, render, relight, export-gbuffer,
serve.  Orbit-style ``--view az,el,dist[,fov]`` and
``--light az,el,dist[,intensity]`` arguments mirror the service API.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import images
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (evaluate, generate_light_stage, linear_to_srgb,
                      load_dataset, orbit_camera, synthesize_ground_truth)
from .pipeline import render
from .relight import (MaterialEdit, build_reflectance_field, ibl_compose,
                      sample_envmap, tone_map)
from .scene import PointLight
from .shading import shade_modes
from .train import TrainConfig, config_from_text, train

MODES = ("final", "basecolor", "roughness", "metalness", "normal",
         "residual", "incident", "alpha", "subsurfaceness", "depth")


def _parse_view(spec: str, resolution: int):
    parts = [float(x) for x in spec.split(",")]
    if len(parts) < 3:
        raise click.BadParameter("--view needs az,el,dist[,fov]")
    fov = parts[3] if len(parts) > 3 else 45.0
    return orbit_camera(parts[0], parts[1], parts[2],
                        (resolution, resolution), fov)


def _parse_light(spec: str) -> PointLight:
    parts = [float(x) for x in spec.split(",")]
    if len(parts) < 3:
        raise click.BadParameter("--light needs az,el,dist[,intensity]")
    az, el = np.deg2rad(parts[0]), np.deg2rad(parts[1])
    pos = parts[2] * np.array([np.cos(el) * np.cos(az),
                               np.cos(el) * np.sin(az), np.sin(el)])
    return PointLight(pos, parts[3] if len(parts) > 3 else 1.0)


def _save_image(path: Path, img, display: bool):
    if path.suffix.lower() == ".exr":
        images.write_exr(path, img)
    else:
        images.write_png(path, linear_to_srgb(np.clip(img, 0, 1))
                         if display else np.clip(img, 0, 1))


@click.group()
def main():
    """Gaussian-splat subsurface reconstruction and relighting."""


@main.command("generate-data")
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--frames", type=int, default=72, show_default=True)
@click.option("--resolution", type=int, default=128, show_default=True)
@click.option("--gaussians", type=int, default=200, show_default=True)
def generate_data(seed, out, frames, resolution, gaussians):
    """Synthesize a ground-truth OLAT dataset (scene + checkpoint + images)."""
    scene, params, manifest = synthesize_ground_truth(
        seed, out, n_frames=frames, resolution=resolution,
        n_gaussians=gaussians)
    save_checkpoint(Path(out) / "ground_truth.sssgs", scene, params)
    click.echo(f"wrote {manifest} ({frames} frames) and ground_truth.sssgs")


@main.command("train")
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), required=True)
@click.option("--steps", type=int, help="override total_steps")
@click.option("--seed", type=int, help="override seed")
def train_cmd(manifest, config_path, out, steps, seed):
    """Optimize a scene against an OLAT dataset."""
    cfg = config_from_text(Path(config_path).read_text()) if config_path \
        else TrainConfig()
    if steps is not None or seed is not None:
        import dataclasses
        kw = {}
        if steps is not None:
            kw["total_steps"] = steps
        if seed is not None:
            kw["seed"] = seed
        cfg = dataclasses.replace(cfg, **kw)
    dataset = load_dataset(manifest)
    train(dataset, cfg, out_dir=out)
    click.echo(f"checkpoint written to {Path(out) / 'scene.sssgs'}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--json", "as_json", is_flag=True, help="machine-readable output")
def eval_cmd(checkpoint, manifest, split, as_json):
    """PSNR/SSIM table over a dataset split."""
    scene, params = load_checkpoint(checkpoint)
    dataset = load_dataset(manifest)

    def render_fn(camera, light):
        return render(scene, params, camera, light, want_grad=False).image

    agg, rows = evaluate(render_fn, dataset, split)
    if as_json:
        click.echo(json.dumps({"aggregate": agg, "frames": rows}))
        return
    for r in rows:
        click.echo(f"{r['frame']:>24}  psnr {r['psnr']:6.2f}  "
                   f"ssim {r['ssim']:.4f}")
    click.echo(f"{'mean over ' + str(agg['count']) + ' frames':>24}  "
               f"psnr {agg['psnr']:6.2f}  ssim {agg['ssim']:.4f}")


@main.command("render")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--view", required=True, help="az,el,dist[,fov]")
@click.option("--light", "light_spec", required=True,
              help="az,el,dist[,intensity]")
@click.option("--mode", type=click.Choice(MODES), default="final",
              show_default=True)
@click.option("--resolution", type=int, default=512, show_default=True)
@click.option("--edit", "edits", multiple=True, help="key=value, repeatable")
@click.option("--out", type=click.Path(), required=True)
def render_cmd(checkpoint, view, light_spec, mode, resolution, edits, out):
    """Render one frame or one decomposition plane."""
    scene, params = load_checkpoint(checkpoint)
    camera = _parse_view(view, resolution)
    light = _parse_light(light_spec)
    try:
        edit = MaterialEdit.from_strings(edits)
    except ValueError as e:
        raise click.BadParameter(str(e))
    result = render(scene, params, camera, light, want_grad=False,
                    edit=None if edit.is_identity() else edit)
    if mode == "final":
        _save_image(Path(out), result.image, display=True)
    else:
        planes = shade_modes(result.gbuffer, camera)
        _save_image(Path(out), planes[mode], display=False)
    click.echo(f"wrote {out}")


@main.command("relight")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--envmap", type=click.Path(exists=True), required=True,
              help="equirectangular .hdr or .exr")
@click.option("--view", default="30,20,1.5", show_default=True)
@click.option("--resolution", type=int, default=512, show_default=True)
@click.option("--exposure", type=float, default=1.0, show_default=True)
@click.option("--edit", "edits", multiple=True, help="key=value, repeatable")
@click.option("--stage-radius", type=float, default=2.5, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def relight_cmd(checkpoint, envmap, view, resolution, exposure, edits,
                stage_radius, out):
    """Image-based relighting via the reflectance field."""
    scene, params = load_checkpoint(checkpoint)
    camera = _parse_view(view, resolution)
    stage = generate_light_stage(stage_radius)
    env = images.read_float_image(envmap)
    edit = MaterialEdit.from_strings(edits)
    field = build_reflectance_field(scene, params, camera, stage,
                                    edit=edit)
    weights = sample_envmap(env, stage)
    linear = ibl_compose(field, weights)
    images.write_png(Path(out), tone_map(linear, exposure))
    click.echo(f"wrote {out}")


@main.command("export-gbuffer")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--view", required=True, help="az,el,dist[,fov]")
@click.option("--light", "light_spec", default="45,45,2.5",
              show_default=True)
@click.option("--resolution", type=int, default=512, show_default=True)
@click.option("--out-prefix", required=True)
def export_gbuffer(checkpoint, view, light_spec, resolution, out_prefix):
    """Write every G-buffer plane as a float EXR (one file per plane)."""
    scene, params = load_checkpoint(checkpoint)
    camera = _parse_view(view, resolution)
    light = _parse_light(light_spec)
    result = render(scene, params, camera, light, want_grad=False)
    planes = shade_modes(result.gbuffer, camera)
    for name, plane in planes.items():
        path = Path(f"{out_prefix}.{name}.exr")
        images.write_exr(path, plane)
        click.echo(f"wrote {path}")


@main.command("serve")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--max-resolution", type=int, default=512, show_default=True)
def serve_cmd(checkpoint, port, host, max_resolution):
    """Start the interactive render service (HTTP + frame stream)."""
    import uvicorn

    from .service import make_app

    app = make_app(checkpoint, max_resolution=max_resolution)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    sys.exit(main())
