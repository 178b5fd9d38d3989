"""Local render service driving the interactive viewer.

Endpoints: ``GET /meta`` (self-description: limits, stage lights, edit
schema), ``POST /render`` (render request -> PNG bytes), and the
``/ws`` frame stream where the newest request always wins: requests that
arrive while a frame is being rendered replace any queued one, so slider
drags never build a backlog.  The checkpoint is immutable here; renders
are deterministic and safe to run concurrently.
"""

from __future__ import annotations

import asyncio
import io
import json
from dataclasses import fields

import numpy as np
from fastapi import FastAPI, Response, WebSocket, WebSocketDisconnect
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, Field, ValidationError

from .checkpoint import load_checkpoint
from .dataset import generate_light_stage, linear_to_srgb, orbit_camera
from .pipeline import render
from .relight import MaterialEdit
from .scene import PointLight
from .shading import shade_modes

MODES = ("final", "basecolor", "roughness", "metalness", "normal",
         "residual", "incident", "alpha", "subsurfaceness", "depth")


class OrbitCamera(BaseModel):
    azimuth: float = 30.0
    elevation: float = 20.0
    distance: float = 1.5
    fov: float = Field(45.0, gt=1.0, lt=170.0)


class LightSpec(BaseModel):
    azimuth: float = 45.0
    elevation: float = 45.0
    distance: float = 2.5
    intensity: float = Field(1.0, ge=0.0)


class RenderRequest(BaseModel):
    camera: OrbitCamera = OrbitCamera()
    light: LightSpec = LightSpec()
    edit: dict = {}
    resolution: int = Field(256, gt=0)
    mode: str = "final"
    seq: int = 0


class RenderEngine:
    """Immutable checkpoint plus the request -> PNG path."""

    def __init__(self, scene, params, max_resolution: int = 512,
                 stage_radius: float = 2.5):
        self.scene = scene
        self.params = params
        self.max_resolution = max_resolution
        self.stage = generate_light_stage(stage_radius)

    @classmethod
    def from_checkpoint(cls, path, **kw) -> "RenderEngine":
        scene, params = load_checkpoint(path)
        return cls(scene, params, **kw)

    def validate(self, req: RenderRequest):
        problems = {}
        if req.resolution > self.max_resolution:
            problems["resolution"] = (f"{req.resolution} exceeds maximum "
                                      f"{self.max_resolution}")
        if req.mode not in MODES:
            problems["mode"] = f"unknown mode {req.mode!r}; choose from {MODES}"
        for key in ("azimuth", "elevation", "distance", "fov"):
            if not np.isfinite(getattr(req.camera, key)):
                problems[f"camera.{key}"] = "must be finite"
        try:
            MaterialEdit.from_dict(req.edit)
        except (ValueError, TypeError) as e:
            problems["edit"] = str(e)
        return problems

    def render_image(self, req: RenderRequest) -> np.ndarray:
        cam = orbit_camera(req.camera.azimuth, req.camera.elevation,
                           req.camera.distance,
                           (req.resolution, req.resolution), req.camera.fov)
        az = np.deg2rad(req.light.azimuth)
        el = np.deg2rad(req.light.elevation)
        pos = req.light.distance * np.array([
            np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        light = PointLight(pos, req.light.intensity)
        edit = MaterialEdit.from_dict(req.edit)
        result = render(self.scene, self.params, cam, light, want_grad=False,
                        edit=None if edit.is_identity() else edit)
        if req.mode == "final":
            return linear_to_srgb(np.clip(result.image, 0.0, 1.0))
        plane = shade_modes(result.gbuffer, cam)[req.mode]
        return np.clip(plane, 0.0, 1.0)

    def render_png(self, req: RenderRequest, jpeg: bool = False) -> bytes:
        img = self.render_image(req)
        data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[:, :, 0]
        mode = "L" if data.ndim == 2 else "RGB"
        buf = io.BytesIO()
        if jpeg:
            Image.fromarray(data, mode=mode).save(buf, format="JPEG")
        else:
            Image.fromarray(data, mode=mode).save(buf, format="PNG",
                                                  compress_level=1)
        return buf.getvalue()

    def meta(self) -> dict:
        edit_schema = {}
        for f in fields(MaterialEdit):
            if f.name.endswith("_tint"):
                edit_schema[f.name] = {"kind": "tint", "channels": 3,
                                       "min": 0.0, "max": 2.0}
            elif f.name.endswith("_scale") or f.name == "residual_intensity":
                edit_schema[f.name] = {"kind": "scale", "min": 0.0, "max": 2.0}
            else:
                edit_schema[f.name] = {"kind": "set", "min": 0.0, "max": 1.0}
        return {
            "max_resolution": self.max_resolution,
            "modes": list(MODES),
            "stage_lights": self.stage.positions.tolist(),
            "edit_schema": edit_schema,
            "camera": {"azimuth": [0.0, 360.0], "elevation": [-30.0, 85.0],
                       "distance": [0.5, 5.0], "fov": [20.0, 90.0]},
            "light": {"azimuth": [0.0, 360.0], "elevation": [0.0, 85.0],
                      "distance": [0.5, 5.0], "intensity": [0.0, 4.0]},
            "gaussians": len(self.scene.cloud),
        }


def make_app(checkpoint_or_engine, max_resolution: int = 512) -> FastAPI:
    if isinstance(checkpoint_or_engine, RenderEngine):
        engine = checkpoint_or_engine
    else:
        engine = RenderEngine.from_checkpoint(checkpoint_or_engine,
                                              max_resolution=max_resolution)
    app = FastAPI(title="sssplat render service")
    app.state.engine = engine

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request, exc):
        return JSONResponse(status_code=400,
                            content={"errors": exc.errors()})

    @app.get("/meta")
    async def meta():
        return engine.meta()

    @app.post("/render")
    async def render_endpoint(req: RenderRequest, jpeg: bool = False):
        problems = engine.validate(req)
        if problems:
            return JSONResponse(status_code=400, content={"errors": problems})
        loop = asyncio.get_running_loop()
        png = await loop.run_in_executor(None, engine.render_png, req, jpeg)
        return Response(content=png,
                        media_type="image/jpeg" if jpeg else "image/png")

    @app.websocket("/ws")
    async def frame_stream(ws: WebSocket):
        await ws.accept()
        latest: dict = {"req": None}
        wake = asyncio.Event()
        closed = asyncio.Event()

        async def receiver():
            try:
                while True:
                    text = await ws.receive_text()
                    try:
                        req = RenderRequest(**json.loads(text))
                    except (ValidationError, json.JSONDecodeError) as e:
                        await ws.send_text(json.dumps(
                            {"error": str(e)}))
                        continue
                    latest["req"] = req  # newest request wins
                    wake.set()
            except WebSocketDisconnect:
                pass
            finally:
                closed.set()
                wake.set()

        recv_task = asyncio.create_task(receiver())
        loop = asyncio.get_running_loop()
        try:
            while not closed.is_set():
                await wake.wait()
                wake.clear()
                req = latest["req"]
                latest["req"] = None
                if req is None:
                    continue
                problems = engine.validate(req)
                if problems:
                    await ws.send_text(json.dumps(
                        {"seq": req.seq, "errors": problems}))
                    continue
                png = await loop.run_in_executor(None, engine.render_png, req)
                if closed.is_set():
                    break
                await ws.send_text(json.dumps({"seq": req.seq,
                                               "bytes": len(png)}))
                await ws.send_bytes(png)
        except WebSocketDisconnect:
            pass
        finally:
            recv_task.cancel()
    return app
