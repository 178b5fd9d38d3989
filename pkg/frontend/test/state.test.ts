import { describe, expect, it } from "vitest";

import { clampToMeta, defaultState, toRenderRequest } from "../src/state.js";
import type { ServiceMeta } from "../src/types.js";

const META: ServiceMeta = {
  max_resolution: 256,
  modes: ["final", "normal", "alpha"],
  stage_lights: [[0, 0, 2.5]],
  edit_schema: {
    roughness_set: { kind: "set", min: 0, max: 1 },
    metalness_set: { kind: "set", min: 0, max: 1 },
    subsurfaceness_set: { kind: "set", min: 0, max: 1 },
    residual_intensity: { kind: "scale", min: 0, max: 2 },
    opacity_scale: { kind: "scale", min: 0, max: 2 },
    basecolor_tint: { kind: "tint", min: 0, max: 2, channels: 3 },
    residual_tint: { kind: "tint", min: 0, max: 2, channels: 3 },
  },
  camera: { azimuth: [0, 360], elevation: [-30, 85], distance: [0.5, 5],
            fov: [20, 90] },
  light: { azimuth: [0, 360], elevation: [0, 85], distance: [0.5, 5],
           intensity: [0, 4] },
  gaussians: 100,
};

describe("render request derivation", () => {
  it("is a pure function of the state", () => {
    const state = defaultState(META);
    state.sliders.subsurfaceness = 0.25;
    const a = toRenderRequest(state, 1);
    const b = toRenderRequest(state, 1);
    expect(a).toEqual(b);
  });

  it("untouched trained sliders issue no edit", () => {
    const req = toRenderRequest(defaultState(META), 0);
    expect(req.edit).toEqual({});
  });

  it("moved sliders become edit fields", () => {
    const state = defaultState(META);
    state.sliders.subsurfaceness = 0;
    state.sliders.residualIntensity = 0.5;
    state.basecolorTint = [1, 0.5, 0.25];
    const req = toRenderRequest(state, 3);
    expect(req.edit.subsurfaceness_set).toBe(0);
    expect(req.edit.residual_intensity).toBe(0.5);
    expect(req.edit.basecolor_tint).toEqual([1, 0.5, 0.25]);
    expect(req.seq).toBe(3);
  });

  it("camera and light pass through verbatim", () => {
    const state = defaultState(META);
    state.light.azimuth = 67.5;
    const req = toRenderRequest(state, 0);
    expect(req.light.azimuth).toBe(67.5);
    expect(req.camera).toEqual(state.camera);
  });
});

describe("meta-declared ranges", () => {
  it("clamps sliders into the schema ranges", () => {
    const state = defaultState(META);
    state.sliders.roughness = 3.0;
    state.sliders.residualIntensity = -1;
    const clamped = clampToMeta(state, META);
    expect(clamped.sliders.roughness).toBe(1);
    expect(clamped.sliders.residualIntensity).toBe(0);
  });

  it("clamps camera and resolution", () => {
    const state = defaultState(META);
    state.camera.distance = 99;
    state.resolution = 4096;
    const clamped = clampToMeta(state, META);
    expect(clamped.camera.distance).toBe(5);
    expect(clamped.resolution).toBe(256);
  });

  it("leaves null trained sliders untouched", () => {
    const clamped = clampToMeta(defaultState(META), META);
    expect(clamped.sliders.roughness).toBeNull();
  });
});
