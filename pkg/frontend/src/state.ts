/** UI state and its pure mapping onto render requests.
 *
 * The outgoing request is a function of this state and nothing else, so
 * every control change is reproducible and the display can never drift
 * from what the server was asked for.
 */

import type { RenderRequest, ServiceMeta } from "./types.js";

export interface UiState {
  camera: { azimuth: number; elevation: number; distance: number; fov: number };
  light: { azimuth: number; elevation: number; distance: number; intensity: number };
  sliders: {
    roughness: number | null; // null = keep the trained value
    metalness: number | null;
    subsurfaceness: number | null;
    residualIntensity: number;
    opacityScale: number;
  };
  basecolorTint: [number, number, number];
  residualTint: [number, number, number];
  mode: string;
  resolution: number;
}

export function defaultState(meta: ServiceMeta): UiState {
  return {
    camera: { azimuth: 30, elevation: 20, distance: 1.5, fov: 45 },
    light: { azimuth: 45, elevation: 45, distance: 2.5, intensity: 1.0 },
    sliders: {
      roughness: null,
      metalness: null,
      subsurfaceness: null,
      residualIntensity: 1.0,
      opacityScale: 1.0,
    },
    basecolorTint: [1, 1, 1],
    residualTint: [1, 1, 1],
    mode: "final",
    resolution: Math.min(256, meta.max_resolution),
  };
}

function clamp(v: number, lo: number, hi: number): number {
  return Math.min(Math.max(v, lo), hi);
}

/** Clamp every control into the ranges the service declared. */
export function clampToMeta(state: UiState, meta: ServiceMeta): UiState {
  const cam = meta.camera;
  const light = meta.light;
  const schema = meta.edit_schema;
  const sliderClamp = (v: number | null, key: string) =>
    v === null ? null : clamp(v, schema[key]?.min ?? 0, schema[key]?.max ?? 1);
  return {
    ...state,
    camera: {
      azimuth: state.camera.azimuth,
      elevation: clamp(state.camera.elevation, ...cam.elevation),
      distance: clamp(state.camera.distance, ...cam.distance),
      fov: clamp(state.camera.fov, ...cam.fov),
    },
    light: {
      azimuth: state.light.azimuth,
      elevation: clamp(state.light.elevation, ...light.elevation),
      distance: clamp(state.light.distance, ...light.distance),
      intensity: clamp(state.light.intensity, ...light.intensity),
    },
    sliders: {
      roughness: sliderClamp(state.sliders.roughness, "roughness_set"),
      metalness: sliderClamp(state.sliders.metalness, "metalness_set"),
      subsurfaceness: sliderClamp(state.sliders.subsurfaceness,
        "subsurfaceness_set"),
      residualIntensity: clamp(state.sliders.residualIntensity,
        schema.residual_intensity?.min ?? 0,
        schema.residual_intensity?.max ?? 2),
      opacityScale: clamp(state.sliders.opacityScale,
        schema.opacity_scale?.min ?? 0, schema.opacity_scale?.max ?? 2),
    },
    resolution: Math.min(state.resolution, meta.max_resolution),
  };
}

const isTinted = (t: [number, number, number]) =>
  t[0] !== 1 || t[1] !== 1 || t[2] !== 1;

/** The outgoing request is a pure function of the UI state. */
export function toRenderRequest(state: UiState, seq: number): RenderRequest {
  const edit: Record<string, number | number[]> = {};
  if (state.sliders.roughness !== null) edit.roughness_set = state.sliders.roughness;
  if (state.sliders.metalness !== null) edit.metalness_set = state.sliders.metalness;
  if (state.sliders.subsurfaceness !== null)
    edit.subsurfaceness_set = state.sliders.subsurfaceness;
  if (state.sliders.residualIntensity !== 1.0)
    edit.residual_intensity = state.sliders.residualIntensity;
  if (state.sliders.opacityScale !== 1.0)
    edit.opacity_scale = state.sliders.opacityScale;
  if (isTinted(state.basecolorTint)) edit.basecolor_tint = [...state.basecolorTint];
  if (isTinted(state.residualTint)) edit.residual_tint = [...state.residualTint];
  return {
    camera: { ...state.camera },
    light: { ...state.light },
    edit,
    resolution: state.resolution,
    mode: state.mode,
    seq,
  };
}
