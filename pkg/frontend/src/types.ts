/** Wire types mirrored from the render service's self-description. */

export interface OrbitCamera {
  azimuth: number;
  elevation: number;
  distance: number;
  fov: number;
}

export interface LightSpec {
  azimuth: number;
  elevation: number;
  distance: number;
  intensity: number;
}

export interface RenderRequest {
  camera: OrbitCamera;
  light: LightSpec;
  edit: Record<string, number | number[]>;
  resolution: number;
  mode: string;
  seq: number;
}

export interface EditField {
  kind: "set" | "scale" | "tint";
  min: number;
  max: number;
  channels?: number;
}

export interface ServiceMeta {
  max_resolution: number;
  modes: string[];
  stage_lights: number[][];
  edit_schema: Record<string, EditField>;
  camera: Record<string, [number, number]>;
  light: Record<string, [number, number]>;
  gaussians: number;
}

export interface FrameHeader {
  seq: number;
  bytes?: number;
  errors?: Record<string, string>;
  error?: string;
}
