/** DOM shell: binds sliders, pickers, the light hemisphere widget and the
 * mode selector to a UiSession, and blits received frames to the canvas.
 * All rendering happens server-side; this stays a thin, testable layer.
 */

import { ServiceClient } from "./client.js";
import { UiSession } from "./session.js";
import type { UiState } from "./state.js";

const SLIDERS: Array<{ key: keyof UiState["sliders"]; label: string;
                       schema: string; trained?: boolean }> = [
  { key: "roughness", label: "roughness", schema: "roughness_set",
    trained: true },
  { key: "metalness", label: "metalness", schema: "metalness_set",
    trained: true },
  { key: "subsurfaceness", label: "subsurfaceness",
    schema: "subsurfaceness_set", trained: true },
  { key: "residualIntensity", label: "residual intensity",
    schema: "residual_intensity" },
  { key: "opacityScale", label: "opacity scale", schema: "opacity_scale" },
];

export async function mountViewer(root: HTMLElement,
                                  serviceUrl: string): Promise<UiSession> {
  const banner = el(root, "div", "banner");
  banner.textContent = "connecting…";
  const canvas = el(root, "canvas") as HTMLCanvasElement;
  const controls = el(root, "div", "controls");

  const client = new ServiceClient(serviceUrl);
  let session: UiSession;
  try {
    session = await UiSession.connect(client, {
      onFrame: (frame) => blit(canvas, frame),
      onStatus: (up) => {
        banner.textContent = up ? "" : "disconnected, retrying…";
        banner.style.display = up ? "none" : "block";
      },
      onError: (message) => {
        banner.textContent = `request rejected: ${message}`;
        banner.style.display = "block";
      },
    });
  } catch (err) {
    banner.textContent = `cannot reach ${serviceUrl}: ${err}`;
    throw err;
  }

  canvas.width = session.state.resolution;
  canvas.height = session.state.resolution;

  buildCameraControls(controls, session);
  buildLightWidget(controls, session);
  for (const spec of SLIDERS) {
    buildSlider(controls, session, spec);
  }
  buildTint(controls, session, "basecolor tint", "basecolorTint");
  buildTint(controls, session, "residual tint", "residualTint");
  buildModeSelector(controls, session);

  session.update(() => undefined); // first frame
  return session;
}

function el(parent: HTMLElement, tag: string, cls?: string): HTMLElement {
  const node = parent.ownerDocument.createElement(tag);
  if (cls) node.className = cls;
  parent.appendChild(node);
  return node;
}

function blit(canvas: HTMLCanvasElement, frame: ArrayBuffer): void {
  const blob = new Blob([frame], { type: "image/png" });
  const url = URL.createObjectURL(blob);
  const img = new Image();
  img.onload = () => {
    const ctx = canvas.getContext("2d");
    ctx?.drawImage(img, 0, 0, canvas.width, canvas.height);
    URL.revokeObjectURL(url);
  };
  img.src = url;
}

function labeled(parent: HTMLElement, text: string): HTMLElement {
  const wrap = el(parent, "label", "control");
  const span = el(wrap, "span");
  span.textContent = text;
  return wrap;
}

function buildSlider(parent: HTMLElement, session: UiSession,
                     spec: (typeof SLIDERS)[number]): void {
  const schema = session.meta.edit_schema[spec.schema];
  const wrap = labeled(parent, spec.label);
  const input = el(wrap, "input") as HTMLInputElement;
  input.type = "range";
  input.min = String(schema?.min ?? 0);
  input.max = String(schema?.max ?? 1);
  input.step = "0.01";
  input.dataset.control = spec.schema;
  const current = session.state.sliders[spec.key];
  input.value = String(current ?? (spec.trained ? 0.5 : 1.0));
  input.addEventListener("input", () => {
    session.setSlider(spec.key, Number(input.value));
  });
}

function buildTint(parent: HTMLElement, session: UiSession, label: string,
                   key: "basecolorTint" | "residualTint"): void {
  const wrap = labeled(parent, label);
  const input = el(wrap, "input") as HTMLInputElement;
  input.type = "color";
  input.value = "#ffffff";
  input.dataset.control = key;
  input.addEventListener("input", () => {
    const hex = input.value;
    const rgb: [number, number, number] = [
      parseInt(hex.slice(1, 3), 16) / 255,
      parseInt(hex.slice(3, 5), 16) / 255,
      parseInt(hex.slice(5, 7), 16) / 255,
    ];
    session.update((s) => {
      s[key] = rgb;
    });
  });
}

function buildModeSelector(parent: HTMLElement, session: UiSession): void {
  const wrap = labeled(parent, "mode");
  const select = el(wrap, "select") as HTMLSelectElement;
  select.dataset.control = "mode";
  for (const mode of session.meta.modes) {
    const opt = el(select, "option") as HTMLOptionElement;
    opt.value = mode;
    opt.textContent = mode;
  }
  select.value = session.state.mode;
  select.addEventListener("change", () => session.setMode(select.value));
}

function buildCameraControls(parent: HTMLElement, session: UiSession): void {
  for (const [key, [lo, hi]] of Object.entries(session.meta.camera)) {
    const wrap = labeled(parent, `camera ${key}`);
    const input = el(wrap, "input") as HTMLInputElement;
    input.type = "range";
    input.min = String(lo);
    input.max = String(hi);
    input.step = "0.5";
    input.dataset.control = `camera.${key}`;
    input.value = String((session.state.camera as any)[key]);
    input.addEventListener("input", () => {
      session.update((s) => {
        (s.camera as any)[key] = Number(input.value);
      });
    });
  }
}

/** Hemisphere widget: stage-light markers plus a free light handle. */
function buildLightWidget(parent: HTMLElement, session: UiSession): void {
  const wrap = labeled(parent, "light");
  const widget = el(wrap, "canvas", "light-widget") as HTMLCanvasElement;
  widget.width = widget.height = 160;
  widget.dataset.control = "light";
  widget.dataset.markers = String(session.meta.stage_lights.length);
  drawHemisphere(widget, session);
  let dragging = false;
  const move = (ev: MouseEvent) => {
    if (!dragging) return;
    const rect = widget.getBoundingClientRect();
    const x = ((ev.clientX - rect.left) / rect.width) * 2 - 1;
    const y = 1 - ((ev.clientY - rect.top) / rect.height) * 2;
    const r = Math.min(Math.hypot(x, y), 1);
    session.update((s) => {
      s.light.azimuth = (Math.atan2(y, x) * 180) / Math.PI;
      s.light.elevation = 90 * (1 - r);
    });
    drawHemisphere(widget, session);
  };
  widget.addEventListener("mousedown", (ev) => {
    dragging = true;
    move(ev as MouseEvent);
  });
  widget.addEventListener("mousemove", (ev) => move(ev as MouseEvent));
  widget.addEventListener("mouseup", () => {
    dragging = false;
  });
}

function drawHemisphere(widget: HTMLCanvasElement, session: UiSession): void {
  const ctx = widget.getContext("2d");
  if (!ctx) return;
  const size = widget.width;
  ctx.clearRect(0, 0, size, size);
  ctx.strokeStyle = "#888";
  ctx.beginPath();
  ctx.arc(size / 2, size / 2, size / 2 - 2, 0, 2 * Math.PI);
  ctx.stroke();
  ctx.fillStyle = "#777";
  for (const [x, y, z] of session.meta.stage_lights) {
    const norm = Math.hypot(x, y, z) || 1;
    const r = (1 - Math.asin(z / norm) / (Math.PI / 2)) * (size / 2 - 4);
    const az = Math.atan2(y, x);
    ctx.fillRect(size / 2 + r * Math.cos(az) - 1,
                 size / 2 - r * Math.sin(az) - 1, 2, 2);
  }
  const s = session.state.light;
  const rr = (1 - s.elevation / 90) * (size / 2 - 4);
  const aa = (s.azimuth * Math.PI) / 180;
  ctx.fillStyle = "#e33";
  ctx.beginPath();
  ctx.arc(size / 2 + rr * Math.cos(aa), size / 2 - rr * Math.sin(aa), 4, 0,
          2 * Math.PI);
  ctx.fill();
}
