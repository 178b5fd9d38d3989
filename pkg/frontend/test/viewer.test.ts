// @vitest-environment happy-dom
import { describe, expect, it, vi } from "vitest";

import { mountViewer } from "../src/viewer.js";

const META = {
  max_resolution: 128,
  modes: ["final", "normal", "alpha"],
  stage_lights: Array.from({ length: 112 }, (_, i) => [
    Math.cos(i), Math.sin(i), 1.0,
  ]),
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

class StubSocket {
  onopen: (() => void) | null = null;
  onclose: (() => void) | null = null;
  onerror: (() => void) | null = null;
  onmessage: ((ev: { data: unknown }) => void) | null = null;
  binaryType = "arraybuffer";
  sent: string[] = [];
  constructor() {
    queueMicrotask(() => this.onopen?.());
  }
  send(data: string): void {
    this.sent.push(data);
  }
  close(): void {
    this.onclose?.();
  }
}

function stubGlobals(metaOk: boolean) {
  (globalThis as any).WebSocket = StubSocket;
  vi.stubGlobal("fetch", vi.fn(async (url: string) => {
    if (!metaOk) throw new Error("connection refused");
    if (url.endsWith("/meta")) {
      return { ok: true, json: async () => META };
    }
    return { ok: true, arrayBuffer: async () => new ArrayBuffer(4) };
  }));
}

describe("viewer shell", () => {
  it("populates controls from the service self-description", async () => {
    stubGlobals(true);
    const root = document.createElement("div");
    document.body.appendChild(root);
    const session = await mountViewer(root, "http://service");
    try {
      const sliders = root.querySelectorAll("input[type=range]");
      expect(sliders.length).toBeGreaterThanOrEqual(5);
      const rough = root.querySelector(
        "input[data-control=roughness_set]") as HTMLInputElement;
      expect(rough.min).toBe("0");
      expect(rough.max).toBe("1");
      const modes = root.querySelectorAll("select option");
      expect(modes.length).toBe(META.modes.length);
      const widget = root.querySelector(
        "[data-control=light]") as HTMLElement;
      expect(widget.dataset.markers).toBe("112");
    } finally {
      session.close();
    }
  });

  it("shows an error banner when the service is unreachable", async () => {
    stubGlobals(false);
    const root = document.createElement("div");
    document.body.appendChild(root);
    await expect(mountViewer(root, "http://nowhere")).rejects.toThrow();
    const banner = root.querySelector(".banner") as HTMLElement;
    expect(banner.textContent).toContain("cannot reach");
  });

  it("slider input issues a request derived from state", async () => {
    stubGlobals(true);
    const root = document.createElement("div");
    document.body.appendChild(root);
    const session = await mountViewer(root, "http://service");
    try {
      const slider = root.querySelector(
        "input[data-control=subsurfaceness_set]") as HTMLInputElement;
      slider.value = "0";
      slider.dispatchEvent(new Event("input"));
      expect(session.state.sliders.subsurfaceness).toBe(0);
    } finally {
      session.close();
    }
  });
});
