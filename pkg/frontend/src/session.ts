/** A live editing session: UI state + the frame stream, no DOM.
 *
 * The viewer binds controls to this; tests script it directly. Every
 * mutation re-derives the render request from state (never ad hoc) and
 * hands it to the stream, which coalesces to the newest request.
 */

import { FrameStream, ServiceClient, StreamHandlers } from "./client.js";
import { clampToMeta, defaultState, toRenderRequest, UiState } from "./state.js";
import type { FrameHeader, ServiceMeta } from "./types.js";

export interface SessionEvents {
  onFrame?: (frame: ArrayBuffer, header: FrameHeader) => void;
  onStatus?: (connected: boolean) => void;
  onError?: (message: string) => void;
}

export class UiSession {
  meta!: ServiceMeta;
  state!: UiState;
  private stream!: FrameStream;
  private frameWaiters: Array<(h: FrameHeader) => void> = [];
  lastFrame: ArrayBuffer | null = null;
  lastHeader: FrameHeader | null = null;

  private constructor(readonly client: ServiceClient) {}

  static async connect(client: ServiceClient,
                       events: SessionEvents = {}): Promise<UiSession> {
    const session = new UiSession(client);
    session.meta = await client.meta();
    session.state = defaultState(session.meta);
    const handlers: StreamHandlers = {
      onFrame: (frame, header) => {
        session.lastFrame = frame;
        session.lastHeader = header;
        events.onFrame?.(frame, header);
        const waiters = session.frameWaiters;
        session.frameWaiters = [];
        for (const w of waiters) w(header);
      },
      onStatus: events.onStatus,
      onError: events.onError,
    };
    session.stream = client.openStream(handlers);
    return session;
  }

  /** Apply a partial state update and issue the coalesced render request. */
  update(change: (state: UiState) => void): number {
    change(this.state);
    this.state = clampToMeta(this.state, this.meta);
    return this.stream.request(toRenderRequest(this.state, 0));
  }

  setSlider(name: keyof UiState["sliders"], value: number): number {
    return this.update((s) => {
      (s.sliders as any)[name] = value;
    });
  }

  dragLight(azimuthDelta: number, elevationDelta = 0): number {
    return this.update((s) => {
      s.light.azimuth = (s.light.azimuth + azimuthDelta) % 360;
      s.light.elevation += elevationDelta;
    });
  }

  orbit(azimuthDelta: number, elevationDelta = 0): number {
    return this.update((s) => {
      s.camera.azimuth = (s.camera.azimuth + azimuthDelta) % 360;
      s.camera.elevation += elevationDelta;
    });
  }

  setMode(mode: string): number {
    if (!this.meta.modes.includes(mode)) {
      throw new Error(`unknown mode ${mode}`);
    }
    return this.update((s) => {
      s.mode = mode;
    });
  }

  /** Resolve when a frame with seq >= target arrives. */
  waitForFrame(targetSeq: number, timeoutMs = 5000): Promise<FrameHeader> {
    if (this.lastHeader && this.lastHeader.seq >= targetSeq) {
      return Promise.resolve(this.lastHeader);
    }
    return new Promise((resolve, reject) => {
      const timer = setTimeout(
        () => reject(new Error(`no frame after ${timeoutMs}ms`)), timeoutMs);
      const check = (header: FrameHeader) => {
        if (header.seq >= targetSeq) {
          clearTimeout(timer);
          resolve(header);
        } else {
          this.frameWaiters.push(check);
        }
      };
      this.frameWaiters.push(check);
    });
  }

  close(): void {
    this.stream.close();
  }
}
