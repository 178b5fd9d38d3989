/** Service client: metadata fetch, one-shot renders, and the frame stream.
 *
 * The stream applies latest-wins coalescing on the client as well: while a
 * request is in flight, newer state replaces the queued one, and a frame is
 * only displayed if no newer frame has already arrived.
 */

import type { FrameHeader, RenderRequest, ServiceMeta } from "./types.js";

type FetchLike = (url: string, init?: any) => Promise<any>;

export interface WebSocketLike {
  send(data: string): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  binaryType: string;
}

export interface ClientDeps {
  fetchImpl?: FetchLike;
  wsFactory?: (url: string) => WebSocketLike;
}

export class ServiceClient {
  private fetchImpl: FetchLike;
  private wsFactory: (url: string) => WebSocketLike;

  constructor(readonly baseUrl: string, deps: ClientDeps = {}) {
    this.fetchImpl = deps.fetchImpl ?? ((u, i) => fetch(u, i));
    this.wsFactory = deps.wsFactory ??
      ((u) => new (globalThis as any).WebSocket(u) as WebSocketLike);
  }

  async meta(): Promise<ServiceMeta> {
    const res = await this.fetchImpl(`${this.baseUrl}/meta`);
    if (!res.ok) throw new Error(`meta failed: ${res.status}`);
    return (await res.json()) as ServiceMeta;
  }

  async render(request: RenderRequest): Promise<ArrayBuffer> {
    const res = await this.fetchImpl(`${this.baseUrl}/render`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(request),
    });
    if (!res.ok) {
      throw new Error(`render failed: ${res.status} ${await res.text()}`);
    }
    return await res.arrayBuffer();
  }

  openStream(handlers: StreamHandlers): FrameStream {
    const wsUrl = this.baseUrl.replace(/^http/, "ws") + "/ws";
    return new FrameStream(() => this.wsFactory(wsUrl), handlers);
  }
}

export interface StreamHandlers {
  onFrame: (frame: ArrayBuffer, header: FrameHeader) => void;
  onStatus?: (connected: boolean) => void;
  onError?: (message: string) => void;
}

export class FrameStream {
  private ws: WebSocketLike | null = null;
  private pending: RenderRequest | null = null;
  private inFlight = false;
  private header: FrameHeader | null = null;
  private seq = 0;
  private displayedSeq = -1;
  private closed = false;
  private retryMs = 250;

  constructor(private connect: () => WebSocketLike,
              private handlers: StreamHandlers) {
    this.open();
  }

  private open(): void {
    if (this.closed) return;
    const ws = this.connect();
    ws.binaryType = "arraybuffer";
    this.ws = ws;
    ws.onopen = () => {
      this.retryMs = 250;
      this.handlers.onStatus?.(true);
      this.flush();
    };
    ws.onclose = () => {
      this.ws = null;
      this.inFlight = false;
      this.handlers.onStatus?.(false);
      if (!this.closed) {
        setTimeout(() => this.open(), this.retryMs);
        this.retryMs = Math.min(this.retryMs * 2, 5000);
      }
    };
    ws.onerror = () => { /* close follows */ };
    ws.onmessage = (ev) => this.onMessage(ev.data);
  }

  /** Queue a request derived from the newest state; older queued ones drop. */
  request(req: Omit<RenderRequest, "seq">): number {
    this.seq += 1;
    this.pending = { ...req, seq: this.seq };
    this.flush();
    return this.seq;
  }

  private flush(): void {
    if (!this.ws || this.inFlight || this.pending === null) return;
    const req = this.pending;
    this.pending = null;
    this.inFlight = true;
    try {
      this.ws.send(JSON.stringify(req));
    } catch {
      this.pending = this.pending ?? req;
      this.inFlight = false;
    }
  }

  private onMessage(data: unknown): void {
    if (typeof data === "string") {
      const header = JSON.parse(data) as FrameHeader;
      if (header.errors || header.error) {
        this.inFlight = false;
        this.handlers.onError?.(JSON.stringify(header.errors ?? header.error));
        this.flush();
        return;
      }
      this.header = header;
      return;
    }
    const frame = data as ArrayBuffer;
    const header = this.header ?? { seq: -1 };
    this.header = null;
    this.inFlight = false;
    // never show a frame older than one already displayed
    if (header.seq >= this.displayedSeq) {
      this.displayedSeq = header.seq;
      this.handlers.onFrame(frame, header);
    }
    this.flush();
  }

  get lastDisplayedSeq(): number {
    return this.displayedSeq;
  }

  close(): void {
    this.closed = true;
    this.ws?.close();
  }
}
