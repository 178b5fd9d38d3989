import { describe, expect, it, vi } from "vitest";

import { FrameStream, WebSocketLike } from "../src/client.js";
import type { RenderRequest } from "../src/types.js";

class FakeSocket implements WebSocketLike {
  sent: RenderRequest[] = [];
  onopen: ((ev?: unknown) => void) | null = null;
  onclose: ((ev?: unknown) => void) | null = null;
  onerror: ((ev?: unknown) => void) | null = null;
  onmessage: ((ev: { data: unknown }) => void) | null = null;
  binaryType = "arraybuffer";
  closed = false;

  send(data: string): void {
    this.sent.push(JSON.parse(data));
  }

  close(): void {
    this.closed = true;
    this.onclose?.();
  }

  reply(seq: number, bytes = 4): void {
    this.onmessage?.({ data: JSON.stringify({ seq, bytes }) });
    this.onmessage?.({ data: new ArrayBuffer(bytes) });
  }
}

const REQ = {
  camera: { azimuth: 0, elevation: 0, distance: 1.5, fov: 45 },
  light: { azimuth: 0, elevation: 45, distance: 2.5, intensity: 1 },
  edit: {},
  resolution: 64,
  mode: "final",
};

function openStream() {
  const sockets: FakeSocket[] = [];
  const frames: number[] = [];
  const status: boolean[] = [];
  const stream = new FrameStream(
    () => {
      const ws = new FakeSocket();
      sockets.push(ws);
      queueMicrotask(() => ws.onopen?.());
      return ws;
    },
    {
      onFrame: (_, header) => frames.push(header.seq),
      onStatus: (up) => status.push(up),
    },
  );
  return { stream, sockets, frames, status };
}

async function settle() {
  await new Promise((resolve) => setTimeout(resolve, 0));
}

describe("latest-request-wins stream", () => {
  it("sends the first request once connected", async () => {
    const { stream, sockets } = openStream();
    stream.request(REQ);
    await settle();
    expect(sockets[0].sent.length).toBe(1);
    expect(sockets[0].sent[0].seq).toBe(1);
  });

  it("coalesces a burst to the newest request", async () => {
    const { stream, sockets, frames } = openStream();
    stream.request(REQ);
    await settle();
    const ws = sockets[0];
    // burst while seq 1 is in flight: 2 and 3 queue, 2 is replaced by 3
    stream.request({ ...REQ, mode: "normal" });
    stream.request({ ...REQ, mode: "alpha" });
    ws.reply(1);
    await settle();
    expect(ws.sent.map((r) => r.seq)).toEqual([1, 3]);
    ws.reply(3);
    await settle();
    expect(frames).toEqual([1, 3]);
    expect(stream.lastDisplayedSeq).toBe(3);
  });

  it("drops frames older than one already shown", async () => {
    const { stream, sockets, frames } = openStream();
    stream.request(REQ);
    await settle();
    const ws = sockets[0];
    ws.onmessage?.({ data: JSON.stringify({ seq: 5, bytes: 4 }) });
    ws.onmessage?.({ data: new ArrayBuffer(4) });
    // a stale frame (lower seq) arriving afterwards is never displayed
    ws.onmessage?.({ data: JSON.stringify({ seq: 1, bytes: 4 }) });
    ws.onmessage?.({ data: new ArrayBuffer(4) });
    expect(frames).toEqual([5]);
  });

  it("surfaces request errors and keeps going", async () => {
    const errors: string[] = [];
    const sockets: FakeSocket[] = [];
    const stream = new FrameStream(
      () => {
        const ws = new FakeSocket();
        sockets.push(ws);
        queueMicrotask(() => ws.onopen?.());
        return ws;
      },
      { onFrame: () => undefined, onError: (m) => errors.push(m) },
    );
    stream.request(REQ);
    await settle();
    sockets[0].onmessage?.({
      data: JSON.stringify({ seq: 1, errors: { resolution: "too big" } }),
    });
    expect(errors.length).toBe(1);
    stream.request(REQ);
    await settle();
    expect(sockets[0].sent.length).toBe(2);
  });

  it("reconnects with status callbacks after a drop", async () => {
    vi.useFakeTimers();
    try {
      const sockets: FakeSocket[] = [];
      const status: boolean[] = [];
      new FrameStream(
        () => {
          const ws = new FakeSocket();
          sockets.push(ws);
          queueMicrotask(() => ws.onopen?.());
          return ws;
        },
        { onFrame: () => undefined, onStatus: (up) => status.push(up) },
      );
      await vi.advanceTimersByTimeAsync(1);
      expect(status).toEqual([true]);
      sockets[0].close();
      expect(status).toEqual([true, false]);
      await vi.advanceTimersByTimeAsync(500);
      expect(sockets.length).toBe(2);
      expect(status).toEqual([true, false, true]);
    } finally {
      vi.useRealTimers();
    }
  });
});
