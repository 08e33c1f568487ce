// Thin WebSocket wrapper for the bridge protocol. First frame out is the
// bare hex token (the bridge turns it into a hello with seq 1 for us), after
// which every frame is JSON with a client-stamped seq starting at 2.

import { parseServer } from "./wire.js";
import type { Outbound, ServerMessage } from "./wire.js";

export interface BridgeHooks {
  onOpen(): void;
  onMessage(msg: ServerMessage): void;
  onClose(): void;
}

// Shape shared by the browser WebSocket and the `ws` package, which the
// node tests inject.
export interface SocketLike {
  readyState: number;
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: (() => void) | null;
  onerror: ((ev: unknown) => void) | null;
}

export type SocketCtor = new (url: string) => SocketLike;

const OPEN = 1;

export class BridgeSocket {
  private sock: SocketLike | null = null;
  private seq = 1; // seq 1 is spent by the hello the bridge builds from our token
  private closed = false;

  constructor(
    private readonly url: string,
    private readonly token: string,
    private readonly hooks: BridgeHooks,
    private readonly ctor: SocketCtor,
  ) {}

  connect(): void {
    const sock = new this.ctor(this.url);
    this.sock = sock;
    sock.onopen = () => {
      sock.send(this.token);
      this.hooks.onOpen();
    };
    sock.onmessage = (ev) => {
      if (typeof ev.data !== "string") return;
      const msg = parseServer(ev.data);
      if (msg === null) {
        console.warn("unparseable bridge frame", ev.data);
        return;
      }
      this.hooks.onMessage(msg);
    };
    sock.onclose = () => this.emitClose();
    sock.onerror = () => { /* a close event follows */ };
  }

  /** Send one frame; returns false when the socket is not open. */
  send(msg: Outbound): boolean {
    if (this.sock === null || this.sock.readyState !== OPEN) return false;
    this.seq += 1;
    try {
      this.sock.send(JSON.stringify({ ...msg, seq: this.seq }));
    } catch {
      return false;
    }
    return true;
  }

  close(): void {
    this.closed = true;
    this.sock?.close();
  }

  private emitClose(): void {
    if (this.closed) return;
    this.closed = true;
    this.hooks.onClose();
  }
}
