/** Socket lifecycle: connect, reconnect with backoff, decouple the
 * reader from rendering through a one-slot latest-frame buffer.
 *
 * The reader thread of control never waits on drawing: every parsed
 * frame overwrites the single slot, and the render loop takes whatever
 * is newest when it wakes up.  State transitions all go through the
 * reducer in state.ts.
 */

import { controlMessage, parseMessage } from "./protocol.js";
import type { ControlChange, FrameMessage } from "./protocol.js";
import {
  applyMessage,
  backoffDelay,
  initialState,
  markPending,
  setConnection,
} from "./state.js";
import type { ViewState } from "./state.js";

type SocketFactory = (url: string) => WebSocket;

export class ConsoleClient {
  state: ViewState = initialState();
  onChange: (s: ViewState) => void = () => {};

  private url: string;
  private ws: WebSocket | null = null;
  private attempt = 0;
  private closedByUser = false;
  private latestFrame: FrameMessage | null = null; // the one-slot buffer
  private makeSocket: SocketFactory;

  constructor(url: string, makeSocket?: SocketFactory) {
    this.url = url;
    this.makeSocket = makeSocket ?? ((u) => new WebSocket(u));
  }

  connect(): void {
    this.closedByUser = false;
    this.state = setConnection(this.state, "connecting");
    this.onChange(this.state);
    const ws = this.makeSocket(this.url);
    this.ws = ws;

    ws.onopen = () => {
      this.attempt = 0;
      this.state = setConnection(this.state, "open");
      this.onChange(this.state);
      ws.send(JSON.stringify({ type: "start" }));
    };

    ws.onmessage = (ev) => {
      const msg = parseMessage(String(ev.data));
      if (msg === null) {
        console.warn("ignoring malformed message", ev.data);
        return;
      }
      if (msg.type === "frame") {
        // stash only; the render loop consumes the newest frame
        this.latestFrame = msg;
        return;
      }
      this.state = applyMessage(this.state, msg);
      this.onChange(this.state);
    };

    ws.onclose = () => {
      this.state = setConnection(this.state, "closed");
      this.onChange(this.state);
      if (!this.closedByUser) {
        setTimeout(() => this.connect(), backoffDelay(this.attempt++));
      }
    };
    ws.onerror = () => ws.close();
  }

  /** Called by the render loop; applies the newest stashed frame. */
  drainFrame(): boolean {
    if (this.latestFrame === null) return false;
    const frame = this.latestFrame;
    this.latestFrame = null;
    this.state = applyMessage(this.state, frame);
    return true;
  }

  sendControl(change: ControlChange): void {
    if (this.ws === null || this.ws.readyState !== this.ws.OPEN) return;
    this.state = markPending(this.state, change);
    this.onChange(this.state);
    this.ws.send(controlMessage(change));
  }

  stop(): void {
    this.closedByUser = true;
    if (this.ws !== null && this.ws.readyState === this.ws.OPEN) {
      this.ws.send(JSON.stringify({ type: "stop" }));
    }
    this.ws?.close();
  }
}
