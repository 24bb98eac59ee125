/** Console view state and its reducer.
 *
 * Pure data in, pure data out: the socket layer feeds parsed messages
 * through `applyMessage` and the renderer reads the result.  Two rules
 * the server cannot enforce live here:
 *
 *  - only frames with strictly increasing t are accepted; anything
 *    older than the newest rendered frame is dropped and counted,
 *  - the control panel shows the last server-acknowledged values, with
 *    a pending marker from the moment a change is sent until the next
 *    status echo.
 */

import type { ControlChange, WireMessage } from "./protocol.js";

export const LATENCY_BUFFER = 500;

export type Connection = "connecting" | "open" | "closed";

export interface ViewState {
  connection: Connection;
  t: number; // newest rendered frame index, -1 before any
  joints: number[][];
  expr: number[];
  vaProb: number;
  parents: number[];
  jointNames: string[];
  acknowledged: ControlChange; // last server-echoed control values
  pending: ControlChange; // sent but not yet echoed
  latencies: number[]; // rolling, at most LATENCY_BUFFER entries
  overruns: number;
  framesRendered: number;
  framesDropped: number;
  lastError: string;
}

export function initialState(): ViewState {
  return {
    connection: "connecting",
    t: -1,
    joints: [],
    expr: [],
    vaProb: 0,
    parents: [],
    jointNames: [],
    acknowledged: {},
    pending: {},
    latencies: [],
    overruns: 0,
    framesRendered: 0,
    framesDropped: 0,
    lastError: "",
  };
}

export function applyMessage(state: ViewState, msg: WireMessage): ViewState {
  switch (msg.type) {
    case "frame": {
      if (msg.t <= state.t) {
        return { ...state, framesDropped: state.framesDropped + 1 };
      }
      const latencies =
        state.latencies.length >= LATENCY_BUFFER
          ? [...state.latencies.slice(1), msg.latency_ms]
          : [...state.latencies, msg.latency_ms];
      return {
        ...state,
        t: msg.t,
        joints: msg.joints,
        expr: msg.expr,
        vaProb: msg.va_prob,
        latencies,
        framesRendered: state.framesRendered + 1,
      };
    }
    case "status": {
      const acknowledged: ControlChange = {
        va: msg.va,
        identity: msg.identity,
        top_p_t: msg.top_p_t,
        top_p_k: msg.top_p_k,
        temperature: msg.temperature,
        cfg: msg.cfg,
      };
      // any pending key the server now echoes is settled
      const pending: ControlChange = {};
      for (const [k, v] of Object.entries(state.pending)) {
        if (acknowledged[k as keyof ControlChange] !== v) {
          pending[k as keyof ControlChange] = v;
        }
      }
      return {
        ...state,
        acknowledged,
        pending,
        overruns: msg.overruns,
        parents: msg.parents ?? state.parents,
        jointNames: msg.joint_names ?? state.jointNames,
      };
    }
    case "error":
      return { ...state, lastError: msg.message };
  }
}

export function markPending(
  state: ViewState,
  change: ControlChange,
): ViewState {
  return { ...state, pending: { ...state.pending, ...change } };
}

export function setConnection(
  state: ViewState,
  connection: Connection,
): ViewState {
  return { ...state, connection };
}

/** Reconnect delay in ms: 0.5 s doubling to a 8 s ceiling. */
export function backoffDelay(attempt: number): number {
  return Math.min(500 * 2 ** attempt, 8000);
}

export function latencyPercentile(latencies: number[], q: number): number {
  if (latencies.length === 0) return 0;
  const sorted = [...latencies].sort((a, b) => a - b);
  const pos = (sorted.length - 1) * q;
  const lo = Math.floor(pos);
  const hi = Math.ceil(pos);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo);
}
