/** Wire protocol between the console and the gesture service.
 *
 * Every websocket message is one JSON object with a `type` field.
 * `parseMessage` is the only entry point; anything malformed comes back
 * as null so the caller can warn and move on without tearing down the
 * session.
 */

export interface StatusMessage {
  type: "status";
  step: number;
  va: number;
  identity: number;
  top_p_t: number;
  top_p_k: number;
  temperature: number;
  cfg: number;
  overruns: number;
  running?: boolean;
  total_steps?: number;
  parents?: number[];
  joint_names?: string[];
}

export interface FrameMessage {
  type: "frame";
  t: number;
  joints: number[][]; // (J, 3) positions in meters
  expr: number[];
  va_prob: number;
  latency_ms: number;
}

export interface ErrorMessage {
  type: "error";
  message: string;
}

export type WireMessage = StatusMessage | FrameMessage | ErrorMessage;

export interface ControlChange {
  va?: number;
  identity?: number;
  top_p_t?: number;
  top_p_k?: number;
  temperature?: number;
  cfg?: number;
}

export function controlMessage(change: ControlChange): string {
  return JSON.stringify({ type: "control", ...change });
}

function isVec3Array(x: unknown): x is number[][] {
  return (
    Array.isArray(x) &&
    x.every(
      (row) =>
        Array.isArray(row) &&
        row.length === 3 &&
        row.every((v) => typeof v === "number" && Number.isFinite(v)),
    )
  );
}

export function parseMessage(raw: string): WireMessage | null {
  let obj: unknown;
  try {
    obj = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof obj !== "object" || obj === null) return null;
  const m = obj as Record<string, unknown>;
  switch (m.type) {
    case "frame":
      if (
        typeof m.t !== "number" ||
        !isVec3Array(m.joints) ||
        typeof m.va_prob !== "number" ||
        typeof m.latency_ms !== "number"
      ) {
        return null;
      }
      return m as unknown as FrameMessage;
    case "status":
      if (typeof m.step !== "number") return null;
      return m as unknown as StatusMessage;
    case "error":
      return typeof m.message === "string"
        ? (m as unknown as ErrorMessage)
        : null;
    default:
      return null;
  }
}
