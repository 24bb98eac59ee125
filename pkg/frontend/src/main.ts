/** Steering console entry point: wires the client to the DOM. */

import { ConsoleClient } from "./client.js";
import { drawLatencyChart, drawSkeleton } from "./renderer.js";
import { latencyPercentile } from "./state.js";
import type { ViewState } from "./state.js";

const $ = (id: string) => document.getElementById(id)!;

const skeletonCtx = ($("skeleton") as HTMLCanvasElement).getContext("2d")!;
const latencyCtx = ($("latency") as HTMLCanvasElement).getContext("2d")!;
const banner = $("banner");

const wsUrl =
  (location.protocol === "https:" ? "wss://" : "ws://") +
  (location.host || "localhost:8765") +
  "/session";
const client = new ConsoleClient(wsUrl);

function refreshPanel(s: ViewState): void {
  banner.style.display = s.connection === "open" ? "none" : "block";
  banner.textContent =
    s.connection === "connecting" ? "connecting…" : "disconnected, retrying";

  for (const key of [
    "va",
    "identity",
    "top_p_t",
    "top_p_k",
    "temperature",
    "cfg",
  ] as const) {
    const input = $(key) as HTMLInputElement;
    const ack = s.acknowledged[key];
    if (ack !== undefined && !(key in s.pending) && document.activeElement !== input) {
      input.value = String(ack);
    }
    input.classList.toggle("pending", key in s.pending);
  }
  $("overruns").textContent = String(s.overruns);
  $("dropped").textContent = String(s.framesDropped);
  if (s.lastError) $("error").textContent = s.lastError;
}

client.onChange = refreshPanel;
client.connect();

for (const key of ["top_p_t", "top_p_k", "temperature", "cfg"]) {
  $(key).addEventListener("change", (ev) => {
    client.sendControl({ [key]: Number((ev.target as HTMLInputElement).value) });
  });
}
$("identity").addEventListener("change", (ev) => {
  client.sendControl({
    identity: Math.trunc(Number((ev.target as HTMLInputElement).value)),
  });
});
$("va").addEventListener("change", (ev) => {
  client.sendControl({
    va: (ev.target as HTMLInputElement).checked ? 1 : 0,
  });
});

function renderLoop(): void {
  if (client.drainFrame()) {
    const s = client.state;
    drawSkeleton(skeletonCtx, s.joints, s.parents, s.vaProb > 0.5);
    drawLatencyChart(latencyCtx, s.latencies);
    $("va-indicator").textContent = s.vaProb > 0.5 ? "speaking" : "listening";
    $("va-indicator").className = s.vaProb > 0.5 ? "speaking" : "listening";
    $("p50").textContent = latencyPercentile(s.latencies, 0.5).toFixed(1);
    $("p95").textContent = latencyPercentile(s.latencies, 0.95).toFixed(1);
    $("t").textContent = String(s.t);
  }
  requestAnimationFrame(renderLoop);
}
requestAnimationFrame(renderLoop);
