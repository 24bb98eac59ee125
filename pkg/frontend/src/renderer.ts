/** Stick-figure renderer: joint positions + parent indices onto a 2D
 * canvas through a fixed perspective camera.  No mesh assets; works for
 * any skeleton the service describes in its first status message.
 */

export interface Camera {
  yaw: number; // radians around the vertical axis
  pitch: number;
  distance: number;
  height: number;
}

export const DEFAULT_CAMERA: Camera = {
  yaw: 0.5,
  pitch: 0.15,
  distance: 3.2,
  height: 1.0,
};

export function project(
  p: number[],
  cam: Camera,
  width: number,
  height: number,
): [number, number] {
  // world (x right, y forward, z up) -> camera orbiting the origin
  const cy = Math.cos(cam.yaw);
  const sy = Math.sin(cam.yaw);
  const x = cy * p[0] - sy * p[1];
  const y = sy * p[0] + cy * p[1] + cam.distance;
  const z = p[2] - cam.height;
  const cp = Math.cos(cam.pitch);
  const sp = Math.sin(cam.pitch);
  const yc = cp * y + sp * z;
  const zc = -sp * y + cp * z;
  const f = (0.9 * Math.min(width, height)) / Math.max(yc, 0.1);
  return [width / 2 + f * x, height / 2 - f * zc];
}

export function drawSkeleton(
  ctx: CanvasRenderingContext2D,
  joints: number[][],
  parents: number[],
  speaking: boolean,
  cam: Camera = DEFAULT_CAMERA,
): void {
  const { width, height } = ctx.canvas;
  ctx.clearRect(0, 0, width, height);
  if (joints.length === 0) return;
  const pts = joints.map((p) => project(p, cam, width, height));

  ctx.lineWidth = 3;
  ctx.strokeStyle = speaking ? "#2e9e5b" : "#4a6fa5";
  ctx.beginPath();
  for (let j = 0; j < parents.length && j < pts.length; j++) {
    const par = parents[j];
    if (par < 0) continue;
    ctx.moveTo(pts[par][0], pts[par][1]);
    ctx.lineTo(pts[j][0], pts[j][1]);
  }
  ctx.stroke();

  ctx.fillStyle = "#222";
  for (const [x, y] of pts) {
    ctx.beginPath();
    ctx.arc(x, y, 3, 0, 2 * Math.PI);
    ctx.fill();
  }
}

/** Server-reported per-step latency as a strip chart with a budget line. */
export function drawLatencyChart(
  ctx: CanvasRenderingContext2D,
  latencies: number[],
  budgetMs = 80,
): void {
  const { width, height } = ctx.canvas;
  ctx.clearRect(0, 0, width, height);
  const maxMs = Math.max(budgetMs * 1.25, ...latencies);
  const yOf = (ms: number) => height - (ms / maxMs) * height;

  ctx.strokeStyle = "#c0392b";
  ctx.setLineDash([4, 3]);
  ctx.beginPath();
  ctx.moveTo(0, yOf(budgetMs));
  ctx.lineTo(width, yOf(budgetMs));
  ctx.stroke();
  ctx.setLineDash([]);

  if (latencies.length < 2) return;
  ctx.strokeStyle = "#4a6fa5";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  latencies.forEach((ms, i) => {
    const x = (i / (latencies.length - 1)) * width;
    if (i === 0) ctx.moveTo(x, yOf(ms));
    else ctx.lineTo(x, yOf(ms));
  });
  ctx.stroke();
}
