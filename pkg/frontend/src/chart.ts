// Minimal canvas polyline chart for the live training-loss stream.

import { LossPoint } from "./controller.js";

const SERIES: { key: keyof LossPoint; color: string }[] = [
  { key: "combined", color: "#e8654a" },
  { key: "ldm", color: "#4a90e8" },
  { key: "cst", color: "#57b66b" },
];

export function drawLossChart(canvas: HTMLCanvasElement, points: LossPoint[]): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { width, height } = canvas;
  ctx.clearRect(0, 0, width, height);
  ctx.fillStyle = "#16181d";
  ctx.fillRect(0, 0, width, height);
  if (points.length < 2) return;

  const xs = points.map((p) => p.step);
  const values = points.flatMap((p) => SERIES.map((s) => p[s.key] as number));
  const xMin = xs[0];
  const xMax = xs[xs.length - 1];
  const yMin = Math.min(...values);
  const yMax = Math.max(...values);
  const pad = 8;
  const sx = (x: number) =>
    pad + ((x - xMin) / Math.max(xMax - xMin, 1e-9)) * (width - 2 * pad);
  const sy = (y: number) =>
    height - pad - ((y - yMin) / Math.max(yMax - yMin, 1e-9)) * (height - 2 * pad);

  for (const series of SERIES) {
    ctx.strokeStyle = series.color;
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    points.forEach((p, i) => {
      const x = sx(p.step);
      const y = sy(p[series.key] as number);
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();
  }
}
