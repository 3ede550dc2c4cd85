// Dose-volume histogram chart as an inline SVG string, drawn directly from
// the service-provided binned curves. No dose math happens here: every point
// is (threshold_gy, fraction) as delivered.

import type { DvhCurve } from "./types.js";
import { escapeHtml } from "./markers.js";

const PALETTE = [
  "#c0392b",
  "#2471a3",
  "#1e8449",
  "#b7950b",
  "#7d3c98",
  "#148f77",
  "#a04000",
  "#5d6d7e",
  "#884ea0",
  "#2e86c1",
];

export interface DvhChartOptions {
  width?: number;
  height?: number;
  prescriptionGy?: number;
}

interface Frame {
  width: number;
  height: number;
  left: number;
  right: number;
  top: number;
  bottom: number;
  maxDose: number;
}

function x(frame: Frame, dose: number): number {
  const span = frame.width - frame.left - frame.right;
  return frame.left + (dose / frame.maxDose) * span;
}

function y(frame: Frame, fraction: number): number {
  const span = frame.height - frame.top - frame.bottom;
  return frame.top + (1 - fraction) * span;
}

export function curvePoints(curve: DvhCurve, frame: Frame): string {
  return curve.thresholds_gy
    .map((dose, i) => `${x(frame, dose).toFixed(1)},${y(frame, curve.fractions[i] ?? 0).toFixed(1)}`)
    .join(" ");
}

export function dvhChartSvg(curves: DvhCurve[], options: DvhChartOptions = {}): string {
  if (curves.length === 0) {
    return `<div class="empty-chart">No dose-volume data for this round.</div>`;
  }
  const width = options.width ?? 640;
  const height = options.height ?? 360;
  const frame: Frame = {
    width,
    height,
    left: 52,
    right: 16,
    top: 14,
    bottom: 42,
    maxDose: Math.max(
      options.prescriptionGy ?? 0,
      ...curves.map((c) => c.thresholds_gy[c.thresholds_gy.length - 1] ?? 0),
    ),
  };
  if (frame.maxDose <= 0) frame.maxDose = 1;

  const gridlines: string[] = [];
  for (let f = 0; f <= 1.0001; f += 0.25) {
    const yy = y(frame, f).toFixed(1);
    gridlines.push(
      `<line class="grid" x1="${frame.left}" y1="${yy}" x2="${width - frame.right}" y2="${yy}"/>`,
      `<text class="tick" x="${frame.left - 6}" y="${yy}" text-anchor="end" dominant-baseline="middle">${Math.round(f * 100)}%</text>`,
    );
  }
  const doseStep = frame.maxDose > 30 ? 10 : 5;
  for (let d = 0; d <= frame.maxDose + 1e-9; d += doseStep) {
    const xx = x(frame, d).toFixed(1);
    gridlines.push(
      `<line class="grid" x1="${xx}" y1="${frame.top}" x2="${xx}" y2="${height - frame.bottom}"/>`,
      `<text class="tick" x="${xx}" y="${height - frame.bottom + 16}" text-anchor="middle">${d}</text>`,
    );
  }

  let rxLine = "";
  if (options.prescriptionGy && options.prescriptionGy <= frame.maxDose) {
    const xx = x(frame, options.prescriptionGy).toFixed(1);
    rxLine = `<line class="rx" x1="${xx}" y1="${frame.top}" x2="${xx}" y2="${height - frame.bottom}"/>`;
  }

  const paths = curves
    .map((curve, i) => {
      const color = PALETTE[i % PALETTE.length];
      return `<polyline class="dvh-curve" data-structure="${escapeHtml(curve.structure)}" fill="none" stroke="${color}" stroke-width="2" points="${curvePoints(curve, frame)}"/>`;
    })
    .join("\n    ");

  const legend = curves
    .map((curve, i) => {
      const color = PALETTE[i % PALETTE.length];
      return `<span class="legend-item"><span class="swatch" style="background:${color}"></span>${escapeHtml(curve.structure)}</span>`;
    })
    .join("");

  return `<figure class="dvh">
  <svg viewBox="0 0 ${width} ${height}" role="img" aria-label="Dose-volume histogram">
    ${gridlines.join("\n    ")}
    ${rxLine}
    ${paths}
    <text class="axis-label" x="${(frame.left + width - frame.right) / 2}" y="${height - 8}" text-anchor="middle">Dose (Gy)</text>
    <text class="axis-label" x="14" y="${(frame.top + height - frame.bottom) / 2}" text-anchor="middle" transform="rotate(-90 14 ${(frame.top + height - frame.bottom) / 2})">Volume</text>
  </svg>
  <figcaption class="legend">${legend}</figcaption>
</figure>`;
}
