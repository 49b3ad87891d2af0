// Mask and geometry painting. Masks render at native slice resolution; the
// canvas is scaled up with image-rendering: pixelated so the display never
// implies sub-pixel accuracy.

import { Line, PendingGeometry } from './state';

export const MASK_COLOR: [number, number, number] = [66, 135, 245];
export const DEFAULT_OPACITY = 0.45;

/** RGBA bytes for a flat 0/1 mask,透明 where the mask is 0. */
export function maskToRgba(
  mask: Uint8Array,
  color: [number, number, number] = MASK_COLOR,
  opacity: number = DEFAULT_OPACITY,
): Uint8ClampedArray {
  const out = new Uint8ClampedArray(mask.length * 4);
  const alpha = Math.round(opacity * 255);
  for (let i = 0; i < mask.length; i++) {
    if (mask[i]) {
      const j = i * 4;
      out[j] = color[0];
      out[j + 1] = color[1];
      out[j + 2] = color[2];
      out[j + 3] = alpha;
    }
  }
  return out;
}

export function drawBoxOutline(
  ctx: CanvasRenderingContext2D,
  x0: number,
  y0: number,
  x1: number,
  y1: number,
  color: string,
): void {
  ctx.strokeStyle = color;
  ctx.lineWidth = 1;
  ctx.strokeRect(Math.min(x0, x1), Math.min(y0, y1), Math.abs(x1 - x0), Math.abs(y1 - y0));
}

export function drawAxisLine(ctx: CanvasRenderingContext2D, line: Line, color: string): void {
  ctx.strokeStyle = color;
  ctx.lineWidth = 1;
  ctx.beginPath();
  ctx.moveTo(line.x0, line.y0);
  ctx.lineTo(line.x1, line.y1);
  ctx.stroke();
}

/** Paint whatever the user is mid-drag on: box preview or axis preview. */
export function drawPending(ctx: CanvasRenderingContext2D, pending: PendingGeometry): void {
  if (pending.mode === 'box') {
    drawBoxOutline(ctx, pending.x0, pending.y0, pending.x1, pending.y1, '#ffcc00');
  } else {
    drawAxisLine(ctx, pending, pending.mode === 'long-axis' ? '#00e5ff' : '#ff5ca8');
  }
}
