// Box drawing and dragging on a canvas. All geometry is pure and tested
// headless; the controller below is a thin event binding around it.

import type { Box } from './types';
import {
  clampBox,
  moveBox,
  resizeBox,
  type FrameState,
  type ResizeHandle,
} from './state';

export interface PixelRect {
  left: number;
  top: number;
  width: number;
  height: number;
}

export function toPixels(box: Box, width: number, height: number): PixelRect {
  return {
    left: box.x0 * width,
    top: box.y0 * height,
    width: (box.x1 - box.x0) * width,
    height: (box.y1 - box.y0) * height,
  };
}

export function toNormalized(rect: PixelRect, width: number, height: number): Box {
  return clampBox({
    x0: rect.left / width,
    y0: rect.top / height,
    x1: (rect.left + rect.width) / width,
    y1: (rect.top + rect.height) / height,
  });
}

export const HANDLE_RADIUS_PX = 6;

export type HitResult =
  | { kind: 'handle'; name: string; handle: ResizeHandle }
  | { kind: 'inside'; name: string }
  | { kind: 'none' };

function handlePoints(box: Box, w: number, h: number): [ResizeHandle, number, number][] {
  return [
    ['nw', box.x0 * w, box.y0 * h],
    ['ne', box.x1 * w, box.y0 * h],
    ['sw', box.x0 * w, box.y1 * h],
    ['se', box.x1 * w, box.y1 * h],
  ];
}

/** Topmost hit wins: later characters draw on top of earlier ones. */
export function hitTest(
  frame: FrameState,
  xPx: number,
  yPx: number,
  width: number,
  height: number,
): HitResult {
  for (let i = frame.characters.length - 1; i >= 0; i--) {
    const name = frame.characters[i];
    const box = frame.boxes[name];
    for (const [handle, hx, hy] of handlePoints(box, width, height)) {
      if (Math.abs(xPx - hx) <= HANDLE_RADIUS_PX && Math.abs(yPx - hy) <= HANDLE_RADIUS_PX) {
        return { kind: 'handle', name, handle };
      }
    }
    const x = xPx / width;
    const y = yPx / height;
    if (x >= box.x0 && x <= box.x1 && y >= box.y0 && y <= box.y1) {
      return { kind: 'inside', name };
    }
  }
  return { kind: 'none' };
}

export interface DragState {
  name: string;
  mode: 'move' | ResizeHandle;
  lastX: number;
  lastY: number;
}

/** Apply one pointer delta to the dragged box; returns the updated box. */
export function applyDrag(
  frame: FrameState,
  drag: DragState,
  xPx: number,
  yPx: number,
  width: number,
  height: number,
): Box {
  const dx = (xPx - drag.lastX) / width;
  const dy = (yPx - drag.lastY) / height;
  const current = frame.boxes[drag.name];
  const updated =
    drag.mode === 'move'
      ? moveBox(current, dx, dy)
      : resizeBox(current, drag.mode, dx, dy);
  frame.boxes[drag.name] = updated;
  drag.lastX = xPx;
  drag.lastY = yPx;
  return updated;
}

const PALETTE = ['#e4572e', '#29a19c', '#7045af', '#f3a712', '#256eff'];

export function characterColor(index: number): string {
  return PALETTE[index % PALETTE.length];
}

export class BoxCanvas {
  private drag: DragState | null = null;
  selected: string | null = null;
  onChange: (() => void) | null = null;

  constructor(
    private readonly canvas: HTMLCanvasElement,
    private frame: FrameState,
  ) {
    canvas.addEventListener('mousedown', this.onDown);
    canvas.addEventListener('mousemove', this.onMove);
    window.addEventListener('mouseup', this.onUp);
  }

  setFrame(frame: FrameState): void {
    this.frame = frame;
    this.drag = null;
    this.selected = null;
    this.render();
  }

  private pointer(event: MouseEvent): [number, number] {
    const rect = this.canvas.getBoundingClientRect();
    return [event.clientX - rect.left, event.clientY - rect.top];
  }

  private onDown = (event: MouseEvent): void => {
    const [x, y] = this.pointer(event);
    const hit = hitTest(this.frame, x, y, this.canvas.width, this.canvas.height);
    if (hit.kind === 'none') {
      this.selected = null;
    } else {
      this.selected = hit.name;
      this.drag = {
        name: hit.name,
        mode: hit.kind === 'handle' ? hit.handle : 'move',
        lastX: x,
        lastY: y,
      };
    }
    this.render();
  };

  private onMove = (event: MouseEvent): void => {
    if (!this.drag) {
      return;
    }
    const [x, y] = this.pointer(event);
    applyDrag(this.frame, this.drag, x, y, this.canvas.width, this.canvas.height);
    this.onChange?.();
    this.render();
  };

  private onUp = (): void => {
    this.drag = null;
  };

  render(): void {
    const ctx = this.canvas.getContext('2d');
    if (!ctx) {
      return;
    }
    const { width, height } = this.canvas;
    ctx.clearRect(0, 0, width, height);
    ctx.fillStyle = '#f4f2ee';
    ctx.fillRect(0, 0, width, height);
    this.frame.characters.forEach((name, i) => {
      const rect = toPixels(this.frame.boxes[name], width, height);
      const color = characterColor(i);
      ctx.lineWidth = name === this.selected ? 3 : 2;
      ctx.strokeStyle = color;
      ctx.strokeRect(rect.left, rect.top, rect.width, rect.height);
      ctx.fillStyle = color;
      ctx.font = '12px sans-serif';
      ctx.fillText(name, rect.left + 4, rect.top + 14);
      for (const [, hx, hy] of handlePoints(this.frame.boxes[name], width, height)) {
        ctx.fillRect(hx - 3, hy - 3, 6, 6);
      }
    });
  }

  dispose(): void {
    this.canvas.removeEventListener('mousedown', this.onDown);
    this.canvas.removeEventListener('mousemove', this.onMove);
    window.removeEventListener('mouseup', this.onUp);
  }
}
