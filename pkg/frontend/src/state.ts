// Storyboard state and the (lossless) mapping between it, the CLI's story
// script schema, and outgoing frame-job requests. Boxes live in normalized
// [0,1]^2 coordinates everywhere; canvas scaling is presentation-only.

import type { Box, FrameDoc, FrameJobPayload, LayoutPayload, StoryDoc } from './types';
import { DEFAULT_NEGATIVE, DEFAULT_POSITIVE } from './types';

export interface FrameState {
  id: string;
  prompt: string;
  characters: string[];
  boxes: Record<string, Box>;
  seed: number;
}

export interface StoryboardState {
  title: string;
  styleSuffix: string | null;
  frames: FrameState[];
  positiveValue: number;
  negativeValue: number;
}

export const MIN_BOX_SIZE = 0.02;
export const CHARACTER_SOFT_CAP = 3;

export function emptyStoryboard(title = 'untitled story'): StoryboardState {
  return {
    title,
    styleSuffix: null,
    frames: [],
    positiveValue: DEFAULT_POSITIVE,
    negativeValue: DEFAULT_NEGATIVE,
  };
}

const clamp01 = (v: number) => Math.min(1, Math.max(0, v));

export function clampBox(box: Box): Box {
  let x0 = clamp01(Math.min(box.x0, box.x1));
  let x1 = clamp01(Math.max(box.x0, box.x1));
  let y0 = clamp01(Math.min(box.y0, box.y1));
  let y1 = clamp01(Math.max(box.y0, box.y1));
  if (x1 - x0 < MIN_BOX_SIZE) {
    x1 = Math.min(1, x0 + MIN_BOX_SIZE);
    x0 = x1 - MIN_BOX_SIZE;
  }
  if (y1 - y0 < MIN_BOX_SIZE) {
    y1 = Math.min(1, y0 + MIN_BOX_SIZE);
    y0 = y1 - MIN_BOX_SIZE;
  }
  return { x0, y0, x1, y1 };
}

export function moveBox(box: Box, dx: number, dy: number): Box {
  const w = box.x1 - box.x0;
  const h = box.y1 - box.y0;
  const x0 = Math.min(Math.max(box.x0 + dx, 0), 1 - w);
  const y0 = Math.min(Math.max(box.y0 + dy, 0), 1 - h);
  return { x0, y0, x1: x0 + w, y1: y0 + h };
}

export type ResizeHandle = 'nw' | 'ne' | 'sw' | 'se';

export function resizeBox(box: Box, handle: ResizeHandle, dx: number, dy: number): Box {
  const next = { ...box };
  if (handle === 'nw' || handle === 'sw') {
    next.x0 = box.x0 + dx;
  } else {
    next.x1 = box.x1 + dx;
  }
  if (handle === 'nw' || handle === 'ne') {
    next.y0 = box.y0 + dy;
  } else {
    next.y1 = box.y1 + dy;
  }
  return clampBox(next);
}

export function boxesOverlap(a: Box, b: Box): boolean {
  return a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1;
}

export function overlappingPairs(frame: FrameState): [string, string][] {
  const names = frame.characters;
  const pairs: [string, string][] = [];
  for (let i = 0; i < names.length; i++) {
    for (let j = i + 1; j < names.length; j++) {
      if (boxesOverlap(frame.boxes[names[i]], frame.boxes[names[j]])) {
        pairs.push([names[i], names[j]]);
      }
    }
  }
  return pairs;
}

function nextFrameId(state: StoryboardState): string {
  const used = new Set(state.frames.map((f) => f.id));
  let n = state.frames.length + 1;
  while (used.has(`frame-${String(n).padStart(2, '0')}`)) {
    n += 1;
  }
  return `frame-${String(n).padStart(2, '0')}`;
}

export function addFrame(state: StoryboardState, prompt = '', seed = 0): FrameState {
  const frame: FrameState = {
    id: nextFrameId(state),
    prompt,
    characters: [],
    boxes: {},
    seed,
  };
  state.frames.push(frame);
  return frame;
}

/** Copy prompt + layout of frame `index` as the next frame's starting point. */
export function duplicateFrame(state: StoryboardState, index: number): FrameState {
  const source = state.frames[index];
  const copy: FrameState = {
    id: nextFrameId(state),
    prompt: source.prompt,
    characters: [...source.characters],
    boxes: Object.fromEntries(
      Object.entries(source.boxes).map(([name, box]) => [name, { ...box }]),
    ),
    seed: source.seed,
  };
  state.frames.splice(index + 1, 0, copy);
  return copy;
}

export function moveFrame(state: StoryboardState, from: number, to: number): void {
  const [frame] = state.frames.splice(from, 1);
  state.frames.splice(to, 0, frame);
}

export function removeFrame(state: StoryboardState, index: number): void {
  state.frames.splice(index, 1);
}

export function assignCharacter(frame: FrameState, name: string): void {
  if (frame.characters.includes(name)) {
    return;
  }
  frame.characters.push(name);
  // stagger default boxes so newly assigned characters do not stack
  const i = frame.characters.length - 1;
  const offset = Math.min(0.5, i * 0.25);
  frame.boxes[name] = clampBox({
    x0: offset,
    y0: 0.1,
    x1: offset + 0.4,
    y1: 0.9,
  });
}

export function removeCharacter(frame: FrameState, name: string): void {
  frame.characters = frame.characters.filter((c) => c !== name);
  delete frame.boxes[name];
}

function layoutPayload(frame: FrameState, state: StoryboardState): LayoutPayload {
  const boxes: LayoutPayload['boxes'] = {};
  for (const name of frame.characters) {
    const b = frame.boxes[name];
    boxes[name] = [b.x0, b.y0, b.x1, b.y1];
  }
  return {
    boxes,
    positive_value: state.positiveValue,
    negative_value: state.negativeValue,
  };
}

export function buildFrameRequest(
  state: StoryboardState,
  frame: FrameState,
  options: { steps: number; guidanceScale: number },
): FrameJobPayload {
  const prompt = state.styleSuffix
    ? `${frame.prompt}, ${state.styleSuffix}`
    : frame.prompt;
  return {
    prompt,
    plugins: [...frame.characters],
    layout: layoutPayload(frame, state),
    seed: frame.seed,
    steps: options.steps,
    guidance_scale: options.guidanceScale,
  };
}

// --- script export/import, byte-compatible with the CLI schema ---

export function exportScript(state: StoryboardState): StoryDoc {
  return {
    schema_version: 1,
    title: state.title,
    style_suffix: state.styleSuffix,
    frames: state.frames.map((frame): FrameDoc => ({
      id: frame.id,
      prompt: frame.prompt,
      characters: [...frame.characters],
      layout: layoutPayload(frame, state),
      seed: frame.seed,
    })),
  };
}

export function exportScriptJson(state: StoryboardState): string {
  return JSON.stringify(exportScript(state), null, 2);
}

export class ScriptError extends Error {}

export function importScript(doc: unknown): StoryboardState {
  if (typeof doc !== 'object' || doc === null) {
    throw new ScriptError('script must be a JSON object');
  }
  const d = doc as Record<string, unknown>;
  if (d.schema_version !== 1) {
    throw new ScriptError(`unsupported schema_version ${String(d.schema_version)}`);
  }
  if (!Array.isArray(d.frames) || d.frames.length === 0) {
    throw new ScriptError('frames must be a non-empty list');
  }
  const state = emptyStoryboard(typeof d.title === 'string' ? d.title : '');
  state.styleSuffix =
    typeof d.style_suffix === 'string' && d.style_suffix ? d.style_suffix : null;

  const seen = new Set<string>();
  for (const raw of d.frames) {
    const f = raw as Record<string, unknown>;
    if (typeof f.id !== 'string' || !f.id) {
      throw new ScriptError('every frame needs a string id');
    }
    if (seen.has(f.id)) {
      throw new ScriptError(`duplicate frame id ${f.id}`);
    }
    seen.add(f.id);
    if (typeof f.prompt !== 'string' || !f.prompt.trim()) {
      throw new ScriptError(`frame ${f.id}: prompt must be a non-empty string`);
    }
    if (typeof f.seed !== 'number' || !Number.isInteger(f.seed)) {
      throw new ScriptError(`frame ${f.id}: seed must be an integer`);
    }
    const characters = Array.isArray(f.characters) ? (f.characters as string[]) : [];
    const layout = (f.layout ?? {}) as Partial<LayoutPayload>;
    const boxesDoc = layout.boxes ?? {};
    const frame: FrameState = {
      id: f.id,
      prompt: f.prompt,
      characters: [...characters],
      boxes: {},
      seed: f.seed,
    };
    for (const name of characters) {
      const vals = boxesDoc[name];
      if (!Array.isArray(vals) || vals.length !== 4) {
        throw new ScriptError(`frame ${f.id}: character ${name} has no box`);
      }
      const [x0, y0, x1, y1] = vals;
      if (!(x0 >= 0 && x0 < x1 && x1 <= 1 && y0 >= 0 && y0 < y1 && y1 <= 1)) {
        throw new ScriptError(`frame ${f.id}: invalid box for ${name}`);
      }
      frame.boxes[name] = { x0, y0, x1, y1 };
    }
    if (typeof layout.positive_value === 'number') {
      state.positiveValue = layout.positive_value;
    }
    if (typeof layout.negative_value === 'number') {
      state.negativeValue = layout.negative_value;
    }
    state.frames.push(frame);
  }
  return state;
}

export function importScriptJson(text: string): StoryboardState {
  let doc: unknown;
  try {
    doc = JSON.parse(text);
  } catch (exc) {
    throw new ScriptError(`script is not valid JSON: ${String(exc)}`);
  }
  return importScript(doc);
}
