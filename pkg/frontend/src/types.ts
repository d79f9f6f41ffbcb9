// Wire types mirroring the service's JSON contract. The studio performs no
// generation math; every pixel and every hash it shows comes from service
// responses.

export interface Box {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

export interface LayoutPayload {
  boxes: Record<string, [number, number, number, number]>;
  positive_value: number;
  negative_value: number;
}

export interface FrameJobPayload {
  prompt: string;
  plugins: string[];
  layout: LayoutPayload;
  seed: number;
  steps: number;
  guidance_scale: number;
}

export interface PluginMeta {
  name: string;
  class_noun: string;
  descriptor_id: string;
  rows: number;
  cols: number;
  created_at: number;
}

export type JobState = 'queued' | 'running' | 'done' | 'failed';

export interface CharacterDiagnostics {
  token_positions: number[];
  box: number[];
  attention_mass: number[];
}

export interface FrameDiagnostics {
  request_hash: string;
  seed: number;
  steps: number;
  guidance_scale: number;
  xi: number[];
  characters: Record<string, CharacterDiagnostics>;
}

export interface Job {
  id: string;
  kind: string;
  state: JobState;
  progress: number;
  result_ref: string | null;
  error_detail: string | null;
  request_hash: string | null;
  result: { request_hash?: string; diagnostics?: FrameDiagnostics; [k: string]: unknown };
}

export interface FrameDoc {
  id: string;
  prompt: string;
  characters: string[];
  layout: LayoutPayload;
  seed: number;
}

export interface StoryDoc {
  schema_version: 1;
  title: string;
  style_suffix: string | null;
  frames: FrameDoc[];
}

export interface ManifestFrame {
  id: string;
  request_hash: string;
  seed: number;
  image_path: string;
  image_sha256: string;
  diagnostics_path: string;
}

export interface StoryManifest {
  title: string;
  frames: ManifestFrame[];
}

export const DEFAULT_POSITIVE = 2.5;
export const DEFAULT_NEGATIVE = -1e8;
