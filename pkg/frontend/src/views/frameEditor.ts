// One frame's workbench: box canvas, prompt, character assignment, job
// submission, result image and per-character attention sparklines.

import { ApiError, ServiceClient } from '../api';
import { BoxCanvas } from '../canvas';
import { sparklineSvg } from '../sparkline';
import {
  assignCharacter,
  buildFrameRequest,
  overlappingPairs,
  removeCharacter,
  type FrameState,
  type StoryboardState,
} from '../state';
import type { Job, PluginMeta } from '../types';

export interface FrameEditorView {
  root: HTMLElement;
  canvas: BoxCanvas;
  setFrame: (frame: FrameState) => void;
  setPlugins: (plugins: PluginMeta[]) => void;
  currentFrame: () => FrameState;
  lastJob: () => Job | null;
  generate: () => Promise<Job>;
  onRendered: ((job: Job) => void) | null;
}

export function createFrameEditor(
  client: ServiceClient,
  state: StoryboardState,
  initialFrame: FrameState,
): FrameEditorView {
  const root = document.createElement('section');
  root.className = 'frame-editor';
  root.innerHTML = `
    <h2>Frame editor</h2>
    <div class="editor-grid">
      <div class="canvas-pane">
        <canvas data-role="canvas" width="320" height="320"></canvas>
        <div class="warning" data-role="overlap-warning" hidden></div>
      </div>
      <div class="controls-pane">
        <label>Prompt <input type="text" data-role="prompt" /></label>
        <label>Seed <input type="number" data-role="seed" /></label>
        <label>Steps <input type="number" data-role="steps" value="100" /></label>
        <label>Guidance <input type="number" step="0.5" data-role="guidance" value="7.5" /></label>
        <div data-role="character-picker" class="character-picker"></div>
        <button data-role="generate">Generate</button>
        <button data-role="reseed">New seed</button>
        <progress data-role="progress" max="1" value="0" hidden></progress>
        <span class="error" data-role="job-error" hidden></span>
      </div>
      <div class="result-pane">
        <img data-role="result" alt="rendered frame" hidden />
        <div data-role="sparklines" class="sparklines"></div>
      </div>
    </div>
  `;

  const canvasEl = root.querySelector<HTMLCanvasElement>('[data-role=canvas]')!;
  const promptInput = root.querySelector<HTMLInputElement>('[data-role=prompt]')!;
  const seedInput = root.querySelector<HTMLInputElement>('[data-role=seed]')!;
  const stepsInput = root.querySelector<HTMLInputElement>('[data-role=steps]')!;
  const guidanceInput = root.querySelector<HTMLInputElement>('[data-role=guidance]')!;
  const picker = root.querySelector<HTMLDivElement>('[data-role=character-picker]')!;
  const generateButton = root.querySelector<HTMLButtonElement>('[data-role=generate]')!;
  const reseedButton = root.querySelector<HTMLButtonElement>('[data-role=reseed]')!;
  const progress = root.querySelector<HTMLProgressElement>('[data-role=progress]')!;
  const errorSpan = root.querySelector<HTMLSpanElement>('[data-role=job-error]')!;
  const resultImg = root.querySelector<HTMLImageElement>('[data-role=result]')!;
  const sparklines = root.querySelector<HTMLDivElement>('[data-role=sparklines]')!;
  const overlapWarning = root.querySelector<HTMLDivElement>('[data-role=overlap-warning]')!;

  let frame = initialFrame;
  let plugins: PluginMeta[] = [];
  let lastJob: Job | null = null;

  const canvas = new BoxCanvas(canvasEl, frame);
  canvas.onChange = updateOverlapWarning;

  function updateOverlapWarning(): void {
    const pairs = overlappingPairs(frame);
    if (pairs.length === 0) {
      overlapWarning.hidden = true;
    } else {
      overlapWarning.hidden = false;
      overlapWarning.textContent =
        'Overlapping boxes: ' + pairs.map(([a, b]) => `${a}/${b}`).join(', ');
    }
  }

  function renderPicker(): void {
    picker.replaceChildren();
    for (const meta of plugins) {
      const label = document.createElement('label');
      label.className = 'character-option';
      const checkbox = document.createElement('input');
      checkbox.type = 'checkbox';
      checkbox.dataset.character = meta.name;
      checkbox.checked = frame.characters.includes(meta.name);
      checkbox.addEventListener('change', () => {
        if (checkbox.checked) {
          assignCharacter(frame, meta.name);
        } else {
          removeCharacter(frame, meta.name);
        }
        canvas.render();
        updateOverlapWarning();
      });
      label.appendChild(checkbox);
      label.append(` ${meta.name} (${meta.class_noun})`);
      picker.appendChild(label);
    }
  }

  function syncInputs(): void {
    promptInput.value = frame.prompt;
    seedInput.value = String(frame.seed);
  }

  promptInput.addEventListener('input', () => {
    frame.prompt = promptInput.value;
  });
  seedInput.addEventListener('input', () => {
    frame.seed = Number(seedInput.value) || 0;
  });
  reseedButton.addEventListener('click', () => {
    // regenerating with a new seed leaves the layout untouched
    frame.seed = Math.floor(Math.random() * 1_000_000);
    seedInput.value = String(frame.seed);
  });

  const view: FrameEditorView = {
    root,
    canvas,
    currentFrame: () => frame,
    lastJob: () => lastJob,
    onRendered: null,
    setFrame(next) {
      frame = next;
      canvas.setFrame(next);
      syncInputs();
      renderPicker();
      updateOverlapWarning();
    },
    setPlugins(next) {
      plugins = next;
      renderPicker();
    },
    async generate() {
      errorSpan.hidden = true;
      progress.hidden = false;
      progress.value = 0;
      try {
        const payload = buildFrameRequest(state, frame, {
          steps: Number(stepsInput.value) || 100,
          guidanceScale: Number(guidanceInput.value) || 7.5,
        });
        const submitted = await client.submitFrameJob(payload);
        const job = await client.pollJob(submitted.job_id, {
          intervalMs: 250,
          onUpdate: (j) => {
            progress.value = j.progress;
          },
        });
        lastJob = job;
        resultImg.src = client.jobImageUrl(job.id);
        resultImg.hidden = false;
        renderSparklines(job);
        view.onRendered?.(job);
        return job;
      } catch (exc) {
        errorSpan.textContent =
          exc instanceof ApiError ? `${exc.code}: ${exc.message}` : String(exc);
        errorSpan.hidden = false;
        throw exc;
      } finally {
        progress.hidden = true;
      }
    },
  };

  function renderSparklines(job: Job): void {
    sparklines.replaceChildren();
    const diagnostics = job.result?.diagnostics;
    if (!diagnostics) {
      return;
    }
    Object.entries(diagnostics.characters).forEach(([name, char]) => {
      const row = document.createElement('div');
      row.className = 'sparkline-row';
      row.dataset.character = name;
      const label = document.createElement('span');
      label.textContent = `${name} in-box mass`;
      row.appendChild(label);
      row.appendChild(
        sparklineSvg(char.attention_mass, { label: `${name} attention` }),
      );
      const last = char.attention_mass.at(-1);
      const value = document.createElement('span');
      value.textContent = last === undefined ? '-' : last.toFixed(3);
      row.appendChild(value);
      sparklines.appendChild(row);
    });
  }

  generateButton.addEventListener('click', () => {
    void view.generate().catch(() => undefined);
  });

  view.setFrame(initialFrame);
  return view;
}
