// Ordered frame strip with duplicate/reorder, story rendering through the
// service, and script export/import that is byte-compatible with the CLI.

import { ApiError, ServiceClient } from '../api';
import {
  addFrame,
  duplicateFrame,
  exportScriptJson,
  importScriptJson,
  moveFrame,
  removeFrame,
  ScriptError,
  type FrameState,
  type StoryboardState,
} from '../state';

export interface StoryboardView {
  root: HTMLElement;
  state: () => StoryboardState;
  render: () => void;
  exportJson: () => string;
  importJson: (text: string) => void;
  renderStory: () => Promise<void>;
  onSelect: ((frame: FrameState) => void) | null;
  onStateReplaced: ((state: StoryboardState) => void) | null;
}

export function createStoryboard(
  client: ServiceClient,
  initial: StoryboardState,
): StoryboardView {
  let state = initial;

  const root = document.createElement('section');
  root.className = 'storyboard';
  root.innerHTML = `
    <h2>Storyboard</h2>
    <div class="story-controls">
      <label>Title <input type="text" data-role="title" /></label>
      <label>Style suffix <input type="text" data-role="style-suffix"
             placeholder="e.g. Cartoon Style" /></label>
      <button data-role="add-frame">Add frame</button>
      <button data-role="render-story">Render story</button>
      <button data-role="export">Export script</button>
      <button data-role="import">Import script</button>
      <textarea data-role="script-io" rows="6" hidden></textarea>
      <span class="error" data-role="story-error" hidden></span>
    </div>
    <ol data-role="strip" class="frame-strip"></ol>
  `;

  const strip = root.querySelector<HTMLOListElement>('[data-role=strip]')!;
  const titleInput = root.querySelector<HTMLInputElement>('[data-role=title]')!;
  const suffixInput = root.querySelector<HTMLInputElement>('[data-role=style-suffix]')!;
  const scriptIo = root.querySelector<HTMLTextAreaElement>('[data-role=script-io]')!;
  const errorSpan = root.querySelector<HTMLSpanElement>('[data-role=story-error]')!;

  const frameErrors = new Map<string, string>();

  const view: StoryboardView = {
    root,
    state: () => state,
    onSelect: null,
    onStateReplaced: null,
    render,
    exportJson: () => exportScriptJson(state),
    importJson(text) {
      const next = importScriptJson(text);
      state = next;
      frameErrors.clear();
      render();
      view.onStateReplaced?.(state);
    },
    async renderStory() {
      errorSpan.hidden = true;
      frameErrors.clear();
      try {
        const story = await client.createStory(JSON.parse(view.exportJson()));
        const submitted = await client.submitStoryJob(story.story_id, {
          steps: 12,
          workers: 2,
        });
        await client.pollJob(submitted.job_id);
        const manifest = await client.getStoryFrames(story.story_id);
        for (const frame of manifest.frames) {
          const img = strip.querySelector<HTMLImageElement>(
            `[data-frame-id="${frame.id}"] img[data-role=thumb]`,
          );
          if (img) {
            img.src = client.storyFrameImageUrl(story.story_id, frame.id);
            img.hidden = false;
          }
        }
      } catch (exc) {
        const message =
          exc instanceof ApiError ? `${exc.code}: ${exc.message}` : String(exc);
        errorSpan.textContent = message;
        errorSpan.hidden = false;
        // a missing plugin names the frame; surface it on that frame's card
        const match = /frame '([^']+)'/.exec(message);
        if (match) {
          frameErrors.set(match[1], message);
          render();
        }
        throw exc;
      }
    },
  };

  titleInput.addEventListener('input', () => {
    state.title = titleInput.value;
  });
  suffixInput.addEventListener('input', () => {
    state.styleSuffix = suffixInput.value.trim() ? suffixInput.value : null;
  });

  root.querySelector('[data-role=add-frame]')!.addEventListener('click', () => {
    const frame = addFrame(state, 'a new scene', state.frames.length);
    render();
    view.onSelect?.(frame);
  });

  root.querySelector('[data-role=render-story]')!.addEventListener('click', () => {
    void view.renderStory().catch(() => undefined);
  });

  root.querySelector('[data-role=export]')!.addEventListener('click', () => {
    scriptIo.hidden = false;
    scriptIo.value = view.exportJson();
  });

  root.querySelector('[data-role=import]')!.addEventListener('click', () => {
    if (scriptIo.hidden) {
      scriptIo.hidden = false;
      scriptIo.value = '';
      scriptIo.placeholder = 'Paste a story script, then press Import again.';
      return;
    }
    errorSpan.hidden = true;
    try {
      view.importJson(scriptIo.value);
      scriptIo.hidden = true;
    } catch (exc) {
      errorSpan.textContent =
        exc instanceof ScriptError ? exc.message : String(exc);
      errorSpan.hidden = false;
    }
  });

  function frameCard(frame: FrameState, index: number): HTMLLIElement {
    const li = document.createElement('li');
    li.className = 'frame-card';
    li.dataset.frameId = frame.id;
    const error = frameErrors.get(frame.id);
    li.innerHTML = `
      <header>
        <strong>${frame.id}</strong>
        <span class="seed">seed ${frame.seed}</span>
      </header>
      <img data-role="thumb" alt="${frame.id}" hidden />
      <p class="prompt">${frame.prompt || '(empty prompt)'}</p>
      <p class="characters">${frame.characters.join(', ') || 'no characters'}</p>
      ${error ? `<p class="error" data-role="frame-error">${error}</p>` : ''}
      <footer>
        <button data-role="select">Edit</button>
        <button data-role="duplicate">Duplicate</button>
        <button data-role="left" ${index === 0 ? 'disabled' : ''}>&larr;</button>
        <button data-role="right" ${index === state.frames.length - 1 ? 'disabled' : ''}>&rarr;</button>
        <button data-role="delete">Delete</button>
      </footer>
    `;
    li.querySelector('[data-role=select]')!.addEventListener('click', () => {
      view.onSelect?.(frame);
    });
    li.querySelector('[data-role=duplicate]')!.addEventListener('click', () => {
      const copy = duplicateFrame(state, index);
      render();
      view.onSelect?.(copy);
    });
    li.querySelector('[data-role=left]')!.addEventListener('click', () => {
      moveFrame(state, index, index - 1);
      render();
    });
    li.querySelector('[data-role=right]')!.addEventListener('click', () => {
      moveFrame(state, index, index + 1);
      render();
    });
    li.querySelector('[data-role=delete]')!.addEventListener('click', () => {
      removeFrame(state, index);
      render();
    });
    return li;
  }

  function render(): void {
    titleInput.value = state.title;
    suffixInput.value = state.styleSuffix ?? '';
    strip.replaceChildren(...state.frames.map((f, i) => frameCard(f, i)));
  }

  render();
  return view;
}
