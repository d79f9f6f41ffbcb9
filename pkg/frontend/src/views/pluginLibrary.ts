import { ApiError, ServiceClient } from '../api';
import type { PluginMeta } from '../types';

export interface PluginLibraryView {
  root: HTMLElement;
  refresh: () => Promise<void>;
  plugins: () => PluginMeta[];
  onChange: ((plugins: PluginMeta[]) => void) | null;
}

export function createPluginLibrary(client: ServiceClient): PluginLibraryView {
  const root = document.createElement('section');
  root.className = 'plugin-library';
  root.innerHTML = `
    <h2>Character plugins</h2>
    <div class="upload-row">
      <input type="file" accept=".cgcp" data-role="file" />
      <button data-role="upload">Upload plugin</button>
      <span class="error" data-role="upload-error" hidden></span>
    </div>
    <div data-role="cards" class="plugin-cards"></div>
  `;

  const cards = root.querySelector<HTMLDivElement>('[data-role=cards]')!;
  const fileInput = root.querySelector<HTMLInputElement>('[data-role=file]')!;
  const uploadButton = root.querySelector<HTMLButtonElement>('[data-role=upload]')!;
  const errorSpan = root.querySelector<HTMLSpanElement>('[data-role=upload-error]')!;

  let current: PluginMeta[] = [];

  const view: PluginLibraryView = {
    root,
    plugins: () => current,
    onChange: null,
    async refresh() {
      current = await client.listPlugins();
      renderCards();
      view.onChange?.(current);
    },
  };

  function renderCards(): void {
    cards.replaceChildren();
    if (current.length === 0) {
      const empty = document.createElement('p');
      empty.className = 'empty-state';
      empty.textContent =
        'No plugins yet. Train a character and upload its .cgcp file to begin.';
      cards.appendChild(empty);
      return;
    }
    for (const meta of current) {
      const card = document.createElement('div');
      card.className = 'plugin-card';
      card.dataset.plugin = meta.name;
      card.innerHTML = `
        <strong>${meta.name}</strong>
        <span class="noun">${meta.class_noun}</span>
        <span class="dims">${meta.rows}x${meta.cols}</span>
        <span class="backend">${meta.descriptor_id}</span>
      `;
      cards.appendChild(card);
    }
  }

  uploadButton.addEventListener('click', async () => {
    errorSpan.hidden = true;
    const file = fileInput.files?.[0];
    if (!file) {
      errorSpan.textContent = 'Choose a .cgcp file first.';
      errorSpan.hidden = false;
      return;
    }
    try {
      await client.uploadPlugin(file);
      fileInput.value = '';
      await view.refresh();
    } catch (exc) {
      errorSpan.textContent =
        exc instanceof ApiError ? `${exc.code}: ${exc.message}` : String(exc);
      errorSpan.hidden = false;
    }
  });

  renderCards();
  return view;
}
