import { ServiceClient } from './api';
import { addFrame, emptyStoryboard } from './state';
import { createFrameEditor } from './views/frameEditor';
import { createPluginLibrary } from './views/pluginLibrary';
import { createStoryboard } from './views/storyboard';
import './styles.css';

const client = new ServiceClient('/api');
const state = emptyStoryboard('my story');
const firstFrame = addFrame(state, 'a girl in a park', 1);

const app = document.getElementById('app')!;
const library = createPluginLibrary(client);
const editor = createFrameEditor(client, state, firstFrame);
const storyboard = createStoryboard(client, state);

library.onChange = (plugins) => editor.setPlugins(plugins);
storyboard.onSelect = (frame) => editor.setFrame(frame);
storyboard.onStateReplaced = (next) => {
  // the editor keeps pointing into the replaced storyboard state
  if (next.frames.length > 0) {
    editor.setFrame(next.frames[0]);
  }
};
editor.onRendered = () => storyboard.render();

app.append(library.root, editor.root, storyboard.root);

void library.refresh().catch((exc) => {
  console.warn('plugin refresh failed (is the service running?)', exc);
});
