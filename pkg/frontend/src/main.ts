import { ApiClient } from './api.js';
import { SessionController } from './session.js';
import { SessionView } from './ui.js';

/**
 * Entry point.  Configuration comes from the query string:
 *   ?base=http://host:port&study=STUDY_ID&rater=RATER_ID
 * The base URL is the single setting the client needs.
 */
async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const base = params.get('base') ?? window.location.origin;
  const studyId = params.get('study');
  const raterId = params.get('rater');
  const root = document.getElementById('app');
  if (!root) throw new Error('missing #app element');
  if (!studyId || !raterId) {
    root.textContent = 'Provide ?study=STUDY_ID&rater=RATER_ID in the URL.';
    return;
  }
  const api = new ApiClient(base);
  const controller = await SessionController.open(api, studyId, raterId);
  new SessionView(root, controller);
}

boot().catch((err) => {
  const root = document.getElementById('app');
  if (root) root.textContent = `Failed to start session: ${err}`;
});
