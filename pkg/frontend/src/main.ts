// Page wiring: one annotator id per session, a task polling loop with
// exponential backoff, and a dashboard refreshed on a fixed interval.

import { ApiClient, LeaseExpiredError, Task } from './api.js';
import { renderDashboard, renderStaleBanner } from './dashboard.js';
import { drawPgm, parsePgm } from './pgm.js';
import { renderIdle, renderTask } from './taskView.js';

const IDLE_RETRY_MS = 2000;
const DASHBOARD_POLL_MS = 2000;
const BACKOFF_START_MS = 500;
const BACKOFF_MAX_MS = 15000;

export function startApp(root: Document = document): void {
  const api = new ApiClient('');
  const taskPane = root.getElementById('task-pane')!;
  const dashPane = root.getElementById('dashboard-pane')!;
  const annotatorForm = root.getElementById('annotator-form') as HTMLFormElement;
  const annotatorInput = root.getElementById('annotator-id') as HTMLInputElement;

  let annotator = '';
  let backoff = BACKOFF_START_MS;

  annotatorForm.addEventListener('submit', (e) => {
    e.preventDefault();
    if (annotator || !annotatorInput.value.trim()) return;
    annotator = annotatorInput.value.trim();
    annotatorInput.disabled = true;
    void pollTask();
  });

  async function pollTask(): Promise<void> {
    let task: Task | null;
    try {
      task = await api.nextTask(annotator);
      backoff = BACKOFF_START_MS;
    } catch {
      backoff = Math.min(backoff * 2, BACKOFF_MAX_MS);
      setTimeout(pollTask, backoff);
      return;
    }
    if (task === null) {
      renderIdle(taskPane);
      setTimeout(pollTask, IDLE_RETRY_MS);
      return;
    }
    showTask(task);
  }

  function showTask(task: Task): void {
    renderTask(taskPane, task, (label) => void submit(task, label));
    const canvas = taskPane.querySelector('canvas');
    if (canvas) {
      api
        .imageBytes(task.image_url)
        .then((bytes) => drawPgm(canvas, parsePgm(bytes)))
        .catch(() => undefined);
    }
  }

  async function submit(task: Task, label: string): Promise<void> {
    try {
      await api.submitLabel(task.task_id, label);
    } catch (err) {
      if (!(err instanceof LeaseExpiredError)) {
        // transient failure: the guard already fired, so re-render the same
        // task after backoff rather than re-posting blindly
        backoff = Math.min(backoff * 2, BACKOFF_MAX_MS);
        setTimeout(() => void pollTask(), backoff);
        return;
      }
      // expired lease: drop the task and fetch a fresh one
    }
    void pollTask();
  }

  async function pollDashboard(): Promise<void> {
    try {
      const snapshot = await api.metrics();
      renderDashboard(dashPane, snapshot);
      renderStaleBanner(dashPane, false);
    } catch {
      renderStaleBanner(dashPane, true);
    }
    setTimeout(pollDashboard, DASHBOARD_POLL_MS);
  }

  void pollDashboard();
}

if (typeof window !== 'undefined' && typeof document !== 'undefined') {
  if (document.readyState === 'loading') {
    document.addEventListener('DOMContentLoaded', () => startApp());
  } else {
    startApp();
  }
}
