// Task panel rendering: verify tasks offer one-keystroke accept plus a
// correction field; blind tasks offer a free-text field only. Blind tasks
// must never put any label into the DOM, and a task can submit at most once.

import { Task } from './api.js';

export interface TaskViewHandle {
  /** True once a submission has been fired; further submits are ignored. */
  readonly submitted: boolean;
}

export function renderTask(
  container: HTMLElement,
  task: Task,
  onSubmit: (label: string) => void,
): TaskViewHandle {
  container.replaceChildren();
  const state = { submitted: false };
  const fire = (label: string) => {
    if (state.submitted) return; // double-click / double-enter guard
    state.submitted = true;
    for (const el of container.querySelectorAll('button, input')) {
      (el as HTMLButtonElement | HTMLInputElement).disabled = true;
    }
    onSubmit(label);
  };

  const heading = document.createElement('h2');
  heading.textContent = task.kind === 'verify' ? 'Verify prediction' : 'Enter label';
  container.appendChild(heading);

  const canvas = document.createElement('canvas');
  canvas.className = 'item-image';
  canvas.dataset.imageUrl = task.image_url;
  container.appendChild(canvas);

  const form = document.createElement('form');
  form.addEventListener('submit', (e) => e.preventDefault());
  container.appendChild(form);

  const input = document.createElement('input');
  input.type = 'text';
  input.autocomplete = 'off';
  input.className = 'label-input';

  if (task.kind === 'verify') {
    const proposed = task.proposed_label ?? '';
    const proposal = document.createElement('div');
    proposal.className = 'proposed-label';
    proposal.textContent = proposed;
    form.appendChild(proposal);

    const accept = document.createElement('button');
    accept.type = 'submit'; // Enter accepts
    accept.className = 'accept';
    accept.textContent = 'Accept (Enter)';
    accept.addEventListener('click', () => fire(proposed));
    form.appendChild(accept);

    input.placeholder = 'correct label...';
    form.appendChild(input);
    const correct = document.createElement('button');
    correct.type = 'button';
    correct.className = 'correct';
    correct.textContent = 'Submit correction';
    correct.addEventListener('click', () => {
      if (input.value.trim()) fire(input.value);
    });
    form.appendChild(correct);
  } else {
    input.placeholder = 'label...';
    form.appendChild(input);
    const submit = document.createElement('button');
    submit.type = 'submit';
    submit.className = 'submit';
    submit.textContent = 'Submit';
    const fireBlind = () => {
      if (input.value.trim()) fire(input.value);
    };
    submit.addEventListener('click', fireBlind);
    form.addEventListener('submit', fireBlind);
    form.appendChild(submit);
  }

  return {
    get submitted() {
      return state.submitted;
    },
  };
}

export function renderIdle(container: HTMLElement): void {
  container.replaceChildren();
  const note = document.createElement('p');
  note.className = 'idle';
  note.textContent = 'No tasks available; retrying shortly.';
  container.appendChild(note);
}
