/** Wires the question form to the API client and the renderers.
 * One in-flight request per tab; the input is disabled while pending and the
 * question is retained for retry on error. */

import { ask } from './api.js';
import { renderError, renderTurn } from './render.js';

export interface AppElements {
  form: HTMLFormElement;
  input: HTMLInputElement;
  button: HTMLButtonElement;
  transcript: HTMLElement;
  panel: HTMLElement;
}

export function setupApp(elements: AppElements, baseUrl: string): void {
  const { form, input, button, transcript, panel } = elements;
  form.addEventListener('submit', (event) => {
    event.preventDefault();
    void submit();
  });

  async function submit(): Promise<void> {
    const question = input.value.trim();
    if (!question || input.disabled) return;
    input.disabled = true;
    button.disabled = true;
    try {
      const result = await ask(baseUrl, question);
      if (result.ok) {
        renderTurn(transcript, panel, question, result.data);
        input.value = ''; // only clear on success so errors can be retried
      } else {
        renderError(transcript, question, result.message);
      }
    } finally {
      input.disabled = false;
      button.disabled = false;
      input.focus();
    }
  }
}
