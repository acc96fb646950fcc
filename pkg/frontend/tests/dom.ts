/** Installs a happy-dom window as the test-global DOM. */

import { readFileSync } from 'node:fs';

import { Window } from 'happy-dom';

export function installDom(): void {
  const window = new Window();
  const g = globalThis as Record<string, unknown>;
  g.window = window;
  g.document = window.document;
  g.Node = window.Node;
  g.Event = window.Event;
  g.HTMLElement = window.HTMLElement;
}

export function mountPanel() {
  document.body.innerHTML =
    '<div id="transcript"></div><aside id="evidence-panel"></aside>';
  return {
    transcript: document.querySelector('#transcript') as HTMLElement,
    panel: document.querySelector('#evidence-panel') as HTMLElement,
  };
}

export function mountApp() {
  document.body.innerHTML = `
    <form id="ask-form"><input id="question" /><button id="ask-button"></button></form>
    <div id="transcript"></div><aside id="evidence-panel"></aside>`;
  return {
    form: document.querySelector('#ask-form') as HTMLFormElement,
    input: document.querySelector('#question') as HTMLInputElement,
    button: document.querySelector('#ask-button') as HTMLButtonElement,
    transcript: document.querySelector('#transcript') as HTMLElement,
    panel: document.querySelector('#evidence-panel') as HTMLElement,
  };
}

/** Poll until `check` stops throwing (bounded). */
export async function waitFor(check: () => void, tries = 50): Promise<void> {
  for (let i = 0; ; i += 1) {
    try {
      check();
      return;
    } catch (err) {
      if (i >= tries) throw err;
      await new Promise((resolve) => setTimeout(resolve, 10));
    }
  }
}

export function readFixture(name: string): unknown {
  // compiled location is dist/tests/, so ../../tests/fixtures resolves to the
  // source fixture directory
  return JSON.parse(
    readFileSync(new URL(`../../tests/fixtures/${name}`, import.meta.url), 'utf8'),
  );
}
