import { setupApp } from './app.js';

declare global {
  interface Window {
    SERVICE_URL?: string;
  }
}

const BASE_URL = window.SERVICE_URL ?? 'http://127.0.0.1:8000';

setupApp(
  {
    form: document.querySelector('#ask-form') as HTMLFormElement,
    input: document.querySelector('#question') as HTMLInputElement,
    button: document.querySelector('#ask-button') as HTMLButtonElement,
    transcript: document.querySelector('#transcript') as HTMLElement,
    panel: document.querySelector('#evidence-panel') as HTMLElement,
  },
  BASE_URL,
);
