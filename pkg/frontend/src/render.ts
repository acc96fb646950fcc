/** Pure DOM rendering for chat turns and the evidence panel.
 *
 * Invariant mirrored from the service: every survey-derived numeric in an
 * answered turn carries a citation badge linking it to an evidence cell;
 * refused turns render a banner and zero badges.
 */

import type { AskResponse, EvidenceCell } from './api.js';

const NUMERIC = /\d+(?:\.\d+)?%?/g;

/** Split answer text into plain segments and cited numeric tokens. */
export function tokenize(text: string, citations: Record<string, string>) {
  const out: { text: string; cellId?: string }[] = [];
  let last = 0;
  for (const m of text.matchAll(NUMERIC)) {
    const token = m[0];
    const cellId = citations[token];
    if (cellId === undefined) continue; // uncited numeral (quoted label, stage tag)
    if (m.index! > last) out.push({ text: text.slice(last, m.index) });
    out.push({ text: token, cellId });
    last = m.index! + token.length;
  }
  if (last < text.length) out.push({ text: text.slice(last) });
  return out;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function renderEvidencePanel(panel: HTMLElement, cells: EvidenceCell[]): void {
  panel.replaceChildren();
  for (const cell of cells) {
    const box = el('section', 'evidence-cell');
    box.dataset.cellId = cell.cell_id;
    if (cell.insufficient) box.classList.add('insufficient');
    const head = el('header');
    head.append(el('strong', undefined, cell.fields.join(' × ')));
    head.append(el('span', 'support', `n=${cell.support_n}`));
    if (cell.insufficient) head.append(el('span', 'support-warning', 'insufficient sample'));
    box.append(head);
    for (const tag of cell.stage_tags) box.append(el('span', 'stage-chip', tag));
    if (cell.kind === 'marginal' && cell.payload.percent) {
      const list = el('ul');
      for (const [label, pct] of Object.entries(cell.payload.percent)) {
        list.append(el('li', undefined, `${label}: ${pct}%`));
      }
      box.append(list);
    } else if (cell.payload.rows) {
      const list = el('ul');
      for (const row of cell.payload.rows) {
        const pcts = Object.entries(row.percent)
          .map(([label, pct]) => `${label} ${pct}%`)
          .join(', ');
        list.append(el('li', undefined, `${row.level} (n=${row.n}): ${pcts}`));
      }
      box.append(list);
    }
    panel.append(box);
  }
}

export function renderTurn(
  transcript: HTMLElement,
  panel: HTMLElement,
  question: string,
  payload: AskResponse,
): HTMLElement {
  const turn = el('article', 'turn');
  turn.dataset.status = payload.answer.status;
  turn.append(el('p', 'question', question));

  if (payload.answer.status === 'refused') {
    const banner = el('div', 'refusal-banner');
    banner.dataset.status = 'refused';
    banner.append(el('strong', undefined, 'Cannot answer from the survey data.'));
    banner.append(el('p', 'missing-evidence', payload.answer.missing_evidence));
    turn.append(banner);
  } else {
    const answer = el('p', 'answer');
    for (const seg of tokenize(payload.answer.answer_text, payload.answer.citations)) {
      if (seg.cellId === undefined) {
        answer.append(document.createTextNode(seg.text));
      } else {
        const badge = el('button', 'citation-badge', seg.text);
        badge.dataset.cellId = seg.cellId;
        badge.type = 'button';
        badge.addEventListener('click', () => highlightCell(panel, seg.cellId!));
        answer.append(badge);
      }
    }
    turn.append(answer);
  }
  renderEvidencePanel(panel, payload.evidence);
  transcript.append(turn);
  return turn;
}

export function highlightCell(panel: HTMLElement, cellId: string): void {
  for (const box of panel.querySelectorAll<HTMLElement>('.evidence-cell')) {
    box.classList.toggle('highlight', box.dataset.cellId === cellId);
  }
}

export function renderError(transcript: HTMLElement, question: string, message: string): HTMLElement {
  const turn = el('article', 'turn');
  turn.dataset.status = 'error';
  turn.append(el('p', 'question', question));
  turn.append(el('p', 'error-message', message));
  transcript.append(turn);
  return turn;
}
