// DOM rendering: RoomView in, feed markup out. No state of its own.

import type { RoomView } from './feed.js';

export interface PendingSend {
  speaker: string;
  text: string;
  failed: boolean;
}

function esc(text: string): string {
  return text
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;');
}

function badgeHtml(view: RoomView, turnIndex: number): string {
  const badge = view.badges.get(turnIndex);
  if (!badge) return '<span class="badge pending" data-badge="pending">deciding…</span>';
  const latency = badge.latencyMs === undefined ? '' : ` · ${badge.latencyMs.toFixed(1)}ms`;
  const probability = badge.probability === undefined ? '' : `p=${badge.probability.toFixed(2)}`;
  if (badge.error) {
    return `<span class="badge error" data-badge="error" title="${esc(badge.error)}">error${latency}</span>`;
  }
  if (badge.decision === 'SPEAK') {
    return `<span class="badge speak" data-badge="SPEAK">speak ${probability}${latency}</span>`;
  }
  // silent badges stay collapsed so the quiet path does not clutter the room
  return (
    `<details class="badge silent" data-badge="SILENT">` +
    `<summary>silent</summary><span>${probability}${latency}</span></details>`
  );
}

export function renderFeed(view: RoomView, pending: PendingSend[] = []): string {
  const parts: string[] = [];
  for (const item of view.items) {
    if (item.kind === 'turn') {
      if (item.role === 'ai') {
        parts.push(
          `<div class="turn nexus" data-seq="${item.seq}" data-turn="${item.turnIndex}">` +
            `<span class="speaker">Nexus</span><span class="text">${esc(item.text)}</span></div>`,
        );
      } else {
        parts.push(
          `<div class="turn human" data-seq="${item.seq}" data-turn="${item.turnIndex}">` +
            `<span class="speaker">${esc(item.speaker)}</span>` +
            `<span class="text">${esc(item.text)}</span>` +
            badgeHtml(view, item.turnIndex) +
            `</div>`,
        );
      }
    } else if (item.kind === 'policy-change') {
      parts.push(
        `<div class="notice policy" data-seq="${item.seq}">threshold set to ${item.threshold.toFixed(2)}</div>`,
      );
    } else {
      parts.push(`<div class="notice closed" data-seq="${item.seq}">session closed</div>`);
    }
  }
  if (view.nexusTyping) {
    parts.push('<div class="turn nexus typing">Nexus is composing…</div>');
  }
  for (const send of pending) {
    parts.push(
      `<div class="turn human pending-send${send.failed ? ' failed' : ''}">` +
        `<span class="speaker">${esc(send.speaker)}</span>` +
        `<span class="text">${esc(send.text)}</span>` +
        (send.failed
          ? '<button class="retry" data-action="retry">retry</button>'
          : '<span class="badge pending">sending…</span>') +
        `</div>`,
    );
  }
  return parts.join('\n');
}

export function renderStatus(view: RoomView): string {
  return `<span class="status ${view.connection}" data-status="${view.connection}">${view.connection}</span>`;
}

export function renderPolicyPanel(view: RoomView): string {
  if (view.policyKind === null) return '<div class="policy-panel">policy: unknown</div>';
  const isDecoupled = view.policyKind === 'decoupled';
  const threshold = view.threshold ?? 0.5;
  const slider =
    `<input type="range" id="threshold" min="0.01" max="0.99" step="0.01" ` +
    `value="${threshold}" ${isDecoupled ? '' : 'disabled '}/>` +
    `<span id="threshold-value">${threshold.toFixed(2)}</span>`;
  return (
    `<div class="policy-panel" data-policy="${view.policyKind}">` +
    `<label>policy: ${view.policyKind}</label>${slider}</div>`
  );
}
