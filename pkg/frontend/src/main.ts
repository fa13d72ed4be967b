// Entry point: a session-id join screen, then the live room.

import { RoomApi } from './api.js';
import { Room, sanitizeDisplayName } from './room.js';

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function baseUrl(): string {
  const input = el<HTMLInputElement>('server-url').value.trim();
  return (input || window.location.origin).replace(/\/$/, '');
}

async function enterRoom(sessionId: string, name: string): Promise<void> {
  const api = new RoomApi(baseUrl());
  el('join-screen').hidden = true;
  el('room-screen').hidden = false;
  el('room-title').textContent = `session ${sessionId}`;

  const room = new Room(api, sessionId, sanitizeDisplayName(name), {
    feed: el('feed'),
    status: el('status'),
    policyPanel: el('policy-panel'),
  });

  const composer = el<HTMLFormElement>('composer');
  const input = el<HTMLInputElement>('message');
  composer.addEventListener('submit', (ev) => {
    ev.preventDefault();
    const text = input.value;
    input.value = '';
    void room.send(text);
  });
  input.addEventListener('input', () => {
    el<HTMLButtonElement>('send').disabled = !input.value.trim();
  });
  el('feed').addEventListener('click', (ev) => {
    const target = ev.target as HTMLElement;
    if (target.dataset['action'] === 'retry') void room.retryFailed();
  });
  el('policy-panel').addEventListener('change', (ev) => {
    const target = ev.target as HTMLInputElement;
    if (target.id !== 'threshold') return;
    const value = Number(target.value);
    if (!(value > 0 && value < 1)) {
      el('policy-error').textContent = 'threshold must be between 0 and 1 (exclusive)';
      return;
    }
    el('policy-error').textContent = '';
    void room.adjustThreshold(value).catch((err: Error) => {
      el('policy-error').textContent = err.message;
    });
  });

  await room.join();
}

function wireJoinScreen(): void {
  const form = el<HTMLFormElement>('join-form');
  form.addEventListener('submit', async (ev) => {
    ev.preventDefault();
    const name = el<HTMLInputElement>('display-name').value;
    const sessionInput = el<HTMLInputElement>('session-id').value.trim();
    const errorBox = el('join-error');
    errorBox.textContent = '';
    try {
      let sessionId = sessionInput;
      if (!sessionId) {
        const api = new RoomApi(baseUrl());
        const threshold = Number(el<HTMLInputElement>('new-threshold').value) || 0.5;
        const created = await api.createSession({ policy: 'decoupled', threshold });
        sessionId = created.session_id;
      }
      await enterRoom(sessionId, name);
    } catch (err) {
      errorBox.textContent = err instanceof Error ? err.message : String(err);
    }
  });
}

wireJoinScreen();
