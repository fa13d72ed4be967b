// Room controller: joins a session, keeps the view folded over the live
// event stream, reconciles optimistic sends, and applies operator steering.

import { EventStream, RoomApi } from './api.js';
import { applyEvent, emptyView, type RoomView } from './feed.js';
import { renderFeed, renderPolicyPanel, renderStatus, type PendingSend } from './render.js';
import type { SessionEvent } from './types.js';

export interface RoomElements {
  feed: HTMLElement;
  status: HTMLElement;
  policyPanel: HTMLElement;
}

export class Room {
  readonly view: RoomView;
  private readonly pending: PendingSend[] = [];
  private stream: EventStream | null = null;
  displayName: string;

  constructor(
    private readonly api: RoomApi,
    readonly sessionId: string,
    displayName: string,
    private readonly elements: RoomElements,
    private readonly retryMs = 400,
  ) {
    this.view = emptyView(sessionId);
    this.displayName = displayName;
  }

  /** Subscribe from sequence 0: full backlog, then the live tail. */
  join(): Promise<void> {
    this.stream = new EventStream(
      this.api,
      this.sessionId,
      0,
      {
        onEvent: (event) => this.onEvent(event),
        onStatus: (status) => {
          this.view.connection = status;
          this.render();
        },
      },
      this.retryMs,
    );
    this.render();
    return this.stream.run();
  }

  leave(): void {
    this.stream?.stop();
  }

  private onEvent(event: SessionEvent): void {
    applyEvent(this.view, event);
    if (event.kind === 'TurnAdded') {
      // reconcile the matching optimistic bubble, if any
      const speaker = event.payload['speaker'] as string;
      const text = event.payload['text'] as string;
      const i = this.pending.findIndex((s) => s.speaker === speaker && s.text === text);
      if (i >= 0) this.pending.splice(i, 1);
    }
    this.render();
  }

  async send(text: string): Promise<void> {
    const trimmed = text.trim();
    if (!trimmed || this.view.closed) return;
    const entry: PendingSend = { speaker: this.displayName, text: trimmed, failed: false };
    this.pending.push(entry);
    this.render();
    try {
      await this.api.postTurn(this.sessionId, this.displayName, trimmed);
    } catch {
      entry.failed = true; // retry affordance; never silently dropped
      this.render();
    }
  }

  async retryFailed(): Promise<void> {
    const failed = this.pending.filter((s) => s.failed);
    for (const entry of failed) {
      entry.failed = false;
      this.render();
      try {
        await this.api.postTurn(this.sessionId, entry.speaker, entry.text);
      } catch {
        entry.failed = true;
        this.render();
      }
    }
  }

  async adjustThreshold(threshold: number): Promise<void> {
    if (!(threshold > 0 && threshold < 1)) {
      throw new RangeError('threshold must be strictly between 0 and 1');
    }
    await this.api.updateThreshold(this.sessionId, threshold);
  }

  render(): void {
    this.elements.feed.innerHTML = renderFeed(this.view, this.pending);
    this.elements.status.innerHTML = renderStatus(this.view);
    this.elements.policyPanel.innerHTML = renderPolicyPanel(this.view);
  }
}

/** Names are free-form but "Nexus" is the AI's; disambiguate instead of failing. */
export function sanitizeDisplayName(name: string): string {
  const trimmed = name.trim().replace(/:/g, '');
  if (!trimmed) throw new RangeError('display name must be non-empty');
  if (trimmed === 'Nexus') return 'Nexus (human)';
  return trimmed;
}
