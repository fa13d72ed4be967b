// Room state as a pure fold over the session event log.
//
// Every piece of rendered feed content derives from events alone, so
// replaying the same log always produces the same view (and the same DOM).

import type { ConnectionStatus, Decision, PolicyConfig, PolicyKind, SessionEvent } from './types.js';

export interface DecisionBadge {
  decision: Decision;
  probability?: number;
  latencyMs?: number;
  error?: string;
}

export type FeedItem =
  | {
      kind: 'turn';
      seq: number;
      turnIndex: number;
      speaker: string;
      text: string;
      role: 'human' | 'ai';
    }
  | { kind: 'policy-change'; seq: number; threshold: number }
  | { kind: 'closed'; seq: number };

export interface RoomView {
  sessionId: string;
  connection: ConnectionStatus;
  policyKind: PolicyKind | null;
  threshold: number | null;
  items: FeedItem[];
  badges: Map<number, DecisionBadge>; // turn_index -> badge
  nexusTyping: boolean;
  lastSeq: number;
  closed: boolean;
}

export function emptyView(sessionId: string): RoomView {
  return {
    sessionId,
    connection: 'connecting',
    policyKind: null,
    threshold: null,
    items: [],
    badges: new Map(),
    nexusTyping: false,
    lastSeq: -1,
    closed: false,
  };
}

/**
 * Fold one event into the view. Duplicates (seq already applied) are ignored
 * and gaps are rejected, so the feed can never skip or repeat an event no
 * matter how the transport behaves.
 */
export function applyEvent(view: RoomView, event: SessionEvent): boolean {
  if (event.seq <= view.lastSeq) return false; // duplicate
  if (event.seq !== view.lastSeq + 1) {
    throw new Error(`feed gap: expected seq ${view.lastSeq + 1}, got ${event.seq}`);
  }
  view.lastSeq = event.seq;
  const p = event.payload;
  switch (event.kind) {
    case 'SessionCreated': {
      const config = p['policy_config'] as PolicyConfig | undefined;
      view.policyKind = config?.policy ?? null;
      view.threshold = config?.threshold ?? null;
      break;
    }
    case 'TurnAdded':
      view.items.push({
        kind: 'turn',
        seq: event.seq,
        turnIndex: p['turn_index'] as number,
        speaker: p['speaker'] as string,
        text: p['text'] as string,
        role: (p['role'] as string) === 'ai' ? 'ai' : 'human',
      });
      break;
    case 'DecisionMade':
      view.badges.set(p['turn_index'] as number, {
        decision: p['decision'] as Decision,
        probability: p['probability'] as number | undefined,
        latencyMs: p['latency_ms'] as number | undefined,
        error: p['error'] as string | undefined,
      });
      break;
    case 'InterventionStarted':
      view.nexusTyping = true;
      break;
    case 'InterventionCompleted':
      view.nexusTyping = false;
      break;
    case 'PolicyUpdated': {
      const threshold = p['threshold'] as number;
      view.threshold = threshold;
      view.items.push({ kind: 'policy-change', seq: event.seq, threshold });
      break;
    }
    case 'SessionClosed':
      view.closed = true;
      view.connection = 'closed';
      view.items.push({ kind: 'closed', seq: event.seq });
      break;
  }
  return true;
}

/** Rebuild a view from scratch; the pure-function form used by tests. */
export function reduceEvents(sessionId: string, events: SessionEvent[]): RoomView {
  const view = emptyView(sessionId);
  for (const event of events) applyEvent(view, event);
  return view;
}
