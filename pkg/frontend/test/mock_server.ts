// In-memory stand-in for the session service speaking the exact wire
// contract: JSON endpoints plus "id: N / data: {...}" SSE frames.

import type { SessionEvent } from '../src/types.js';

interface Conn {
  controller: ReadableStreamDefaultController<Uint8Array>;
  next: number;
  closeAfterSeq: number | null;
  done: boolean;
}

const encoder = new TextEncoder();

export class MockServer {
  readonly base = 'http://mock.test';
  readonly sessionId = 'abc123def456';
  events: SessionEvent[] = [];
  probability = 0.7;
  threshold = 0.5;
  completion = 'a crisp correction.';
  turnCount = 0;
  /** Streams drop after delivering this seq, once per entry (reconnect drills). */
  dropPlan: number[] = [];
  streamRequests: string[] = [];
  private conns: Conn[] = [];

  constructor(withCreated = true) {
    if (withCreated) {
      this.emit('SessionCreated', {
        policy_config: { policy: 'decoupled', threshold: this.threshold },
      });
    }
  }

  emit(kind: SessionEvent['kind'], payload: Record<string, unknown>): SessionEvent {
    const event: SessionEvent = { seq: this.events.length, kind, payload, ts: this.events.length };
    this.events.push(event);
    for (const conn of this.conns) this.push(conn);
    return event;
  }

  private push(conn: Conn): void {
    if (conn.done) return;
    while (conn.next < this.events.length) {
      const event = this.events[conn.next]!;
      conn.controller.enqueue(encoder.encode(`id: ${event.seq}\ndata: ${JSON.stringify(event)}\n\n`));
      conn.next += 1;
      if (conn.closeAfterSeq !== null && event.seq >= conn.closeAfterSeq) {
        conn.done = true;
        conn.controller.close();
        return;
      }
    }
  }

  private postTurn(body: { speaker: string; text: string }): Record<string, unknown> {
    const turnIndex = this.turnCount++;
    this.emit('TurnAdded', { turn_index: turnIndex, speaker: body.speaker, role: 'human', text: body.text });
    const speak = this.probability >= this.threshold;
    const record: Record<string, unknown> = {
      turn_index: turnIndex,
      decision: speak ? 'SPEAK' : 'SILENT',
      probability: this.probability,
      latency_ms: 3.5,
    };
    this.emit('DecisionMade', record);
    if (speak) {
      this.emit('InterventionStarted', { trigger_turn_index: turnIndex });
      const aiIndex = this.turnCount++;
      this.emit('TurnAdded', { turn_index: aiIndex, speaker: 'Nexus', role: 'ai', text: this.completion });
      this.emit('InterventionCompleted', {
        trigger_turn_index: turnIndex,
        turn_index: aiIndex,
        text: this.completion,
        generation_ms: 11.0,
      });
    }
    return record;
  }

  close(): void {
    this.emit('SessionClosed', {});
  }

  fetch = async (input: RequestInfo | URL, init?: RequestInit): Promise<Response> => {
    const url = String(input);
    const method = init?.method ?? 'GET';
    const path = url.replace(this.base, '');

    if (method === 'POST' && path === `/sessions/${this.sessionId}/turns`) {
      const body = JSON.parse(String(init?.body ?? '{}')) as { speaker: string; text: string };
      if (body.speaker === 'Nexus') {
        return json(400, { error: "'Nexus' is reserved for the policy" });
      }
      return json(200, this.postTurn(body));
    }

    if (method === 'PATCH' && path === `/sessions/${this.sessionId}/policy`) {
      const body = JSON.parse(String(init?.body ?? '{}')) as { threshold: number };
      if (!(body.threshold > 0 && body.threshold < 1)) {
        return json(400, { error: `threshold must be in (0, 1), got ${body.threshold}` });
      }
      this.threshold = body.threshold;
      this.emit('PolicyUpdated', { threshold: body.threshold });
      return json(200, { policy_config: { policy: 'decoupled', threshold: body.threshold } });
    }

    const eventsMatch = path.match(new RegExp(`^/sessions/${this.sessionId}/events\\?from=(\\d+)$`));
    if (method === 'GET' && eventsMatch) {
      this.streamRequests.push(path);
      const from = Number(eventsMatch[1]);
      const closeAfterSeq = this.dropPlan.shift() ?? null;
      const server = this;
      const stream = new ReadableStream<Uint8Array>({
        start(controller) {
          const conn: Conn = { controller, next: from, closeAfterSeq, done: false };
          server.conns.push(conn);
          server.push(conn);
        },
      });
      return new Response(stream, { status: 200, headers: { 'Content-Type': 'text/event-stream' } });
    }

    return json(404, { error: `no mock route for ${method} ${path}` });
  };
}

function json(status: number, payload: unknown): Response {
  return new Response(JSON.stringify(payload), {
    status,
    headers: { 'Content-Type': 'application/json' },
  });
}
