// HTTP + event-stream client for the session service.
//
// The stream client parses server-sent events off a plain fetch body and
// reconnects automatically, always resuming from the next unseen sequence
// number, so consumers observe every event exactly once and in order.

import type { DecisionRecord, PolicyConfig, SessionEvent } from './types.js';

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

async function jsonCall<T>(method: string, url: string, body?: unknown): Promise<T> {
  const response = await fetch(url, {
    method,
    headers: body === undefined ? {} : { 'Content-Type': 'application/json' },
    body: body === undefined ? undefined : JSON.stringify(body),
  });
  const text = await response.text();
  const payload = text ? JSON.parse(text) : {};
  if (!response.ok) {
    throw new ApiError(response.status, (payload as { error?: string }).error ?? response.statusText);
  }
  return payload as T;
}

export class RoomApi {
  constructor(readonly baseUrl: string) {}

  createSession(config: PolicyConfig): Promise<{ session_id: string }> {
    return jsonCall('POST', `${this.baseUrl}/sessions`, config);
  }

  postTurn(sessionId: string, speaker: string, text: string): Promise<DecisionRecord> {
    return jsonCall('POST', `${this.baseUrl}/sessions/${sessionId}/turns`, { speaker, text });
  }

  updateThreshold(sessionId: string, threshold: number): Promise<{ policy_config: PolicyConfig }> {
    return jsonCall('PATCH', `${this.baseUrl}/sessions/${sessionId}/policy`, { threshold });
  }

  eventsUrl(sessionId: string, fromSeq: number): string {
    return `${this.baseUrl}/sessions/${sessionId}/events?from=${fromSeq}`;
  }
}

/** Parse one SSE frame (the text between blank lines) into its data payload. */
function frameData(frame: string): string | null {
  const dataLines = frame
    .split('\n')
    .filter((line) => line.startsWith('data:'))
    .map((line) => line.slice(5).trimStart());
  return dataLines.length ? dataLines.join('\n') : null;
}

export interface StreamHandlers {
  onEvent: (event: SessionEvent) => void;
  onStatus?: (status: 'connected' | 'reconnecting' | 'closed') => void;
}

export class EventStream {
  private nextSeq: number;
  private stopped = false;
  private retryMs: number;

  constructor(
    private readonly api: RoomApi,
    private readonly sessionId: string,
    fromSeq: number,
    private readonly handlers: StreamHandlers,
    retryMs = 500,
  ) {
    this.nextSeq = fromSeq;
    this.retryMs = retryMs;
  }

  stop(): void {
    this.stopped = true;
  }

  /** Runs until stop() or the session closes; reconnects on any stream drop. */
  async run(): Promise<void> {
    while (!this.stopped) {
      try {
        const closed = await this.consumeOnce();
        if (closed) {
          this.handlers.onStatus?.('closed');
          return;
        }
      } catch {
        // fall through to reconnect
      }
      if (this.stopped) return;
      this.handlers.onStatus?.('reconnecting');
      await new Promise((resolve) => setTimeout(resolve, this.retryMs));
    }
  }

  private async consumeOnce(): Promise<boolean> {
    const response = await fetch(this.api.eventsUrl(this.sessionId, this.nextSeq), {
      headers: { Accept: 'text/event-stream' },
    });
    if (!response.ok || !response.body) {
      throw new ApiError(response.status, 'event stream unavailable');
    }
    this.handlers.onStatus?.('connected');
    const reader = response.body.getReader();
    const decoder = new TextDecoder();
    let buffer = '';
    for (;;) {
      const { done, value } = await reader.read();
      if (this.stopped) {
        await reader.cancel().catch(() => undefined);
        return false;
      }
      if (done) return false; // dropped mid-stream; caller reconnects
      buffer += decoder.decode(value, { stream: true });
      let cut: number;
      while ((cut = buffer.indexOf('\n\n')) >= 0) {
        const frame = buffer.slice(0, cut);
        buffer = buffer.slice(cut + 2);
        const data = frameData(frame);
        if (data === null) continue; // keep-alive comment
        const event = JSON.parse(data) as SessionEvent;
        if (event.seq < this.nextSeq) continue; // duplicate after resume
        if (event.seq > this.nextSeq) {
          // a gap means this connection is unusable; resync from nextSeq
          await reader.cancel().catch(() => undefined);
          throw new Error(`event gap: expected ${this.nextSeq}, got ${event.seq}`);
        }
        this.nextSeq = event.seq + 1;
        this.handlers.onEvent(event);
        if (event.kind === 'SessionClosed') {
          await reader.cancel().catch(() => undefined);
          return true;
        }
      }
    }
  }
}
