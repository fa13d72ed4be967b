// Wire types for the discussd session service.

export type Decision = 'SPEAK' | 'SILENT';
export type PolicyKind = 'end_to_end' | 'decoupled';

export interface SessionEvent {
  seq: number;
  kind:
    | 'SessionCreated'
    | 'TurnAdded'
    | 'DecisionMade'
    | 'InterventionStarted'
    | 'InterventionCompleted'
    | 'PolicyUpdated'
    | 'SessionClosed';
  payload: Record<string, unknown>;
  ts: number;
}

export interface PolicyConfig {
  policy: PolicyKind;
  threshold?: number;
  classifier_url?: string;
  backend_url?: string;
}

export interface DecisionRecord {
  turn_index: number;
  decision: Decision;
  latency_ms: number;
  probability?: number;
  first_token?: string;
  error?: string;
}

export type ConnectionStatus = 'connecting' | 'connected' | 'reconnecting' | 'closed';
