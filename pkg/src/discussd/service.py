"""Live turn-stream sessions: after every human turn a policy decides SILENT
or SPEAK, and SPEAK appends a generated Nexus turn.

Two architectures serve behind one interface. The end-to-end policy samples a
single token from a generative backend and stays silent exactly when that
token is the silent marker ">". The decoupled policy asks a lightweight
classifier for an intervention probability and speaks when it reaches the
threshold, invoking the generator only then.

Sessions persist as append-only newline-delimited event logs, one file per
session; replaying a log reconstructs the exact session state, which is the
whole crash-recovery story. Turn ingestion is serialized per session while
event streaming is multi-reader.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Protocol, Sequence, runtime_checkable

from discussd.backends import (
    BackendError,
    ChatBackend,
    ChatMessage,
    ChatRequest,
    ClassifierBackend,
    HttpChatBackend,
    HttpClassifier,
)
from discussd.metrics import latency_stats
from discussd.training import Label, render_context
from discussd.transcript import AI_SPEAKER, Discussion, Role, Turn, ValidationReport, format_transcript, validate_text

SILENT_TOKEN = ">"
DEFAULT_THRESHOLD = 0.5


class InvalidPolicyConfigError(ValueError):
    pass


class UnknownSessionError(KeyError):
    pass


class SessionClosedError(RuntimeError):
    pass


class ReservedSpeakerNameError(ValueError):
    pass


class CorruptLogError(RuntimeError):
    pass


@dataclass
class PolicyDecision:
    decision: Label
    probability: float | None = None
    first_token: str | None = None
    latency_ms: float | None = None  # backend-reported, when it has one


@runtime_checkable
class DecisionPolicy(Protocol):
    def decide(self, context: Sequence[Turn]) -> PolicyDecision: ...

    def generate(self, context: Sequence[Turn]) -> str: ...


def _strip_generation(text: str) -> str:
    """Clean a generated intervention: drop a leading speaker header and stray tags."""
    text = text.strip()
    for tag in ("[AI_APPEARED]", "[/AI_DISAPPEARED]"):
        text = text.replace(tag, " ")
    text = text.strip()
    if text.startswith(f"{AI_SPEAKER}:"):
        text = text[len(AI_SPEAKER) + 1 :].strip()
    return " ".join(text.split())


class EndToEndPolicy:
    """Single generative model; the first sampled token is the decision."""

    def __init__(self, backend: ChatBackend, silent_token: str = SILENT_TOKEN, max_tokens: int = 256):
        self.backend = backend
        self.silent_token = silent_token
        self.max_tokens = max_tokens

    def _prompt(self, context: Sequence[Turn]) -> list[ChatMessage]:
        rendered = render_context(context)
        return [
            ChatMessage(
                "system",
                "You monitor a live group discussion. Reply with the single "
                f"character {self.silent_token} to stay silent, or speak as "
                f"{AI_SPEAKER} only when an intervention adds value.",
            ),
            ChatMessage("user", rendered),
        ]

    def decide(self, context: Sequence[Turn]) -> PolicyDecision:
        request = ChatRequest(messages=self._prompt(context), max_tokens=1, want_logprobs=True)
        response = self.backend.complete(request)
        if response.token_logprobs:
            first = response.token_logprobs[0].token.strip()
        else:
            first = response.text.strip().split()[0] if response.text.strip() else ""
        decision = Label.SILENT if first == self.silent_token else Label.SPEAK
        return PolicyDecision(decision=decision, first_token=first)

    def generate(self, context: Sequence[Turn]) -> str:
        request = ChatRequest(messages=self._prompt(context), max_tokens=self.max_tokens)
        return _strip_generation(self.backend.complete(request).text)


class DecoupledPolicy:
    """Classifier gates the decision; the generator runs only on SPEAK."""

    def __init__(
        self,
        classifier: ClassifierBackend,
        generator: ChatBackend | None,
        threshold: float = DEFAULT_THRESHOLD,
        max_tokens: int = 256,
    ):
        if not 0.0 < threshold < 1.0:
            raise InvalidPolicyConfigError(f"threshold must be in (0, 1), got {threshold}")
        self.classifier = classifier
        self.generator = generator
        self.threshold = threshold
        self.max_tokens = max_tokens

    def decide(self, context: Sequence[Turn]) -> PolicyDecision:
        p = self.classifier.score(render_context(context))
        decision = Label.SPEAK if p >= self.threshold else Label.SILENT
        return PolicyDecision(decision=decision, probability=p)

    def generate(self, context: Sequence[Turn]) -> str:
        if self.generator is None:
            raise BackendError("no generator backend configured")
        request = ChatRequest(
            messages=[
                ChatMessage(
                    "system",
                    f"You are {AI_SPEAKER}, joining a live group discussion with one "
                    "brief, value-adding intervention. Reply with the intervention only.",
                ),
                ChatMessage("user", render_context(context)),
            ],
            max_tokens=self.max_tokens,
        )
        return _strip_generation(self.generator.complete(request).text)


POLICY_KINDS = ("end_to_end", "decoupled")


def validate_policy_config(config: dict) -> dict:
    """Check and normalize a session policy config; raises InvalidPolicyConfigError."""
    if not isinstance(config, dict):
        raise InvalidPolicyConfigError("policy config must be an object")
    kind = config.get("policy")
    if kind not in POLICY_KINDS:
        raise InvalidPolicyConfigError(f"policy must be one of {POLICY_KINDS}, got {kind!r}")
    normalized = {"policy": kind}
    if kind == "decoupled":
        threshold = config.get("threshold", DEFAULT_THRESHOLD)
        if not isinstance(threshold, (int, float)) or not 0.0 < float(threshold) < 1.0:
            raise InvalidPolicyConfigError(f"threshold must be in (0, 1), got {threshold!r}")
        normalized["threshold"] = float(threshold)
        for key in ("classifier_url", "backend_url"):
            if config.get(key):
                normalized[key] = config[key]
    else:
        if config.get("backend_url"):
            normalized["backend_url"] = config["backend_url"]
    return normalized


def build_policy(config: dict) -> DecisionPolicy:
    """Construct the live policy for a validated config; env vars fill URL gaps."""
    config = validate_policy_config(config)
    try:
        if config["policy"] == "end_to_end":
            return EndToEndPolicy(HttpChatBackend(base_url=config.get("backend_url")))
        return DecoupledPolicy(
            classifier=HttpClassifier(url=config.get("classifier_url")),
            generator=HttpChatBackend(base_url=config.get("backend_url")),
            threshold=config.get("threshold", DEFAULT_THRESHOLD),
        )
    except BackendError as exc:
        raise InvalidPolicyConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Events and session state
# ---------------------------------------------------------------------------

EVENT_KINDS = (
    "SessionCreated",
    "TurnAdded",
    "DecisionMade",
    "InterventionStarted",
    "InterventionCompleted",
    "PolicyUpdated",
    "SessionClosed",
)


@dataclass(frozen=True)
class SessionEvent:
    seq: int
    kind: str
    payload: dict
    ts: float

    def to_dict(self) -> dict:
        return {"seq": self.seq, "kind": self.kind, "payload": self.payload, "ts": self.ts}

    @classmethod
    def from_dict(cls, obj: dict) -> "SessionEvent":
        return cls(seq=int(obj["seq"]), kind=obj["kind"], payload=obj["payload"], ts=float(obj["ts"]))


@dataclass
class DecisionRecord:
    turn_index: int
    decision: Label
    probability: float | None
    latency_ms: float
    first_token: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        out: dict = {
            "turn_index": self.turn_index,
            "decision": self.decision.value,
            "latency_ms": round(self.latency_ms, 4),
        }
        if self.probability is not None:
            out["probability"] = self.probability
        if self.first_token is not None:
            out["first_token"] = self.first_token
        if self.error is not None:
            out["error"] = self.error
        return out


@dataclass
class SessionState:
    session_id: str
    status: str  # Open | Closed
    policy_config: dict
    participants: list[str]
    turns: list[Turn]
    decision_log: list[DecisionRecord]

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "status": self.status,
            "policy_config": dict(self.policy_config),
            "participants": list(self.participants),
            "turns": [
                {"speaker": t.speaker, "role": t.role.value, "text": t.text} for t in self.turns
            ],
            "decision_log": [r.to_dict() for r in self.decision_log],
        }


class _Session:
    def __init__(self, session_id: str, config: dict, policy: DecisionPolicy | None, log_path: Path | None):
        self.id = session_id
        self.config = config
        self.policy = policy
        self.status = "Open"
        self.turns: list[Turn] = []
        self.participants: list[str] = []
        self.decision_log: list[DecisionRecord] = []
        self.events: list[SessionEvent] = []
        self.lock = threading.RLock()
        self.changed = threading.Condition(self.lock)
        self.log_path = log_path
        self._log_fh = None

    def append_event(self, kind: str, payload: dict) -> SessionEvent:
        """Apply + persist an event. Caller holds the lock."""
        event = SessionEvent(seq=len(self.events), kind=kind, payload=payload, ts=time.time())
        self._apply(event)
        if self.log_path is not None:
            if self._log_fh is None:
                self._log_fh = open(self.log_path, "a", encoding="utf-8")
            self._log_fh.write(json.dumps(event.to_dict(), ensure_ascii=False) + "\n")
            self._log_fh.flush()
        self.changed.notify_all()
        return event

    def _apply(self, event: SessionEvent) -> None:
        self.events.append(event)
        payload = event.payload
        if event.kind == "SessionCreated":
            self.config = payload["policy_config"]
        elif event.kind == "TurnAdded":
            turn = Turn(payload["speaker"], Role(payload["role"]), payload["text"])
            self.turns.append(turn)
            if turn.role == Role.HUMAN and turn.speaker not in self.participants:
                self.participants.append(turn.speaker)
        elif event.kind == "DecisionMade":
            self.decision_log.append(
                DecisionRecord(
                    turn_index=payload["turn_index"],
                    decision=Label(payload["decision"]),
                    probability=payload.get("probability"),
                    latency_ms=payload.get("latency_ms", 0.0),
                    first_token=payload.get("first_token"),
                    error=payload.get("error"),
                )
            )
        elif event.kind == "PolicyUpdated":
            self.config = {**self.config, **payload}
        elif event.kind == "SessionClosed":
            self.status = "Closed"
        # InterventionStarted / InterventionCompleted carry no state beyond the log

    def state(self) -> SessionState:
        return SessionState(
            session_id=self.id,
            status=self.status,
            policy_config=dict(self.config),
            participants=list(self.participants),
            turns=list(self.turns),
            decision_log=list(self.decision_log),
        )

    def close_file(self) -> None:
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None


class SessionStore:
    """All live sessions; persisted ones reload lazily from their event logs."""

    def __init__(
        self,
        data_dir: str | Path | None = None,
        policy_factory: Callable[[dict], DecisionPolicy] = build_policy,
        clock: Callable[[], float] = time.perf_counter,
    ):
        self.data_dir = Path(data_dir) if data_dir is not None else None
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)
        self.policy_factory = policy_factory
        self.clock = clock
        self._sessions: dict[str, _Session] = {}
        self._lock = threading.Lock()

    # -- lifecycle ----------------------------------------------------------

    def create_session(self, policy_config: dict, policy: DecisionPolicy | None = None) -> str:
        """New open session. An explicitly injected policy skips URL resolution
        (tests, benches); otherwise the policy is built from the config."""
        config = validate_policy_config(policy_config)
        if policy is None:
            policy = self.policy_factory(config)
        session_id = uuid.uuid4().hex[:12]
        log_path = self.data_dir / f"{session_id}.ndjson" if self.data_dir else None
        session = _Session(session_id, config, policy, log_path)
        with self._lock:
            self._sessions[session_id] = session
        with session.lock:
            session.append_event("SessionCreated", {"policy_config": config})
        return session_id

    def _get(self, session_id: str) -> _Session:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            session = self._load(session_id)
        if session is None:
            raise UnknownSessionError(session_id)
        return session

    def _load(self, session_id: str) -> _Session | None:
        if self.data_dir is None:
            return None
        log_path = self.data_dir / f"{session_id}.ndjson"
        if not log_path.exists():
            return None
        session = _Session(session_id, {}, None, log_path)
        lines = log_path.read_text(encoding="utf-8").splitlines()
        expected = 0
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                event = SessionEvent.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                if lineno == len(lines):
                    break  # torn final line from a hard kill; drop it
                raise CorruptLogError(f"{log_path}:{lineno}: {exc}") from exc
            if event.seq != expected:
                raise CorruptLogError(f"{log_path}: gap at seq {expected}, found {event.seq}")
            expected += 1
            session._apply(event)
        with self._lock:
            existing = self._sessions.get(session_id)
            if existing is not None:
                return existing
            self._sessions[session_id] = session
        return session

    def list_sessions(self) -> list[str]:
        ids = set(self._sessions)
        if self.data_dir is not None:
            ids.update(p.stem for p in self.data_dir.glob("*.ndjson"))
        return sorted(ids)

    def close(self) -> None:
        with self._lock:
            for session in self._sessions.values():
                session.close_file()

    # -- turn ingestion -----------------------------------------------------

    def post_turn(self, session_id: str, speaker: str, text: str) -> tuple[int, DecisionRecord]:
        """Append a human turn, run the policy, maybe append the intervention.

        One DecisionMade per human turn, always: a policy failure records a
        SILENT decision with the error attached instead of blocking the room.
        """
        session = self._get(session_id)
        speaker = speaker.strip()
        if not speaker or not text.strip():
            raise ValueError("speaker and text must be non-empty")
        if ":" in speaker:
            raise ValueError("speaker names cannot contain ':'")
        if speaker == AI_SPEAKER:
            raise ReservedSpeakerNameError(f"{AI_SPEAKER!r} is reserved for the policy")

        with session.lock:
            if session.status != "Open":
                raise SessionClosedError(session_id)
            turn_index = len(session.turns)
            session.append_event(
                "TurnAdded",
                {"turn_index": turn_index, "speaker": speaker, "role": Role.HUMAN.value, "text": text},
            )

            context = tuple(session.turns)
            t0 = self.clock()
            error: str | None = None
            try:
                policy = self._ensure_policy(session)
                outcome = policy.decide(context)
            except Exception as exc:  # noqa: BLE001 - the room must not block on a backend
                policy = session.policy
                outcome = PolicyDecision(decision=Label.SILENT)
                error = str(exc)
            latency_ms = (self.clock() - t0) * 1000.0

            record = DecisionRecord(
                turn_index=turn_index,
                decision=outcome.decision,
                probability=outcome.probability,
                latency_ms=latency_ms,
                first_token=outcome.first_token,
                error=error,
            )
            session.append_event("DecisionMade", record.to_dict())

            if record.decision == Label.SPEAK and error is None:
                assert policy is not None
                session.append_event("InterventionStarted", {"trigger_turn_index": turn_index})
                g0 = self.clock()
                try:
                    intervention = policy.generate(context)
                except Exception as exc:  # noqa: BLE001
                    session.append_event(
                        "InterventionCompleted",
                        {"trigger_turn_index": turn_index, "error": str(exc)},
                    )
                else:
                    generation_ms = (self.clock() - g0) * 1000.0
                    ai_index = len(session.turns)
                    session.append_event(
                        "TurnAdded",
                        {
                            "turn_index": ai_index,
                            "speaker": AI_SPEAKER,
                            "role": Role.AI.value,
                            "text": intervention,
                        },
                    )
                    session.append_event(
                        "InterventionCompleted",
                        {
                            "trigger_turn_index": turn_index,
                            "turn_index": ai_index,
                            "text": intervention,
                            "generation_ms": round(generation_ms, 4),
                        },
                    )
            return turn_index, record

    def _ensure_policy(self, session: _Session) -> DecisionPolicy:
        if session.policy is None:
            session.policy = self.policy_factory(session.config)
        return session.policy

    # -- reads --------------------------------------------------------------

    def get_state(self, session_id: str) -> SessionState:
        session = self._get(session_id)
        with session.lock:
            return session.state()

    def update_policy(self, session_id: str, threshold: float) -> dict:
        """Live threshold change; only meaningful for the decoupled policy."""
        session = self._get(session_id)
        with session.lock:
            if session.status != "Open":
                raise SessionClosedError(session_id)
            if session.config.get("policy") != "decoupled":
                raise InvalidPolicyConfigError("only the decoupled policy has a threshold")
            if not isinstance(threshold, (int, float)) or not 0.0 < float(threshold) < 1.0:
                raise InvalidPolicyConfigError(f"threshold must be in (0, 1), got {threshold!r}")
            session.append_event("PolicyUpdated", {"threshold": float(threshold)})
            if isinstance(session.policy, DecoupledPolicy):
                session.policy.threshold = float(threshold)
            return dict(session.config)

    def close_session(self, session_id: str) -> None:
        session = self._get(session_id)
        with session.lock:
            if session.status == "Open":
                session.append_event("SessionClosed", {})
            session.close_file()

    def events_since(self, session_id: str, from_sequence: int = 0) -> list[SessionEvent]:
        session = self._get(session_id)
        with session.lock:
            return list(session.events[from_sequence:])

    def stream_events(
        self,
        session_id: str,
        from_sequence: int = 0,
        follow: bool = True,
        poll_timeout_s: float = 0.25,
        stop: Callable[[], bool] | None = None,
    ) -> Iterator[SessionEvent | None]:
        """Backlog then live tail, gap-free and duplicate-free.

        Events are yielded outside the session lock so slow consumers never
        stall turn ingestion. In follow mode the iterator yields None on poll
        timeouts for keep-alive checks; it ends once the session closes or
        ``stop`` returns true.
        """
        session = self._get(session_id)
        cursor = from_sequence
        while True:
            with session.lock:
                batch = list(session.events[cursor:])
                cursor += len(batch)
                if not batch:
                    if not follow or session.status != "Open":
                        return
                    session.changed.wait(timeout=poll_timeout_s)
            for event in batch:
                yield event
                if event.kind == "SessionClosed":
                    return
            if not batch:
                if stop is not None and stop():
                    return
                yield None  # keep-alive opportunity

    def export_session(self, session_id: str) -> tuple[str, ValidationReport]:
        """Canonical transcript text plus the validation report for it.

        Sessions that are not (yet) canonical discussions still export; the
        report carries the warnings (no intervention, multiple interventions,
        empty session, ...).
        """
        state = self.get_state(session_id)
        text = format_transcript(Discussion(turns=state.turns))
        return text, validate_text(text)


# ---------------------------------------------------------------------------
# Latency bench
# ---------------------------------------------------------------------------


@dataclass
class BenchReport:
    policy_name: str
    n_turns: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    methodology: str
    samples_ms: list[float] = field(default_factory=list)

    def render(self) -> str:
        lines = [
            f"# policy latency bench: {self.policy_name}",
            self.methodology,
            "",
            f"turns measured: {self.n_turns}",
            f"mean ms/turn:   {self.mean_ms:.3f}",
            f"p50 ms/turn:    {self.p50_ms:.3f}",
            f"p95 ms/turn:    {self.p95_ms:.3f}",
        ]
        return "\n".join(lines) + "\n"


BENCH_METHODOLOGY = (
    "methodology: wall time around turn ingestion (session append + policy "
    "decision) per human turn, replayed from transcripts in arrival order; "
    "generation time on SPEAK turns is excluded from per-turn decision "
    "figures and reported by the session log separately. Single process, no "
    "warm-up discarded, monotonic clock."
)


def bench_policy(
    policy: DecisionPolicy,
    replay_set: Iterable[Discussion],
    clock: Callable[[], float] = time.perf_counter,
    policy_name: str = "policy",
) -> BenchReport:
    """Replay transcripts' human turns through post_turn, timing each one."""
    replay = list(replay_set)
    if not replay:
        raise ValueError("replay set is empty")
    store = SessionStore(data_dir=None, clock=clock)
    samples: list[float] = []
    for discussion in replay:
        session_id = store.create_session({"policy": "decoupled", "threshold": DEFAULT_THRESHOLD}, policy=policy)
        for turn in discussion.turns:
            if turn.role != Role.HUMAN:
                continue
            t0 = clock()
            _, record = store.post_turn(session_id, turn.speaker, turn.text)
            total_ms = (clock() - t0) * 1000.0
            # measure the decision path, not the optional generation that follows
            samples.append(total_ms if record.decision == Label.SILENT else record.latency_ms)
        store.close_session(session_id)

    stats = latency_stats(samples)
    return BenchReport(
        policy_name=policy_name,
        n_turns=len(samples),
        mean_ms=stats.mean_ms,
        p50_ms=stats.p50_ms,
        p95_ms=stats.p95_ms,
        methodology=BENCH_METHODOLOGY,
        samples_ms=samples,
    )
