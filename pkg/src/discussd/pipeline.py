"""Two-stage generation: seed records -> scenarios -> validated discussions.

Stage 1 asks the backend to invent a one-sentence social context and pick an
intervention type for a topic. Stage 2 turns that scenario into a full tagged
transcript, which is normalized, parsed, and validated before acceptance;
failures retry with fresh sampling up to a budget.
"""

from __future__ import annotations

import json
import logging
import os
import random
import re
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from discussd.backends import BackendError, ChatBackend, ChatMessage, ChatRequest
from discussd.corpus import FilterConfig, SourceRecord, dedup_stream, filter_record, read_records
from discussd.transcript import (
    Discussion,
    InterventionType,
    TranscriptError,
    UnknownInterventionTypeError,
    ValidationReport,
    Violation,
    normalize_headers,
    parse_transcript,
    serialize_transcript,
    validate,
)

logger = logging.getLogger(__name__)

MIN_HUMAN_COUNT = 2
MAX_HUMAN_COUNT = 6

SCENARIO_TEMPLATE = """\
You are a creative scenario writer. Your task is to generate a single, detailed scenario JSON object based on a user's question and its detailed background.

Input Information:
- Topic (User's Question): {topic}
- Background Info (User's description): {background_info}

Task: Based on the provided information, create a complete scenario by performing these steps:
1. Invent a Social Context: Create a one-sentence context describing who would be discussing this topic.
2. Select an Intervention Type: Choose the most logical ai_intervention_type from: [Factual Correction, Concept Definition, Data Provision, Source Identification, Synthesis & Reframing].

Output Format: You must output ONLY the raw JSON object.
"""

DISCUSSION_TEMPLATE = """\
You are a sophisticated data generator. Your task is to generate a realistic group discussion transcript based on the provided scenario.

Rules:
1. The discussion must feature {human_count} human participants and one AI assistant named **Nexus**.
2. Nexus appears only once, with its dialogue enclosed by [AI_APPEARED] and [/AI_DISAPPEARED] on new lines.
3. The discussion should feel natural, with a clear trigger for Nexus's intervention.
4. After Nexus speaks, humans should react naturally and continue the discussion.

Scenario Details:
- Topic: {topic}
- Context: {context}
- AI Intervention Type: {ai_intervention_type}

Output Format Example:
[SCENARIO_SETUP]
...
[/SCENARIO_SETUP]
[DISCUSSION_START]
Name: Dialogue text...
Name: Dialogue text that creates the trigger...
[AI_APPEARED]
Nexus: The brief, value-add intervention.
[/AI_DISAPPEARED]
Name: Reaction to the AI's input...
[/DISCUSSION_END]
"""

_PLACEHOLDER_RE = re.compile(r"\{(topic|background_info|context|ai_intervention_type|human_count)\}")


def _render(template: str, values: dict[str, str]) -> str:
    """Single-pass placeholder substitution; substituted values are never re-scanned."""
    return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], template)


class InvalidSeedError(ValueError):
    pass


class HumanCountOutOfRangeError(ValueError):
    pass


class NoObjectFoundError(ValueError):
    pass


class MissingFieldError(ValueError):
    def __init__(self, name: str):
        super().__init__(f"scenario object missing field {name!r}")
        self.name = name


class ExhaustedRetriesError(Exception):
    """All attempts failed; carries the last validation report when stage 2 failed."""

    def __init__(self, attempts: int, report: ValidationReport | None = None, detail: str | None = None):
        if report is not None and report.violations:
            detail = ", ".join(v.code.value for v in report.violations)
        super().__init__(f"no valid output after {attempts} attempts (last: {detail or 'unknown'})")
        self.report = report
        self.attempts = attempts
        self.detail = detail


@dataclass(frozen=True)
class Scenario:
    topic: str
    context: str
    intervention_type: InterventionType
    source_id: str

    def __post_init__(self):
        if not self.topic.strip() or not self.context.strip():
            raise ValueError("scenario topic and context must be non-empty")

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "topic": self.topic,
            "context": self.context,
            "ai_intervention_type": self.intervention_type.label,
        }


_SENTENCE_END_RE = re.compile(r"[.!?](?=\s|$)")


def context_sentence_count(context: str) -> int:
    return max(1, len(_SENTENCE_END_RE.findall(context.strip())))


# ---------------------------------------------------------------------------
# Prompt rendering + extraction
# ---------------------------------------------------------------------------


def render_stage1_prompt(record: SourceRecord) -> str:
    if not record.title.strip() or not record.content.strip():
        raise InvalidSeedError(f"record {record.id}: empty title or content")
    return _render(SCENARIO_TEMPLATE, {"topic": record.title, "background_info": record.content})


def render_stage2_prompt(scenario: Scenario, human_count: int) -> str:
    if not MIN_HUMAN_COUNT <= human_count <= MAX_HUMAN_COUNT:
        raise HumanCountOutOfRangeError(
            f"human_count must be in [{MIN_HUMAN_COUNT}, {MAX_HUMAN_COUNT}], got {human_count}"
        )
    return _render(
        DISCUSSION_TEMPLATE,
        {
            "human_count": str(human_count),
            "topic": scenario.topic,
            "context": scenario.context,
            "ai_intervention_type": scenario.intervention_type.label,
        },
    )


def _find_json_object(text: str) -> str:
    """First balanced top-level {...} in the text, tolerating fences and prose."""
    depth = 0
    start = None
    in_string = False
    escaped = False
    for i, ch in enumerate(text):
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}":
            if depth > 0:
                depth -= 1
                if depth == 0:
                    assert start is not None
                    return text[start : i + 1]
    raise NoObjectFoundError("no balanced JSON object in completion")


def extract_scenario(completion: str, source_id: str) -> Scenario:
    """Pull the scenario object out of a stage-1 completion."""
    snippet = _find_json_object(completion)
    try:
        obj = json.loads(snippet)
    except json.JSONDecodeError as exc:
        raise NoObjectFoundError(f"object candidate is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise NoObjectFoundError("top-level JSON value is not an object")
    for name in ("topic", "context", "ai_intervention_type"):
        if name not in obj or not isinstance(obj[name], str) or not obj[name].strip():
            raise MissingFieldError(name)
    kind = InterventionType.parse(obj["ai_intervention_type"])
    scenario = Scenario(
        topic=obj["topic"].strip(),
        context=obj["context"].strip(),
        intervention_type=kind,
        source_id=source_id,
    )
    if context_sentence_count(scenario.context) > 1:
        # the prompt asks for one sentence; warn but keep (rejection would bias the corpus)
        logger.warning("scenario %s: context has multiple sentences", source_id)
    return scenario


# ---------------------------------------------------------------------------
# Generation with retries
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    seed: int = 0
    max_retries: int = 2
    temperature: float = 0.8
    stage1_max_tokens: int = 400
    stage2_max_tokens: int = 1500
    workers: int = 1
    filter: FilterConfig = field(default_factory=FilterConfig)

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


def _record_rng(cfg: PipelineConfig, source_id: str) -> random.Random:
    return random.Random(f"{cfg.seed}:{source_id}")


def generate_scenario(
    record: SourceRecord, backend: ChatBackend, cfg: PipelineConfig
) -> tuple[Scenario, int]:
    """Stage 1 with retries. Returns (scenario, retries_used)."""
    prompt = render_stage1_prompt(record)
    rng = _record_rng(cfg, record.id)
    last_error: Exception | None = None
    for attempt in range(cfg.max_retries + 1):
        request = ChatRequest(
            messages=[ChatMessage("user", prompt)],
            temperature=cfg.temperature,
            max_tokens=cfg.stage1_max_tokens,
            seed=rng.randrange(2**31),
        )
        response = backend.complete(request)
        try:
            return extract_scenario(response.text, record.id), attempt
        except (NoObjectFoundError, MissingFieldError, UnknownInterventionTypeError, ValueError) as exc:
            last_error = exc
            logger.debug("stage1 attempt %d for %s failed: %s", attempt + 1, record.id, exc)
    raise ExhaustedRetriesError(cfg.max_retries + 1, detail=f"stage1: {last_error}")


def generate_discussion(
    scenario: Scenario, backend: ChatBackend, cfg: PipelineConfig
) -> tuple[Discussion, int]:
    """Stage 2 with validation-driven retries. Returns (discussion, retries_used).

    Each attempt samples the participant count uniformly from [2, 6] with a
    per-scenario seeded stream, so retries re-roll the structure.
    """
    rng = _record_rng(cfg, f"stage2:{scenario.source_id}")
    last_report = ValidationReport()
    for attempt in range(cfg.max_retries + 1):
        human_count = rng.randint(MIN_HUMAN_COUNT, MAX_HUMAN_COUNT)
        prompt = render_stage2_prompt(scenario, human_count)
        request = ChatRequest(
            messages=[ChatMessage("user", prompt)],
            temperature=cfg.temperature,
            max_tokens=cfg.stage2_max_tokens,
            seed=rng.randrange(2**31),
        )
        response = backend.complete(request)
        normalized = normalize_headers(response.text)
        try:
            discussion = parse_transcript(normalized)
        except TranscriptError as exc:
            last_report = ValidationReport(violations=[Violation(exc.code, exc.message, exc.line)])
            logger.debug("stage2 attempt %d for %s: parse failed (%s)", attempt + 1, scenario.source_id, exc.code.value)
            continue
        report = validate(discussion)
        if report.ok:
            discussion.source_scenario = scenario.source_id
            return discussion, attempt
        last_report = report
        logger.debug(
            "stage2 attempt %d for %s: %s",
            attempt + 1,
            scenario.source_id,
            ", ".join(c.value for c in report.codes()),
        )
    raise ExhaustedRetriesError(cfg.max_retries + 1, report=last_report)


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineStats:
    attempted: int = 0
    succeeded: int = 0
    failed_validation: int = 0
    retries_used: int = 0
    filtered_out: int = 0
    skipped_checkpointed: int = 0
    per_intervention_type_counts: dict[str, int] = field(default_factory=dict)

    def count_type(self, kind: InterventionType) -> None:
        self.per_intervention_type_counts[kind.label] = (
            self.per_intervention_type_counts.get(kind.label, 0) + 1
        )

    def to_dict(self) -> dict:
        return {
            "attempted": self.attempted,
            "succeeded": self.succeeded,
            "failed_validation": self.failed_validation,
            "retries_used": self.retries_used,
            "filtered_out": self.filtered_out,
            "skipped_checkpointed": self.skipped_checkpointed,
            "per_intervention_type_counts": dict(self.per_intervention_type_counts),
        }


def _atomic_write(path: Path, content: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


@dataclass
class _RecordOutcome:
    record_id: str
    status: str  # ok | failed | rejected
    scenario: Scenario | None = None
    transcript: str | None = None
    retries: int = 0


def _process_record(record: SourceRecord, backend: ChatBackend, cfg: PipelineConfig) -> _RecordOutcome:
    if not filter_record(record, cfg.filter).accepted:
        return _RecordOutcome(record.id, "rejected")
    try:
        scenario, retries1 = generate_scenario(record, backend, cfg)
        discussion, retries2 = generate_discussion(scenario, backend, cfg)
    except ExhaustedRetriesError as exc:
        return _RecordOutcome(record.id, "failed", retries=exc.attempts - 1)
    return _RecordOutcome(
        record.id,
        "ok",
        scenario=scenario,
        transcript=serialize_transcript(discussion),
        retries=retries1 + retries2,
    )


def run_pipeline(
    records_file: str | Path,
    out_dir: str | Path,
    backend: ChatBackend,
    cfg: PipelineConfig | None = None,
) -> PipelineStats:
    """Stream records through filter -> stage 1 -> stage 2 -> transcript files.

    Writes one ``<source_id>.txt`` per success, a ``scenarios.ndjson`` index,
    and an append-only ``checkpoint.ndjson``; a rerun over the same out_dir
    skips checkpointed records. Results are committed in input order, so a
    run is deterministic whenever the backend is (the scripted/stub backends
    are), regardless of worker count. Backend transport errors propagate and
    abort the run; the checkpoint preserves completed work.
    """
    cfg = cfg or PipelineConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out / "checkpoint.ndjson"
    index_path = out / "scenarios.ndjson"

    stats = PipelineStats()
    done: dict[str, dict] = {}
    if checkpoint_path.exists():
        for line in checkpoint_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                entry = json.loads(line)
                done[entry["id"]] = entry

    records = [r for r in dedup_stream(read_records(records_file))]

    todo: list[SourceRecord] = []
    for record in records:
        past = done.get(record.id)
        if past is None:
            todo.append(record)
            continue
        stats.skipped_checkpointed += 1
        _fold_checkpoint_entry(stats, past)

    with open(checkpoint_path, "a", encoding="utf-8") as ckpt, open(
        index_path, "a", encoding="utf-8"
    ) as index:
        if cfg.workers == 1:
            outcomes = (_process_record(r, backend, cfg) for r in todo)
            for outcome in outcomes:
                _commit_outcome(outcome, out, ckpt, index, stats)
        else:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                futures = [pool.submit(_process_record, r, backend, cfg) for r in todo]
                for future in futures:  # submission order == input order
                    _commit_outcome(future.result(), out, ckpt, index, stats)
    return stats


def _fold_checkpoint_entry(stats: PipelineStats, entry: dict) -> None:
    status = entry.get("status")
    if status == "rejected":
        stats.filtered_out += 1
        return
    stats.attempted += 1
    stats.retries_used += int(entry.get("retries", 0))
    if status == "ok":
        stats.succeeded += 1
        kind = entry.get("intervention_type")
        if kind:
            stats.count_type(InterventionType.parse(kind))
    else:
        stats.failed_validation += 1


def _commit_outcome(outcome: _RecordOutcome, out: Path, ckpt, index, stats: PipelineStats) -> None:
    entry: dict = {"id": outcome.record_id, "status": outcome.status, "retries": outcome.retries}
    if outcome.status == "rejected":
        stats.filtered_out += 1
    else:
        stats.attempted += 1
        stats.retries_used += outcome.retries
        if outcome.status == "ok":
            assert outcome.scenario is not None and outcome.transcript is not None
            _atomic_write(out / f"{outcome.record_id}.txt", outcome.transcript)
            index.write(json.dumps(outcome.scenario.to_dict(), ensure_ascii=False) + "\n")
            index.flush()
            stats.succeeded += 1
            stats.count_type(outcome.scenario.intervention_type)
            entry["intervention_type"] = outcome.scenario.intervention_type.label
        else:
            stats.failed_validation += 1
    ckpt.write(json.dumps(entry, ensure_ascii=False) + "\n")
    ckpt.flush()


def load_transcripts(directory: str | Path) -> list[Discussion]:
    """Parse every .txt transcript in a directory, tagging source ids from filenames."""
    out: list[Discussion] = []
    for path in sorted(Path(directory).glob("*.txt")):
        d = parse_transcript(path.read_text(encoding="utf-8"))
        d.source_scenario = path.stem
        out.append(d)
    return out


def scan_output_tree(out_dir: str | Path) -> dict[str, str]:
    """Relative path -> content for every pipeline output file (determinism checks)."""
    base = Path(out_dir)
    tree = {}
    for path in sorted(base.rglob("*")):
        if path.is_file():
            tree[str(path.relative_to(base))] = path.read_text(encoding="utf-8")
    return tree
