"""Canonical tagged-transcript format: parse, serialize, normalize, validate.

The wire format is a UTF-8 text file with LF line endings:

    [SCENARIO_SETUP]            (optional block, opaque text)
    ...
    [/SCENARIO_SETUP]
    [DISCUSSION_START]
    Name: dialogue text
    Name: dialogue text
    [AI_APPEARED]
    Nexus: the single intervention
    [/AI_DISAPPEARED]
    Name: reaction
    [/DISCUSSION_END]

Each tag sits alone on its own line. A discussion contains exactly one AI
block, the AI speaker is always "Nexus", and the intervention is neither the
first nor the last turn. Speaker lines are "Name: text" with the name taken
up to the first colon; non-tag lines without a colon continue the previous
turn's text (joined with a single space).

Turn/Discussion equality is whitespace-insensitive on utterance text, so
``parse_transcript(serialize_transcript(d)) == d`` holds for every valid
discussion.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

TAG_SCENARIO_OPEN = "[SCENARIO_SETUP]"
TAG_SCENARIO_CLOSE = "[/SCENARIO_SETUP]"
TAG_DISCUSSION_OPEN = "[DISCUSSION_START]"
TAG_DISCUSSION_CLOSE = "[/DISCUSSION_END]"
TAG_AI_OPEN = "[AI_APPEARED]"
TAG_AI_CLOSE = "[/AI_DISAPPEARED]"

CONTROL_TAGS = (
    TAG_SCENARIO_OPEN,
    TAG_SCENARIO_CLOSE,
    TAG_DISCUSSION_OPEN,
    TAG_DISCUSSION_CLOSE,
    TAG_AI_OPEN,
    TAG_AI_CLOSE,
)

AI_SPEAKER = "Nexus"

MIN_HUMAN_SPEAKERS = 2
MAX_HUMAN_SPEAKERS = 6
MIN_TURNS = 3


def collapse_ws(text: str) -> str:
    """Collapse internal whitespace runs to single spaces and strip ends."""
    return " ".join(text.split())


class Role(str, Enum):
    HUMAN = "human"
    AI = "ai"


class InterventionType(Enum):
    """The five intervention categories a scenario can call for."""

    FACTUAL_CORRECTION = "Factual Correction"
    CONCEPT_DEFINITION = "Concept Definition"
    DATA_PROVISION = "Data Provision"
    SOURCE_IDENTIFICATION = "Source Identification"
    SYNTHESIS_REFRAMING = "Synthesis & Reframing"

    @property
    def label(self) -> str:
        return self.value

    @classmethod
    def parse(cls, value: str) -> "InterventionType":
        """Map a free-form type string onto a variant.

        Matching is case- and punctuation-insensitive and treats "&" and
        "and" as equivalent, so "factual correction", "Synthesis and
        Reframing" and "SYNTHESIS_&_REFRAMING" all resolve.
        """
        key = _intervention_key(value)
        try:
            return _INTERVENTION_LOOKUP[key]
        except KeyError:
            raise UnknownInterventionTypeError(value) from None


def _intervention_key(value: str) -> str:
    folded = value.lower().replace("&", " and ")
    folded = re.sub(r"[^a-z]+", "", folded)
    # "and" may or may not appear in generator output ("Synthesis Reframing")
    return folded.replace("and", "")


_INTERVENTION_LOOKUP = {_intervention_key(v.value): v for v in InterventionType}


class ViolationCode(str, Enum):
    """Stable codes for every structural rule a transcript can break."""

    MISSING_TAG = "MissingTag"
    DUPLICATE_AI_BLOCK = "DuplicateAIBlock"
    ORPHAN_LINE = "OrphanLine"
    MALFORMED_SPEAKER_LINE = "MalformedSpeakerLine"
    EMPTY_DISCUSSION = "EmptyDiscussion"
    NO_AI_TURN = "NoAITurn"
    MULTIPLE_AI_TURNS = "MultipleAITurns"
    AI_POSITION_FIRST = "AIPositionFirst"
    AI_POSITION_LAST = "AIPositionLast"
    AI_SPEAKER_MISMATCH = "AISpeakerMismatch"
    RESERVED_SPEAKER_NAME = "ReservedSpeakerName"
    SPEAKER_COUNT_OUT_OF_RANGE = "SpeakerCountOutOfRange"
    TOO_FEW_TURNS = "TooFewTurns"
    EMPTY_SPEAKER = "EmptySpeaker"
    EMPTY_TEXT = "EmptyText"
    SPEAKER_HAS_COLON = "SpeakerHasColon"
    CONTROL_TAG_IN_TEXT = "ControlTagInText"


class TranscriptError(Exception):
    """Base for every typed parse failure. Parsing never raises anything else."""

    code = ViolationCode.MALFORMED_SPEAKER_LINE

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.message = message
        self.line = line


class MissingTagError(TranscriptError):
    code = ViolationCode.MISSING_TAG

    def __init__(self, tag: str, line: int | None = None):
        super().__init__(f"required tag {tag} is missing", line)
        self.tag = tag


class DuplicateAIBlockError(TranscriptError):
    code = ViolationCode.DUPLICATE_AI_BLOCK

    def __init__(self, line: int | None = None):
        super().__init__("more than one [AI_APPEARED] block", line)


class OrphanLineError(TranscriptError):
    code = ViolationCode.ORPHAN_LINE

    def __init__(self, line: int | None = None):
        super().__init__("text with no speaker to attach to", line)


class MalformedSpeakerLineError(TranscriptError):
    code = ViolationCode.MALFORMED_SPEAKER_LINE

    def __init__(self, line: int | None = None):
        super().__init__("speaker line with an empty name", line)


class EmptyDiscussionError(TranscriptError):
    code = ViolationCode.EMPTY_DISCUSSION

    def __init__(self, line: int | None = None):
        super().__init__("discussion body contains no turns", line)


class UnknownInterventionTypeError(ValueError):
    def __init__(self, value: str):
        super().__init__(f"unknown intervention type: {value!r}")
        self.value = value


class InvariantViolation(Exception):
    """Raised when an operation requires a valid Discussion but got one that fails validation."""

    def __init__(self, report: "ValidationReport"):
        codes = ", ".join(v.code.value for v in report.violations)
        super().__init__(f"discussion violates invariants: {codes}")
        self.report = report


@dataclass(frozen=True, eq=False)
class Turn:
    """One utterance. Equality ignores whitespace differences in the text."""

    speaker: str
    role: Role
    text: str

    def _key(self) -> tuple[str, Role, str]:
        return (self.speaker.strip(), self.role, collapse_ws(self.text))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Turn):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self) -> int:
        return hash(self._key())


@dataclass(eq=False)
class Discussion:
    """An ordered multi-party discussion with (when valid) one AI intervention.

    ``source_scenario`` is a provenance reference to the scenario a generated
    discussion came from. The transcript format does not carry it, so it is
    excluded from equality: two discussions are equal when their
    transcript-visible content (turns and scenario setup) matches.
    """

    turns: list[Turn]
    scenario_setup: str | None = None
    source_scenario: str | None = None

    def ai_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.turns) if t.role == Role.AI]

    def ai_index(self) -> int | None:
        """Index of the intervention turn, or None unless there is exactly one."""
        idx = self.ai_indices()
        return idx[0] if len(idx) == 1 else None

    def human_speakers(self) -> list[str]:
        """Distinct human speaker names in order of first appearance."""
        seen: list[str] = []
        for t in self.turns:
            if t.role == Role.HUMAN:
                name = t.speaker.strip()
                if name not in seen:
                    seen.append(name)
        return seen

    def _key(self):
        setup = None if self.scenario_setup is None else collapse_ws(self.scenario_setup)
        return (tuple(self.turns), setup)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Discussion):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self) -> int:
        return hash(self._key())


@dataclass(frozen=True)
class Violation:
    code: ViolationCode
    message: str
    line: int | None = None


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def codes(self) -> list[ViolationCode]:
        return [v.code for v in self.violations]

    def add(self, code: ViolationCode, message: str, line: int | None = None) -> None:
        self.violations.append(Violation(code, message, line))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_PREAMBLE = "preamble"
_SETUP = "setup"
_BODY = "body"
_AI_BLOCK = "ai_block"
_DONE = "done"


def parse_transcript(raw: str) -> Discussion:
    """Parse canonical transcript text into a Discussion.

    Returns a Discussion whose turn order matches line order. Structural
    failures raise typed TranscriptError subclasses; semantic invariants
    (speaker counts, AI position, ...) are checked by ``validate``, not here,
    so a parseable-but-invalid transcript still yields a Discussion.

    Text before the first tag and after [/DISCUSSION_END] is ignored
    (generator preamble/postamble tolerance).
    """
    lines = raw.replace("\r\n", "\n").replace("\r", "\n").split("\n")

    state = _PREAMBLE
    setup_lines: list[str] | None = None
    scenario_setup: str | None = None
    turns: list[Turn] = []
    ai_lines: list[str] = []
    ai_open_line = 0
    ai_seen = False
    saw_discussion_open = False
    # index of the last turn that continuation lines may attach to; the AI
    # turn is tag-bounded so trailing lines never attach to it
    attachable: int | None = None

    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        is_tag = stripped in CONTROL_TAGS

        if state == _PREAMBLE:
            if stripped == TAG_SCENARIO_OPEN:
                setup_lines = []
                state = _SETUP
            elif stripped == TAG_DISCUSSION_OPEN:
                saw_discussion_open = True
                state = _BODY
            elif is_tag:
                # a closing or AI tag before the discussion opens
                raise MissingTagError(TAG_DISCUSSION_OPEN, lineno)
            # anything else is preamble noise
            continue

        if state == _SETUP:
            if stripped == TAG_SCENARIO_CLOSE:
                scenario_setup = "\n".join(setup_lines or [])
                setup_lines = None
                state = _PREAMBLE
            elif stripped in (TAG_DISCUSSION_OPEN, TAG_DISCUSSION_CLOSE, TAG_AI_OPEN, TAG_AI_CLOSE):
                raise MissingTagError(TAG_SCENARIO_CLOSE, lineno)
            else:
                assert setup_lines is not None
                setup_lines.append(line)
            continue

        if state == _BODY:
            if stripped == TAG_AI_OPEN:
                if ai_seen:
                    raise DuplicateAIBlockError(lineno)
                ai_lines = []
                ai_open_line = lineno
                state = _AI_BLOCK
            elif stripped == TAG_DISCUSSION_CLOSE:
                state = _DONE
            elif stripped == TAG_AI_CLOSE:
                raise MissingTagError(TAG_AI_OPEN, lineno)
            elif is_tag or not stripped:
                # stray setup tags and blank lines are ignored
                continue
            elif ":" in stripped:
                speaker, _, rest = stripped.partition(":")
                if not speaker.strip():
                    raise MalformedSpeakerLineError(lineno)
                turns.append(Turn(speaker.strip(), Role.HUMAN, rest.strip()))
                attachable = len(turns) - 1
            else:
                if attachable is None:
                    raise OrphanLineError(lineno)
                prev = turns[attachable]
                turns[attachable] = Turn(prev.speaker, prev.role, f"{prev.text} {stripped}".strip())
            continue

        if state == _AI_BLOCK:
            if stripped == TAG_AI_CLOSE:
                turns.append(_build_ai_turn(ai_lines))
                ai_seen = True
                attachable = None
                state = _BODY
            elif stripped == TAG_AI_OPEN:
                raise DuplicateAIBlockError(lineno)
            elif stripped == TAG_DISCUSSION_CLOSE:
                raise MissingTagError(TAG_AI_CLOSE, lineno)
            elif stripped:
                ai_lines.append(stripped)
            continue

        if state == _DONE:
            break

    if state == _SETUP:
        raise MissingTagError(TAG_SCENARIO_CLOSE)
    if state == _AI_BLOCK:
        raise MissingTagError(TAG_AI_CLOSE, ai_open_line)
    if not saw_discussion_open:
        raise MissingTagError(TAG_DISCUSSION_OPEN)
    if state == _BODY:
        raise MissingTagError(TAG_DISCUSSION_CLOSE)
    if not turns:
        raise EmptyDiscussionError()
    if not ai_seen:
        raise MissingTagError(TAG_AI_OPEN)

    return Discussion(turns=turns, scenario_setup=scenario_setup)


def _build_ai_turn(block_lines: list[str]) -> Turn:
    """The whole AI block is one turn; a leading "Name:" prefix names the speaker."""
    if not block_lines:
        return Turn(AI_SPEAKER, Role.AI, "")
    first = block_lines[0]
    if ":" in first:
        speaker, _, rest = first.partition(":")
        speaker = speaker.strip() or AI_SPEAKER
        parts = [rest.strip(), *block_lines[1:]]
    else:
        speaker = AI_SPEAKER
        parts = block_lines
    return Turn(speaker, Role.AI, " ".join(p for p in parts if p))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def format_transcript(d: Discussion) -> str:
    """Render a Discussion in the canonical format without checking invariants.

    Used by session export, which must be able to emit non-canonical states
    (no intervention yet, multiple interventions) alongside a validation
    report. Prefer ``serialize_transcript`` everywhere else.
    """
    out: list[str] = []
    if d.scenario_setup is not None:
        out.append(TAG_SCENARIO_OPEN)
        if d.scenario_setup:
            out.extend(d.scenario_setup.split("\n"))
        out.append(TAG_SCENARIO_CLOSE)
    out.append(TAG_DISCUSSION_OPEN)
    for turn in d.turns:
        text = collapse_ws(turn.text)
        if turn.role == Role.AI:
            out.append(TAG_AI_OPEN)
            out.append(f"{AI_SPEAKER}: {text}")
            out.append(TAG_AI_CLOSE)
        else:
            out.append(f"{turn.speaker.strip()}: {text}")
    out.append(TAG_DISCUSSION_CLOSE)
    return "\n".join(out) + "\n"


def serialize_transcript(d: Discussion) -> str:
    """Render a valid Discussion; raises InvariantViolation otherwise.

    Round-trip guarantee: ``parse_transcript(serialize_transcript(d)) == d``.
    """
    report = validate(d)
    if not report.ok:
        raise InvariantViolation(report)
    return format_transcript(d)


# ---------------------------------------------------------------------------
# Header normalization
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"^```[\w-]*$")
_TAGLIKE_RE = re.compile(r"^\[\s*(/?)\s*([A-Za-z][A-Za-z0-9 _-]*?)\s*\]$")

# folded variant (slash prefix + upper-snake name) -> canonical tag line
_TAG_REPAIRS = {
    "SCENARIO_SETUP": TAG_SCENARIO_OPEN,
    "/SCENARIO_SETUP": TAG_SCENARIO_CLOSE,
    "SCENARIO_SETUP_END": TAG_SCENARIO_CLOSE,
    "DISCUSSION_START": TAG_DISCUSSION_OPEN,
    "/DISCUSSION_START": TAG_DISCUSSION_CLOSE,
    "DISCUSSION_END": TAG_DISCUSSION_CLOSE,
    "/DISCUSSION_END": TAG_DISCUSSION_CLOSE,
    "AI_APPEARED": TAG_AI_OPEN,
    "/AI_APPEARED": TAG_AI_CLOSE,
    "AI_DISAPPEARED": TAG_AI_CLOSE,
    "/AI_DISAPPEARED": TAG_AI_CLOSE,
}


def normalize_headers(raw: str) -> str:
    """Best-effort repair of tag lines into canonical form. Idempotent.

    Fixes surrounding whitespace, lowercase tag names, space/hyphen
    separators, the symmetric-closing-tag confusion ([/AI_APPEARED] for
    [/AI_DISAPPEARED]), slash-less closers, and strips markdown fence lines.
    Non-tag lines and unrecognized bracketed lines pass through untouched;
    unrepairable text is left for validation to catch.
    """
    out: list[str] = []
    for line in raw.replace("\r\n", "\n").replace("\r", "\n").split("\n"):
        stripped = line.strip()
        if _FENCE_RE.match(stripped):
            continue
        m = _TAGLIKE_RE.match(stripped)
        if m:
            slash, name = m.group(1), m.group(2)
            folded = slash + re.sub(r"[\s\-_]+", "_", name.strip()).upper()
            canonical = _TAG_REPAIRS.get(folded)
            if canonical is not None:
                out.append(canonical)
                continue
        out.append(line)
    return "\n".join(out)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _contains_control_tag(text: str) -> bool:
    return any(tag in text for tag in CONTROL_TAGS)


def validate(d: Discussion) -> ValidationReport:
    """Check every Discussion/Turn invariant; every breach becomes a coded entry."""
    report = ValidationReport()

    if len(d.turns) < MIN_TURNS:
        report.add(
            ViolationCode.TOO_FEW_TURNS,
            f"discussion has {len(d.turns)} turns, minimum is {MIN_TURNS}",
        )

    ai_idx = d.ai_indices()
    if not ai_idx:
        report.add(ViolationCode.NO_AI_TURN, "no AI intervention present")
    elif len(ai_idx) > 1:
        report.add(
            ViolationCode.MULTIPLE_AI_TURNS,
            f"{len(ai_idx)} AI interventions present, exactly one allowed",
        )
    else:
        pos = ai_idx[0]
        if pos == 0:
            report.add(ViolationCode.AI_POSITION_FIRST, "the AI turn is first; a human trigger must precede it")
        if pos == len(d.turns) - 1:
            report.add(ViolationCode.AI_POSITION_LAST, "the AI turn is last; humans must react after it")

    n_speakers = len(d.human_speakers())
    if not MIN_HUMAN_SPEAKERS <= n_speakers <= MAX_HUMAN_SPEAKERS:
        report.add(
            ViolationCode.SPEAKER_COUNT_OUT_OF_RANGE,
            f"{n_speakers} distinct human speakers, expected {MIN_HUMAN_SPEAKERS}-{MAX_HUMAN_SPEAKERS}",
        )

    for i, turn in enumerate(d.turns):
        where = f"turn {i} ({turn.speaker!r})"
        if not turn.speaker.strip():
            report.add(ViolationCode.EMPTY_SPEAKER, f"{where}: empty speaker name")
        if ":" in turn.speaker:
            report.add(ViolationCode.SPEAKER_HAS_COLON, f"{where}: speaker name contains ':'")
        if not collapse_ws(turn.text):
            report.add(ViolationCode.EMPTY_TEXT, f"{where}: empty utterance")
        if _contains_control_tag(turn.text):
            report.add(ViolationCode.CONTROL_TAG_IN_TEXT, f"{where}: utterance embeds a transcript control tag")
        if turn.role == Role.AI and turn.speaker.strip() != AI_SPEAKER:
            report.add(ViolationCode.AI_SPEAKER_MISMATCH, f"{where}: AI turn not spoken by {AI_SPEAKER}")
        if turn.role == Role.HUMAN and turn.speaker.strip() == AI_SPEAKER:
            report.add(ViolationCode.RESERVED_SPEAKER_NAME, f"{where}: humans cannot post as {AI_SPEAKER}")

    if d.scenario_setup and _contains_control_tag(d.scenario_setup):
        report.add(ViolationCode.CONTROL_TAG_IN_TEXT, "scenario setup embeds a transcript control tag")

    return report


def validate_text(raw: str) -> ValidationReport:
    """Parse then validate, folding parse failures into the report.

    Tag presence is checked indirectly through parse success, so this is the
    one-call structural check for raw generator output.
    """
    try:
        d = parse_transcript(raw)
    except TranscriptError as exc:
        report = ValidationReport()
        report.add(exc.code, exc.message, exc.line)
        return report
    return validate(d)
