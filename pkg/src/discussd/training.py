"""Expand validated discussions into decision examples and loss-ready targets.

Three supervision surfaces come out of every discussion:

- per-boundary SPEAK/SILENT decision examples (classifier training rows),
- a masked token sequence for the end-to-end objective, where the loss mask
  is 1 exactly on intervention tokens and appended silent tokens,
- a (context, response) pair for the response generator.

Loss evaluators here are pure arithmetic over model-provided log
probabilities; no model or optimizer lives in this package.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from discussd.tokenizers import Tokenizer, check_silent_token
from discussd.transcript import (
    AI_SPEAKER,
    Discussion,
    InvariantViolation,
    Role,
    Turn,
    collapse_ws,
    format_transcript,
    validate,
)

DEFAULT_MAX_CONTEXT_CHARS = 4000


class Label(str, Enum):
    SPEAK = "SPEAK"
    SILENT = "SILENT"


class EmptyMaskError(ValueError):
    pass


class TokenizationError(ValueError):
    pass


def discussion_key(d: Discussion) -> str:
    """Stable identifier: the source scenario id when present, else a content hash."""
    if d.source_scenario:
        return d.source_scenario
    digest = hashlib.sha256(format_transcript(d).encode("utf-8")).hexdigest()
    return f"sha-{digest[:12]}"


def render_turn(turn: Turn) -> str:
    return f"{turn.speaker.strip()}: {collapse_ws(turn.text)}"


def render_context(turns: Sequence[Turn], max_chars: int | None = None) -> str:
    """Turns as "Speaker: text" lines. Truncation drops oldest whole turns first
    but always keeps the most recent one."""
    lines = [render_turn(t) for t in turns]
    if max_chars is None:
        return "\n".join(lines)
    kept: list[str] = []
    used = 0
    for line in reversed(lines):
        cost = len(line) + (1 if kept else 0)
        if kept and used + cost > max_chars:
            break
        kept.append(line)
        used += cost
    return "\n".join(reversed(kept))


# ---------------------------------------------------------------------------
# Decision examples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecisionExample:
    """One decision point: the turns before it, and whether to speak there.

    ``turn_index`` is the position the decision slot precedes, so
    ``context == turns[:turn_index]``. For the SPEAK example it equals the
    intervention's index.
    """

    discussion_id: str
    turn_index: int
    context: tuple[Turn, ...]
    label: Label
    response: str | None = None

    def __post_init__(self):
        if (self.label == Label.SPEAK) != bool(self.response):
            raise ValueError("SPEAK examples carry a response, SILENT ones do not")


def expand_turns(d: Discussion, include_post_intervention: bool = True) -> list[DecisionExample]:
    """Emit one example per boundary after a human turn.

    The boundary before the AI turn is the single SPEAK example; human-human
    boundaries are SILENT. Boundaries after the intervention are included
    only when ``include_post_intervention``; no boundary follows the final
    turn.
    """
    report = validate(d)
    if not report.ok:
        raise InvariantViolation(report)
    ai_pos = d.ai_index()
    assert ai_pos is not None
    did = discussion_key(d)

    examples: list[DecisionExample] = []
    for k in range(len(d.turns) - 1):
        if d.turns[k].role != Role.HUMAN:
            continue
        nxt = d.turns[k + 1]
        context = tuple(d.turns[: k + 1])
        if nxt.role == Role.AI:
            examples.append(DecisionExample(did, k + 1, context, Label.SPEAK, nxt.text))
        else:
            if k > ai_pos and not include_post_intervention:
                continue
            examples.append(DecisionExample(did, k + 1, context, Label.SILENT))
    return examples


# ---------------------------------------------------------------------------
# End-to-end masked sequence (the selective-loss objective)
# ---------------------------------------------------------------------------


@dataclass
class MaskedTokenSequence:
    tokens: list[str]
    mask: list[int]
    silent_token_positions: list[int]
    intervention_span: tuple[int, int] | None

    def __post_init__(self):
        if len(self.tokens) != len(self.mask):
            raise ValueError("mask and tokens must have equal length")


SILENT_LINE = ">"


def _render_with_spans(d: Discussion) -> tuple[str, tuple[int, int] | None, list[tuple[int, int]]]:
    """Build the training text plus the char spans of the intervention line
    and each appended silent line."""
    lines: list[str] = []
    silent_spans: list[tuple[int, int]] = []
    ai_span: tuple[int, int] | None = None
    offset = 0
    for k, turn in enumerate(d.turns):
        line = f"{AI_SPEAKER}: {collapse_ws(turn.text)}" if turn.role == Role.AI else render_turn(turn)
        start = offset
        lines.append(line)
        offset += len(line) + 1  # the joining newline
        if turn.role == Role.AI:
            ai_span = (start, start + len(line))
        elif k + 1 < len(d.turns) and d.turns[k + 1].role == Role.HUMAN:
            lines.append(SILENT_LINE)
            silent_spans.append((offset, offset + len(SILENT_LINE)))
            offset += len(SILENT_LINE) + 1
    return "\n".join(lines), ai_span, silent_spans


def render_e2e_text(d: Discussion) -> str:
    """The end-to-end training rendering: one line per turn, with the silent
    marker on its own line after every human turn that another human turn
    follows. The intervention line sits inline where it happened."""
    return _render_with_spans(d)[0]


def build_e2e_mask(d: Discussion, tok: Tokenizer) -> MaskedTokenSequence:
    """Tokenize the training rendering and set the loss mask.

    mask[i] is 1 exactly when token i lies inside the intervention line
    (speaker header included: the model must produce the whole line after
    deciding to speak) or is an appended silent token; 0 everywhere else.
    """
    report = validate(d)
    if not report.ok:
        raise InvariantViolation(report)
    check_silent_token(tok)

    text, ai_span, silent_spans = _render_with_spans(d)
    assert ai_span is not None

    tokens = tok.tokenize(text)
    mask = [0] * len(tokens)
    silent_positions: list[int] = []
    span_start = span_end = None
    silent_iter = iter(silent_spans)
    next_silent = next(silent_iter, None)
    for i, token in enumerate(tokens):
        if ai_span[0] <= token.start and token.end <= ai_span[1]:
            mask[i] = 1
            if span_start is None:
                span_start = i
            span_end = i + 1
        while next_silent is not None and token.start >= next_silent[1]:
            next_silent = next(silent_iter, None)
        if next_silent is not None and next_silent[0] <= token.start and token.end <= next_silent[1]:
            mask[i] = 1
            silent_positions.append(i)
            next_silent = next(silent_iter, None)

    if len(silent_positions) != len(silent_spans):
        raise TokenizationError(
            f"expected {len(silent_spans)} silent tokens, found {len(silent_positions)}"
        )
    if span_start is None:
        raise TokenizationError("intervention produced no tokens")

    return MaskedTokenSequence(
        tokens=[t.text for t in tokens],
        mask=mask,
        silent_token_positions=silent_positions,
        intervention_span=(span_start, span_end),
    )


def eval_e2e_loss(logprobs: Sequence[float], mask: Sequence[int]) -> float:
    """Masked negative log-likelihood: -(sum(m_i * lp_i)) / sum(m_i)."""
    if len(logprobs) != len(mask):
        raise ValueError(f"length mismatch: {len(logprobs)} logprobs vs {len(mask)} mask bits")
    total_mask = sum(mask)
    if total_mask == 0:
        raise EmptyMaskError("mask selects no tokens")
    return -sum(m * lp for m, lp in zip(mask, logprobs)) / total_mask


# ---------------------------------------------------------------------------
# Classifier examples (binary cross-entropy supervision)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassifierExample:
    discussion_id: str
    turn_index: int
    context: str
    label: int  # 1 = SPEAK, 0 = SILENT


def build_classifier_examples(
    discussions: Iterable[Discussion],
    include_post_intervention: bool = True,
    max_context_chars: int | None = DEFAULT_MAX_CONTEXT_CHARS,
) -> list[ClassifierExample]:
    """Flatten decision examples into (context text, binary label) rows.

    Contexts never contain an AI turn (the intervention is the first AI
    utterance), and exactly one label-1 row exists per discussion.
    """
    out: list[ClassifierExample] = []
    for d in discussions:
        for ex in expand_turns(d, include_post_intervention):
            context = render_context(ex.context, max_context_chars)
            out.append(
                ClassifierExample(
                    discussion_id=ex.discussion_id,
                    turn_index=ex.turn_index,
                    context=context,
                    label=1 if ex.label == Label.SPEAK else 0,
                )
            )
    return out


def class_balance(examples: Sequence[ClassifierExample]) -> float:
    """Fraction of SPEAK rows; 0.0 for an empty set."""
    if not examples:
        return 0.0
    return sum(e.label for e in examples) / len(examples)


BCE_EPS = 1e-7


def eval_bce(p: float, y: int, eps: float = BCE_EPS) -> float:
    """Binary cross-entropy for one prediction, with boundary clamping."""
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y!r}")
    p = min(max(p, eps), 1.0 - eps)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


# ---------------------------------------------------------------------------
# Generator pairs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorPair:
    discussion_id: str
    context: tuple[Turn, ...]
    response: str


def build_generator_pairs(discussions: Iterable[Discussion]) -> list[GeneratorPair]:
    """One pair per discussion: everything before the intervention, and its text."""
    pairs: list[GeneratorPair] = []
    for d in discussions:
        report = validate(d)
        if not report.ok:
            raise InvariantViolation(report)
        ai_pos = d.ai_index()
        assert ai_pos is not None
        pairs.append(
            GeneratorPair(
                discussion_id=discussion_key(d),
                context=tuple(d.turns[:ai_pos]),
                response=d.turns[ai_pos].text,
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# Dataset split
# ---------------------------------------------------------------------------


def split_dataset(items: Sequence, ratio: float, seed: int):
    """Deterministic grouped split: shuffle group keys, cut at floor(ratio * n).

    Items carrying a ``discussion_id`` are grouped by it so every example
    from one discussion lands on the same side; bare values group as
    themselves.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")

    def key(item):
        return getattr(item, "discussion_id", item)

    keys: list = []
    seen: set = set()
    for item in items:
        k = key(item)
        if k not in seen:
            seen.add(k)
            keys.append(k)

    rng = random.Random(seed)
    shuffled = list(keys)
    rng.shuffle(shuffled)
    cut = math.floor(ratio * len(shuffled))
    train_keys = set(shuffled[:cut])

    train = [item for item in items if key(item) in train_keys]
    test = [item for item in items if key(item) not in train_keys]
    return train, test


# ---------------------------------------------------------------------------
# Newline-delimited output files
# ---------------------------------------------------------------------------


def write_decisions(path: str | Path, examples: Iterable[DecisionExample]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            row = {
                "discussion_id": ex.discussion_id,
                "turn_index": ex.turn_index,
                "context": render_context(ex.context),
                "label": ex.label.value,
            }
            if ex.response is not None:
                row["response"] = ex.response
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            n += 1
    return n


def write_e2e(path: str | Path, rows: Iterable[tuple[str, MaskedTokenSequence]]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for discussion_id, seq in rows:
            fh.write(
                json.dumps(
                    {"discussion_id": discussion_id, "tokens": seq.tokens, "mask": seq.mask},
                    ensure_ascii=False,
                )
                + "\n"
            )
            n += 1
    return n


def write_pairs(path: str | Path, pairs: Iterable[GeneratorPair]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(
                json.dumps(
                    {
                        "discussion_id": pair.discussion_id,
                        "context": render_context(pair.context),
                        "response": pair.response,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
            n += 1
    return n


def read_decisions(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
