from __future__ import annotations

import random
import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from discussd.transcript import (
    Discussion,
    DuplicateAIBlockError,
    EmptyDiscussionError,
    InterventionType,
    InvariantViolation,
    MalformedSpeakerLineError,
    MissingTagError,
    OrphanLineError,
    Role,
    TranscriptError,
    Turn,
    UnknownInterventionTypeError,
    ViolationCode,
    normalize_headers,
    parse_transcript,
    serialize_transcript,
    validate,
    validate_text,
)

from conftest import random_valid_discussion


# ---------------------------------------------------------------------------
# parse_transcript
# ---------------------------------------------------------------------------


def test_parse_sample_transcript(sample_text):
    d = parse_transcript(sample_text)
    humans = [t for t in d.turns if t.role == Role.HUMAN]
    ais = [t for t in d.turns if t.role == Role.AI]
    assert [t.speaker for t in humans] == ["John", "Emily", "Mike", "Sarah", "John", "Emily"]
    assert len(ais) == 1
    assert d.turns[4].role == Role.AI
    assert d.turns[4].speaker == "Nexus"
    assert d.turns[3].speaker == "Sarah"
    assert d.turns[5].speaker == "John"
    assert d.scenario_setup is not None and "911" in d.scenario_setup


def test_parse_empty_body_is_empty_discussion():
    with pytest.raises(EmptyDiscussionError):
        parse_transcript("[DISCUSSION_START]\n[/DISCUSSION_END]")


def test_parse_two_ai_blocks_is_duplicate():
    raw = (
        "[DISCUSSION_START]\n"
        "A: hi\n"
        "[AI_APPEARED]\nNexus: one\n[/AI_DISAPPEARED]\n"
        "B: ok\n"
        "[AI_APPEARED]\nNexus: two\n[/AI_DISAPPEARED]\n"
        "C: bye\n"
        "[/DISCUSSION_END]\n"
    )
    with pytest.raises(DuplicateAIBlockError):
        parse_transcript(raw)


@pytest.mark.parametrize(
    "raw, tag",
    [
        ("A: hi\n[/DISCUSSION_END]\n", "[DISCUSSION_START]"),
        ("[DISCUSSION_START]\nA: hi\n", "[/DISCUSSION_END]"),
        ("[DISCUSSION_START]\nA: hi\nB: yo\n[/DISCUSSION_END]\n", "[AI_APPEARED]"),
        (
            "[DISCUSSION_START]\nA: hi\n[AI_APPEARED]\nNexus: x\nB: yo\n[/DISCUSSION_END]\n",
            "[/AI_DISAPPEARED]",
        ),
        ("[SCENARIO_SETUP]\nstuff\n[DISCUSSION_START]\nA: hi\n[/DISCUSSION_END]\n", "[/SCENARIO_SETUP]"),
    ],
)
def test_parse_missing_tags(raw, tag):
    with pytest.raises(MissingTagError) as err:
        parse_transcript(raw)
    assert err.value.tag == tag


def test_parse_orphan_line():
    with pytest.raises(OrphanLineError):
        parse_transcript("[DISCUSSION_START]\nno speaker here\n[/DISCUSSION_END]\n")


def test_parse_malformed_speaker_line():
    with pytest.raises(MalformedSpeakerLineError):
        parse_transcript("[DISCUSSION_START]\n: who said this\n[/DISCUSSION_END]\n")


def test_parse_continuation_lines_join_with_space():
    raw = (
        "[DISCUSSION_START]\n"
        "A: first part\n"
        "second part\n"
        "[AI_APPEARED]\nNexus: reply\n[/AI_DISAPPEARED]\n"
        "B: done\n"
        "[/DISCUSSION_END]\n"
    )
    d = parse_transcript(raw)
    assert d.turns[0].text == "first part second part"


def test_parse_multiline_ai_block():
    raw = (
        "[DISCUSSION_START]\n"
        "A: hi\n"
        "[AI_APPEARED]\nNexus: line one\nline two\n[/AI_DISAPPEARED]\n"
        "B: bye\n"
        "[/DISCUSSION_END]\n"
    )
    d = parse_transcript(raw)
    ai = d.turns[1]
    assert ai.role == Role.AI
    assert ai.text == "line one line two"


def test_parse_ai_block_without_speaker_prefix_implies_nexus():
    raw = (
        "[DISCUSSION_START]\n"
        "A: hi\n"
        "[AI_APPEARED]\njust the intervention text\n[/AI_DISAPPEARED]\n"
        "B: bye\n"
        "[/DISCUSSION_END]\n"
    )
    d = parse_transcript(raw)
    assert d.turns[1].speaker == "Nexus"
    assert d.turns[1].text == "just the intervention text"


def test_parse_ignores_preamble_and_postamble():
    raw = (
        "Sure! Here is the transcript you asked for:\n"
        "[DISCUSSION_START]\n"
        "A: hi\n"
        "[AI_APPEARED]\nNexus: x\n[/AI_DISAPPEARED]\n"
        "B: bye\n"
        "[/DISCUSSION_END]\n"
        "Hope that helps!\n"
    )
    d = parse_transcript(raw)
    assert len(d.turns) == 3


def test_parse_colon_inside_text_stays_in_text():
    raw = (
        "[DISCUSSION_START]\n"
        "A: I told him: never again\n"
        "[AI_APPEARED]\nNexus: noted\n[/AI_DISAPPEARED]\n"
        "B: wow\n"
        "[/DISCUSSION_END]\n"
    )
    d = parse_transcript(raw)
    assert d.turns[0].speaker == "A"
    assert d.turns[0].text == "I told him: never again"


# ---------------------------------------------------------------------------
# serialize + round trip
# ---------------------------------------------------------------------------


def test_sample_round_trip(sample_text):
    d = parse_transcript(sample_text)
    assert parse_transcript(serialize_transcript(d)) == d


def test_serialize_minimal_discussion_has_all_tags():
    d = Discussion(
        turns=[
            Turn("A", Role.HUMAN, "hello"),
            Turn("Nexus", Role.AI, "hi there"),
            Turn("B", Role.HUMAN, "bye"),
        ]
    )
    text = serialize_transcript(d)
    lines = text.strip().split("\n")
    assert lines == [
        "[DISCUSSION_START]",
        "A: hello",
        "[AI_APPEARED]",
        "Nexus: hi there",
        "[/AI_DISAPPEARED]",
        "B: bye",
        "[/DISCUSSION_END]",
    ]


def test_serialize_rejects_discussion_without_ai_turn():
    d = Discussion(turns=[Turn("A", Role.HUMAN, "x"), Turn("B", Role.HUMAN, "y"), Turn("A", Role.HUMAN, "z")])
    with pytest.raises(InvariantViolation) as err:
        serialize_transcript(d)
    assert ViolationCode.NO_AI_TURN in err.value.report.codes()


def test_round_trip_survives_newlines_and_colons_in_text():
    d = Discussion(
        turns=[
            Turn("A", Role.HUMAN, "line one\nline two: with colon"),
            Turn("Nexus", Role.AI, "multi\nline  answer"),
            Turn("B", Role.HUMAN, "ok"),
        ]
    )
    assert parse_transcript(serialize_transcript(d)) == d


def test_round_trip_many_random_discussions(rng):
    for _ in range(200):
        d = random_valid_discussion(rng)
        assert parse_transcript(serialize_transcript(d)) == d


# hypothesis-side generation, independent of the rng factory

_names = st.lists(
    st.text(alphabet=string.ascii_letters, min_size=1, max_size=8).filter(lambda s: s != "Nexus"),
    min_size=2,
    max_size=6,
    unique=True,
)
_text = st.text(
    alphabet=string.ascii_letters + string.digits + " ,.?!'-",
    min_size=1,
    max_size=60,
).filter(lambda s: s.strip())


@st.composite
def hypothesis_discussions(draw):
    names = draw(_names)
    extra = draw(st.integers(min_value=0, max_value=5))
    n_humans = len(names) + extra
    speakers = list(names) + [draw(st.sampled_from(names)) for _ in range(extra)]
    ai_pos = draw(st.integers(min_value=1, max_value=n_humans - 1))
    turns = []
    hi = 0
    for pos in range(n_humans + 1):
        if pos == ai_pos:
            turns.append(Turn("Nexus", Role.AI, draw(_text)))
        else:
            turns.append(Turn(speakers[hi], Role.HUMAN, draw(_text)))
            hi += 1
    setup = draw(st.none() | _text)
    return Discussion(turns=turns, scenario_setup=setup)


@settings(max_examples=150)
@given(hypothesis_discussions())
def test_round_trip_property(d):
    assert validate(d).ok
    assert parse_transcript(serialize_transcript(d)) == d


# ---------------------------------------------------------------------------
# normalize_headers
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "line, expected",
    [
        ("  [discussion_start]", "[DISCUSSION_START]"),
        ("[AI APPEARED]", "[AI_APPEARED]"),
        ("[ai-appeared]", "[AI_APPEARED]"),
        ("[/AI_APPEARED]", "[/AI_DISAPPEARED]"),
        ("[AI_DISAPPEARED]", "[/AI_DISAPPEARED]"),
        ("[DISCUSSION_END]", "[/DISCUSSION_END]"),
        ("[/discussion_start]", "[/DISCUSSION_END]"),
        ("[scenario_setup]", "[SCENARIO_SETUP]"),
        ("[SCENARIO_SETUP_END]", "[/SCENARIO_SETUP]"),
    ],
)
def test_normalize_repairs(line, expected):
    assert normalize_headers(line) == expected


def test_normalize_leaves_canonical_text_alone(sample_text):
    assert normalize_headers(sample_text) == sample_text


def test_normalize_strips_markdown_fences():
    raw = "```\n[DISCUSSION_START]\nA: hi\n[ai appeared]\nNexus: x\n[/ai_appeared]\nB: y\n[/DISCUSSION_END]\n```"
    normalized = normalize_headers(raw)
    assert "```" not in normalized
    d = parse_transcript(normalized)
    assert len(d.turns) == 3


def test_normalize_leaves_unknown_bracket_lines():
    assert normalize_headers("[Meeting Notes]") == "[Meeting Notes]"
    assert normalize_headers("A: said [something] odd") == "A: said [something] odd"


@settings(max_examples=200)
@given(st.text(max_size=300))
def test_normalize_idempotent(raw):
    once = normalize_headers(raw)
    assert normalize_headers(once) == once


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def test_validate_sample_is_clean(sample_text):
    assert validate(parse_transcript(sample_text)).ok


def _mk(turn_specs):
    return Discussion(turns=[Turn(s, r, t) for s, r, t in turn_specs])


def test_validate_ai_last():
    d = _mk([("A", Role.HUMAN, "x"), ("B", Role.HUMAN, "y"), ("Nexus", Role.AI, "z")])
    assert ViolationCode.AI_POSITION_LAST in validate(d).codes()


def test_validate_ai_first():
    d = _mk([("Nexus", Role.AI, "z"), ("A", Role.HUMAN, "x"), ("B", Role.HUMAN, "y")])
    assert ViolationCode.AI_POSITION_FIRST in validate(d).codes()


def test_validate_seven_speakers():
    turns = [(f"Human{i}", Role.HUMAN, f"text {i}") for i in range(7)]
    turns.insert(3, ("Nexus", Role.AI, "hi"))
    assert ViolationCode.SPEAKER_COUNT_OUT_OF_RANGE in validate(_mk(turns)).codes()


def test_validate_one_speaker():
    d = _mk([("A", Role.HUMAN, "x"), ("Nexus", Role.AI, "y"), ("A", Role.HUMAN, "z")])
    assert ViolationCode.SPEAKER_COUNT_OUT_OF_RANGE in validate(d).codes()


def test_validate_human_posting_as_nexus():
    d = _mk(
        [
            ("A", Role.HUMAN, "x"),
            ("Nexus", Role.HUMAN, "impostor"),
            ("Nexus", Role.AI, "y"),
            ("B", Role.HUMAN, "z"),
        ]
    )
    assert ViolationCode.RESERVED_SPEAKER_NAME in validate(d).codes()


def test_validate_control_tag_in_text():
    d = _mk(
        [
            ("A", Role.HUMAN, "watch [AI_APPEARED] this"),
            ("Nexus", Role.AI, "y"),
            ("B", Role.HUMAN, "z"),
        ]
    )
    assert ViolationCode.CONTROL_TAG_IN_TEXT in validate(d).codes()


def test_validate_multiple_ai_turns():
    d = _mk(
        [
            ("A", Role.HUMAN, "x"),
            ("Nexus", Role.AI, "one"),
            ("Nexus", Role.AI, "two"),
            ("B", Role.HUMAN, "z"),
        ]
    )
    assert ViolationCode.MULTIPLE_AI_TURNS in validate(d).codes()


def test_validate_text_folds_parse_errors():
    report = validate_text("[DISCUSSION_START]\n[/DISCUSSION_END]")
    assert not report.ok
    assert report.codes() == [ViolationCode.EMPTY_DISCUSSION]


def test_ok_iff_no_violations(rng):
    for _ in range(50):
        report = validate(random_valid_discussion(rng))
        assert report.ok == (not report.violations)
        assert report.ok


# ---------------------------------------------------------------------------
# parser totality (small fuzz; the long-budget run lives in acceptance)
# ---------------------------------------------------------------------------

FRAGMENTS = [
    "[DISCUSSION_START]", "[/DISCUSSION_END]", "[AI_APPEARED]", "[/AI_DISAPPEARED]",
    "[SCENARIO_SETUP]", "[/SCENARIO_SETUP]", "[ai appeared]", "```",
    "John: hello", "Nexus: hi", ":", "::", "a:b", "no colon line", "", " ",
    "éè€", "\U0001f600", "[", "]", "[X]", "\t", "line with [AI_APPEARED] inline",
]


def fuzz_once(rng: random.Random) -> str:
    n = rng.randint(0, 25)
    parts = []
    for _ in range(n):
        if rng.random() < 0.7:
            parts.append(rng.choice(FRAGMENTS))
        else:
            parts.append("".join(chr(rng.randint(32, 0x2FF)) for _ in range(rng.randint(0, 20))))
    return "\n".join(parts)


def test_parse_never_crashes_on_garbage(rng):
    for _ in range(2000):
        raw = fuzz_once(rng)
        try:
            parse_transcript(raw)
        except TranscriptError:
            pass


@settings(max_examples=300)
@given(st.text(max_size=400))
def test_parse_totality_property(raw):
    try:
        parse_transcript(raw)
    except TranscriptError:
        pass


# ---------------------------------------------------------------------------
# InterventionType
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "value, expected",
    [
        ("Factual Correction", InterventionType.FACTUAL_CORRECTION),
        ("factual correction", InterventionType.FACTUAL_CORRECTION),
        ("Concept Definition", InterventionType.CONCEPT_DEFINITION),
        ("Data Provision", InterventionType.DATA_PROVISION),
        ("Source Identification", InterventionType.SOURCE_IDENTIFICATION),
        ("Synthesis & Reframing", InterventionType.SYNTHESIS_REFRAMING),
        ("Synthesis and Reframing", InterventionType.SYNTHESIS_REFRAMING),
        ("synthesis_reframing", InterventionType.SYNTHESIS_REFRAMING),
    ],
)
def test_intervention_type_parse(value, expected):
    assert InterventionType.parse(value) is expected


def test_intervention_type_rejects_unknown():
    with pytest.raises(UnknownInterventionTypeError):
        InterventionType.parse("Debate Moderation")


def test_exactly_five_intervention_types():
    assert len(InterventionType) == 5
