from __future__ import annotations

import random
import string
from pathlib import Path

import pytest

from discussd.transcript import Discussion, Role, Turn

DATA_DIR = Path(__file__).parent / "data"

FIRST_NAMES = [
    "John", "Emily", "Mike", "Sarah", "Priya", "Omar", "Lena", "Carlos",
    "Aiko", "Tom", "Nadia", "Sam",
]


@pytest.fixture(scope="session")
def sample_text() -> str:
    return (DATA_DIR / "sample_factual_correction.txt").read_text(encoding="utf-8")


def random_words(rng: random.Random, n_min: int = 3, n_max: int = 12) -> str:
    """Utterance text from a tag-free alphabet; long enough that collisions
    between independently drawn texts are effectively impossible."""
    n = rng.randint(n_min, n_max)
    words = []
    for _ in range(n):
        length = rng.randint(4, 9)
        words.append("".join(rng.choice(string.ascii_lowercase) for _ in range(length)))
    text = " ".join(words)
    tail = rng.choice([".", "?", "!", ""])
    return text + tail


def random_valid_discussion(rng: random.Random) -> Discussion:
    """A structurally valid Discussion: 2-6 distinct humans, one interior AI turn."""
    n_turns = rng.randint(3, 14)
    n_speakers = rng.randint(2, min(6, n_turns - 1))
    names = rng.sample(FIRST_NAMES, n_speakers)
    ai_pos = rng.randint(1, n_turns - 2)

    # every name must appear at least once among the human turns
    human_slots = n_turns - 1
    speakers = names + [rng.choice(names) for _ in range(human_slots - n_speakers)]
    rng.shuffle(speakers)

    turns: list[Turn] = []
    human_i = 0
    for pos in range(n_turns):
        if pos == ai_pos:
            turns.append(Turn("Nexus", Role.AI, random_words(rng, 6, 16)))
        else:
            turns.append(Turn(speakers[human_i], Role.HUMAN, random_words(rng)))
            human_i += 1

    setup = None
    if rng.random() < 0.4:
        setup = f"Topic: {random_words(rng, 2, 6)}\nContext: {random_words(rng, 4, 10)}"
    source = f"rec-{rng.randrange(10**8):08d}" if rng.random() < 0.5 else None
    return Discussion(turns=turns, scenario_setup=setup, source_scenario=source)


@pytest.fixture
def rng() -> random.Random:
    return random.Random(20260808)


def spin_wait(delay_s: float) -> None:
    """Busy-wait for a precise delay; sleep() oversleeps badly under load."""
    import time

    end = time.perf_counter() + delay_s
    while time.perf_counter() < end:
        pass


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    reports = []
    for status in ("passed", "failed", "error"):
        reports.extend(terminalreporter.stats.get(status, []))
    acceptance = sorted(
        (r for r in reports if getattr(r, "when", None) == "call" and "test_acceptance" in r.nodeid),
        key=lambda r: r.nodeid,
    )
    if not acceptance:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for rep in acceptance:
        name = rep.nodeid.split("::")[-1]
        verdict = "PASS" if rep.passed else "FAIL"
        terminalreporter.write_line(f"[{verdict}] {name}")
