"""Filter and deduplicate raw topic/content seed records into clean pipeline inputs."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

DEFAULT_MIN_TITLE_CHARS = 15
DEFAULT_MIN_CONTENT_CHARS = 50
DEFAULT_URL_PATTERNS = (r"(?i)\bhttps?://", r"(?i)\bwww\.")


class RejectReason(str, Enum):
    TITLE_TOO_SHORT = "TitleTooShort"
    CONTENT_TOO_SHORT = "ContentTooShort"
    TITLE_EQUALS_CONTENT = "TitleEqualsContent"
    CONTAINS_URL = "ContainsURL"
    DUPLICATE = "Duplicate"


@dataclass(frozen=True)
class SourceRecord:
    id: str
    title: str
    content: str


@dataclass
class FilterConfig:
    min_title_chars: int = DEFAULT_MIN_TITLE_CHARS
    min_content_chars: int = DEFAULT_MIN_CONTENT_CHARS
    url_patterns: tuple[str, ...] = DEFAULT_URL_PATTERNS
    case_fold_identity_check: bool = True

    def __post_init__(self):
        if self.min_title_chars < 1 or self.min_content_chars < 1:
            raise ValueError("length minimums must be >= 1")
        self._url_res = [re.compile(p) for p in self.url_patterns]


@dataclass(frozen=True)
class FilterDecision:
    accepted: bool
    reject_reason: RejectReason | None = None

    def __post_init__(self):
        if self.accepted == (self.reject_reason is not None):
            raise ValueError("accepted records have no reject_reason, rejected ones have exactly one")


def normalize_seed_text(text: str) -> str:
    """Case-fold and collapse whitespace; the identity used for dedup and the title==content check."""
    return " ".join(text.split()).casefold()


def filter_record(record: SourceRecord, cfg: FilterConfig | None = None) -> FilterDecision:
    """Apply the acceptance rules in order; the first failing rule names the rejection.

    Order: title length, content length, title==content, URL presence.
    """
    cfg = cfg or FilterConfig()
    if len(record.title.strip()) < cfg.min_title_chars:
        return FilterDecision(False, RejectReason.TITLE_TOO_SHORT)
    if len(record.content.strip()) < cfg.min_content_chars:
        return FilterDecision(False, RejectReason.CONTENT_TOO_SHORT)
    if cfg.case_fold_identity_check:
        identical = normalize_seed_text(record.title) == normalize_seed_text(record.content)
    else:
        identical = record.title == record.content
    if identical:
        return FilterDecision(False, RejectReason.TITLE_EQUALS_CONTENT)
    for pattern in cfg._url_res:
        if pattern.search(record.title) or pattern.search(record.content):
            return FilterDecision(False, RejectReason.CONTAINS_URL)
    return FilterDecision(True)


def dedup_stream(records: Iterable[SourceRecord]) -> Iterator[SourceRecord]:
    """Keep the first record per normalized (title, content) pair; order preserved."""
    seen: set[tuple[str, str]] = set()
    for record in records:
        key = (normalize_seed_text(record.title), normalize_seed_text(record.content))
        if key in seen:
            continue
        seen.add(key)
        yield record


# ---------------------------------------------------------------------------
# Newline-delimited record files
# ---------------------------------------------------------------------------


def read_records(path: str | Path) -> Iterator[SourceRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            try:
                yield SourceRecord(id=str(obj["id"]), title=obj["title"], content=obj["content"])
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: record missing field {exc}") from None


def write_records(path: str | Path, records: Iterable[SourceRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.id, "title": r.title, "content": r.content}, ensure_ascii=False) + "\n")
            n += 1
    return n


@dataclass
class FilterStats:
    read: int = 0
    accepted: int = 0
    rejected: int = 0
    duplicates: int = 0
    by_reason: dict[str, int] = field(default_factory=dict)


def filter_file(
    in_path: str | Path,
    out_path: str | Path,
    rejects_path: str | Path | None = None,
    cfg: FilterConfig | None = None,
) -> FilterStats:
    """Stream a records file through dedup + filter, writing accepts and rejects."""
    cfg = cfg or FilterConfig()
    stats = FilterStats()
    seen: set[tuple[str, str]] = set()
    rejects_fh = open(rejects_path, "w", encoding="utf-8") if rejects_path else None

    def reject(record: SourceRecord, reason: RejectReason) -> None:
        stats.rejected += 1
        stats.by_reason[reason.value] = stats.by_reason.get(reason.value, 0) + 1
        if rejects_fh:
            rejects_fh.write(
                json.dumps(
                    {"id": record.id, "title": record.title, "content": record.content, "reject_reason": reason.value},
                    ensure_ascii=False,
                )
                + "\n"
            )

    try:
        with open(out_path, "w", encoding="utf-8") as out_fh:
            for record in read_records(in_path):
                stats.read += 1
                key = (normalize_seed_text(record.title), normalize_seed_text(record.content))
                if key in seen:
                    stats.duplicates += 1
                    reject(record, RejectReason.DUPLICATE)
                    continue
                seen.add(key)
                decision = filter_record(record, cfg)
                if decision.accepted:
                    stats.accepted += 1
                    out_fh.write(
                        json.dumps({"id": record.id, "title": record.title, "content": record.content}, ensure_ascii=False)
                        + "\n"
                    )
                else:
                    assert decision.reject_reason is not None
                    reject(record, decision.reject_reason)
    finally:
        if rejects_fh:
            rejects_fh.close()
    return stats
