"""Metric suite: interruption accuracy, response perplexity, latency stats, reports.

Interruption accuracy covers only ground-truth-silent turns: the share where
the system correctly stayed quiet. Recall on SPEAK turns is reported as an
extra, clearly flagged as a supplementary metric. Perplexity aggregates
token-weighted across samples (corpus level), with per-sample values
available separately.
"""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from discussd.training import DecisionExample, Label


class NoSilentTurnsError(ValueError):
    pass


class EmptyInterventionError(ValueError):
    pass


@dataclass
class TurnPrediction:
    discussion_id: str
    turn_index: int
    predicted: Label
    first_token: str | None = None
    decision_latency_ms: float | None = None
    response_logprobs: list[float] | None = None

    def __post_init__(self):
        if self.predicted == Label.SILENT and self.response_logprobs is not None:
            raise ValueError("silent predictions carry no response logprobs")


@dataclass
class LatencyStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float


@dataclass
class MetricsReport:
    interruption_accuracy: float | None
    response_perplexity: float | None
    latency: LatencyStats | None
    gpu_memory_gb: float | None
    n_silent_turns: int
    n_speak_turns: int
    speak_recall: float | None = None  # supplementary, not a headline metric
    n_errors: int = 0
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "interruption_accuracy": self.interruption_accuracy,
            "response_perplexity": self.response_perplexity,
            "latency_ms_per_turn": None
            if self.latency is None
            else {"mean": self.latency.mean_ms, "p50": self.latency.p50_ms, "p95": self.latency.p95_ms},
            "gpu_memory_gb": self.gpu_memory_gb,
            "n_silent_turns": self.n_silent_turns,
            "n_speak_turns": self.n_speak_turns,
            "speak_recall_supplementary": self.speak_recall,
            "n_errors": self.n_errors,
            "errors": self.errors,
        }


LabelsLike = Mapping[tuple[str, int], Label] | Iterable[DecisionExample]


def _label_map(labels: LabelsLike) -> dict[tuple[str, int], Label]:
    if isinstance(labels, Mapping):
        return dict(labels)
    return {(ex.discussion_id, ex.turn_index): ex.label for ex in labels}


def interruption_accuracy(preds: Sequence[TurnPrediction], labels: LabelsLike) -> float:
    """Percentage of ground-truth-silent turns predicted silent.

    SPEAK-labeled turns are excluded from the denominator entirely, so
    predictions on them cannot move this metric.
    """
    truth = _label_map(labels)
    by_key = {(p.discussion_id, p.turn_index): p for p in preds}
    silent_keys = [k for k, v in truth.items() if v == Label.SILENT]
    if not silent_keys:
        raise NoSilentTurnsError("no ground-truth silent turns to score")
    missing = [k for k in silent_keys if k not in by_key]
    if missing:
        raise ValueError(f"{len(missing)} silent turns have no prediction, e.g. {missing[0]}")
    correct = sum(1 for k in silent_keys if by_key[k].predicted == Label.SILENT)
    return 100.0 * correct / len(silent_keys)


def speak_recall(preds: Sequence[TurnPrediction], labels: LabelsLike) -> float | None:
    """Share of ground-truth SPEAK turns predicted SPEAK (supplementary)."""
    truth = _label_map(labels)
    by_key = {(p.discussion_id, p.turn_index): p for p in preds}
    speak_keys = [k for k, v in truth.items() if v == Label.SPEAK]
    if not speak_keys:
        return None
    correct = sum(1 for k in speak_keys if k in by_key and by_key[k].predicted == Label.SPEAK)
    return 100.0 * correct / len(speak_keys)


def per_sample_perplexity(logprobs: Sequence[float]) -> float:
    if not logprobs:
        raise EmptyInterventionError("intervention has no tokens")
    return math.exp(-sum(logprobs) / len(logprobs))


def response_perplexity(samples: Sequence[Sequence[float]]) -> float:
    """Token-weighted aggregate: exp of the mean NLL over all intervention tokens."""
    if not samples:
        raise EmptyInterventionError("no intervention samples")
    total = 0.0
    count = 0
    for sample in samples:
        if not sample:
            raise EmptyInterventionError("intervention has no tokens")
        total += sum(sample)
        count += len(sample)
    return math.exp(-total / count)


def latency_stats(values_ms: Sequence[float]) -> LatencyStats:
    if not values_ms:
        raise ValueError("no latency samples")
    ordered = sorted(values_ms)

    def quantile(q: float) -> float:
        idx = min(len(ordered) - 1, max(0, math.ceil(q * len(ordered)) - 1))
        return ordered[idx]

    return LatencyStats(
        mean_ms=statistics.fmean(values_ms),
        p50_ms=quantile(0.50),
        p95_ms=quantile(0.95),
    )


# ---------------------------------------------------------------------------
# Evaluation run
# ---------------------------------------------------------------------------


def run_eval(
    test_set: Sequence[DecisionExample],
    policy,
    report_out: str | Path | None = None,
    clock: Callable[[], float] = time.perf_counter,
    policy_name: str = "policy",
) -> MetricsReport:
    """Replay each decision point through the policy and score the results.

    Per-turn policy errors are recorded and the replay continues; an errored
    turn counts as a SILENT prediction so the run never blocks. Perplexity is
    computed from reference-response logprobs when the policy can score them
    (``score_response``); otherwise it stays unreported.
    """
    preds: list[TurnPrediction] = []
    errors: list[str] = []
    logprob_samples: list[list[float]] = []

    for ex in test_set:
        t0 = clock()
        try:
            decision = policy.decide(ex.context)
        except Exception as exc:  # noqa: BLE001 - partial-failure tolerance is the contract
            elapsed_ms = (clock() - t0) * 1000.0
            errors.append(f"{ex.discussion_id}@{ex.turn_index}: {exc}")
            preds.append(
                TurnPrediction(ex.discussion_id, ex.turn_index, Label.SILENT, decision_latency_ms=elapsed_ms)
            )
            continue
        elapsed_ms = (clock() - t0) * 1000.0
        preds.append(
            TurnPrediction(
                ex.discussion_id,
                ex.turn_index,
                decision.decision,
                first_token=decision.first_token,
                decision_latency_ms=elapsed_ms,
            )
        )
        if ex.label == Label.SPEAK and ex.response:
            scorer = getattr(policy, "score_response", None)
            if scorer is not None:
                try:
                    lps = scorer(ex.context, ex.response)
                except Exception as exc:  # noqa: BLE001
                    errors.append(f"{ex.discussion_id}@{ex.turn_index} scoring: {exc}")
                    lps = None
                if lps:
                    logprob_samples.append(list(lps))

    labels = _label_map(test_set)
    try:
        accuracy = interruption_accuracy(preds, labels)
    except NoSilentTurnsError:
        accuracy = None
    perplexity = response_perplexity(logprob_samples) if logprob_samples else None
    latencies = [p.decision_latency_ms for p in preds if p.decision_latency_ms is not None]

    report = MetricsReport(
        interruption_accuracy=accuracy,
        response_perplexity=perplexity,
        latency=latency_stats(latencies) if latencies else None,
        gpu_memory_gb=getattr(policy, "reported_gpu_memory_gb", None),
        n_silent_turns=sum(1 for v in labels.values() if v == Label.SILENT),
        n_speak_turns=sum(1 for v in labels.values() if v == Label.SPEAK),
        speak_recall=speak_recall(preds, labels),
        n_errors=len(errors),
        errors=errors,
    )

    if report_out is not None:
        path = Path(report_out)
        path.write_text(render_report([(policy_name, report)]), encoding="utf-8")
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(report.to_dict(), indent=2), encoding="utf-8"
        )
    return report


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

_DASH = "−"  # minus sign, the conventional empty-cell marker


def _fmt(value: float | None, digits: int = 2) -> str:
    return _DASH if value is None else f"{value:.{digits}f}"


def render_report(reports: Sequence[tuple[str, MetricsReport]]) -> str:
    """Aligned markdown table, one column per policy."""
    names = [name for name, _ in reports]
    rows = [
        ("Interruption Accuracy (%)", [_fmt(r.interruption_accuracy) for _, r in reports]),
        ("Response Perplexity", [_fmt(r.response_perplexity) for _, r in reports]),
        ("Latency (ms/turn)", [_fmt(r.latency.mean_ms if r.latency else None) for _, r in reports]),
        ("GPU Memory (GB)", [_fmt(r.gpu_memory_gb) for _, r in reports]),
    ]
    widths = [max(len("Metric"), *(len(label) for label, _ in rows))]
    for i, name in enumerate(names):
        widths.append(max(len(name), *(len(cells[i]) for _, cells in rows)))

    def line(cells: list[str]) -> str:
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    out = [line(["Metric", *names]), line(["-" * w for w in widths])]
    for label, cells in rows:
        out.append(line([label, *cells]))
    return "\n".join(out) + "\n"
