"""discussd command line: filter, generate, expand, split, eval, serve, bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from discussd.backends import HttpChatBackend, HttpClassifier, StubChatBackend
from discussd.corpus import FilterConfig, dedup_stream, filter_file, read_records
from discussd.metrics import render_report, run_eval
from discussd.pipeline import (
    PipelineConfig,
    generate_scenario,
    load_transcripts,
    run_pipeline,
)
from discussd.service import DecoupledPolicy, EndToEndPolicy, bench_policy
from discussd.tokenizers import WordPunctTokenizer
from discussd.training import (
    DecisionExample,
    Label,
    build_e2e_mask,
    build_generator_pairs,
    discussion_key,
    expand_turns,
    read_decisions,
    split_dataset,
    write_decisions,
    write_e2e,
    write_pairs,
)
from discussd.transcript import Role, Turn


def _chat_backend(url: str | None, seed: int = 0):
    if url == "stub":
        return StubChatBackend(seed=seed)
    return HttpChatBackend(base_url=url)


def _cmd_filter(args) -> int:
    cfg = FilterConfig(min_title_chars=args.min_title, min_content_chars=args.min_content)
    stats = filter_file(args.infile, args.out, args.rejects, cfg)
    print(
        f"read={stats.read} accepted={stats.accepted} rejected={stats.rejected} "
        f"duplicates={stats.duplicates} by_reason={stats.by_reason}"
    )
    return 0


def _pipeline_cfg(args) -> PipelineConfig:
    return PipelineConfig(
        seed=args.seed,
        max_retries=args.max_retries,
        workers=getattr(args, "workers", 1),
    )


def _cmd_scenarios(args) -> int:
    from concurrent.futures import ThreadPoolExecutor

    backend = _chat_backend(args.backend_url, args.seed)
    cfg = _pipeline_cfg(args)
    records = list(dedup_stream(read_records(args.infile)))

    def stage1(record):
        try:
            scenario, _ = generate_scenario(record, backend, cfg)
            return record.id, scenario, None
        except Exception as exc:  # noqa: BLE001
            return record.id, None, exc

    n_ok = 0
    n_fail = 0
    with open(args.out, "w", encoding="utf-8") as out:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for record_id, scenario, error in pool.map(stage1, records):
                if scenario is None:
                    n_fail += 1
                    print(f"{record_id}: FAILED ({error})", file=sys.stderr)
                    continue
                out.write(json.dumps(scenario.to_dict(), ensure_ascii=False) + "\n")
                n_ok += 1
    print(f"scenarios={n_ok} failed={n_fail}")
    return 0 if n_fail == 0 else 1


def _cmd_pipeline(args) -> int:
    backend = _chat_backend(args.backend_url, args.seed)
    stats = run_pipeline(args.infile, args.out_dir, backend, _pipeline_cfg(args))
    print(json.dumps(stats.to_dict(), indent=2))
    return 0


def _cmd_expand(args) -> int:
    discussions = load_transcripts(args.transcripts)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    include_post = not args.no_post

    examples = [e for d in discussions for e in expand_turns(d, include_post)]
    write_decisions(out_dir / "decisions.ndjson", examples)
    tok = WordPunctTokenizer()
    write_e2e(out_dir / "e2e.ndjson", ((discussion_key(d), build_e2e_mask(d, tok)) for d in discussions))
    write_pairs(out_dir / "pairs.ndjson", build_generator_pairs(discussions))
    n_speak = sum(e.label == Label.SPEAK for e in examples)
    print(
        f"discussions={len(discussions)} decisions={len(examples)} "
        f"speak={n_speak} silent={len(examples) - n_speak}"
    )
    return 0


def _cmd_split(args) -> int:
    rows = read_decisions(args.infile)
    keyed = [(row.get("discussion_id", str(i)), row) for i, row in enumerate(rows)]

    class _Row:
        __slots__ = ("discussion_id", "row")

        def __init__(self, discussion_id, row):
            self.discussion_id = discussion_id
            self.row = row

    items = [_Row(k, row) for k, row in keyed]
    train, test = split_dataset(items, args.ratio, args.seed)
    for path, part in ((args.train_out, train), (args.test_out, test)):
        with open(path, "w", encoding="utf-8") as fh:
            for item in part:
                fh.write(json.dumps(item.row, ensure_ascii=False) + "\n")
    print(f"train={len(train)} test={len(test)}")
    return 0


def _decision_examples_from_rows(rows) -> list[DecisionExample]:
    out = []
    for row in rows:
        context = tuple(
            Turn(line.split(":", 1)[0], Role.HUMAN, line.split(":", 1)[1].strip())
            for line in row["context"].split("\n")
            if ":" in line
        )
        out.append(
            DecisionExample(
                discussion_id=row["discussion_id"],
                turn_index=int(row["turn_index"]),
                context=context,
                label=Label(row["label"]),
                response=row.get("response"),
            )
        )
    return out


def _cmd_eval(args) -> int:
    rows = read_decisions(args.test)
    test_set = _decision_examples_from_rows(rows)
    if args.policy == "end_to_end":
        policy = EndToEndPolicy(_chat_backend(args.backend_url))
    else:
        policy = DecoupledPolicy(
            classifier=HttpClassifier(url=args.classifier_url),
            generator=_chat_backend(args.backend_url) if args.backend_url else None,
            threshold=args.threshold,
        )
    report = run_eval(test_set, policy, report_out=args.report, policy_name=args.policy)
    print(render_report([(args.policy, report)]))
    return 0


def _cmd_serve(args) -> int:
    from discussd.server import serve_forever

    print(f"serving on http://127.0.0.1:{args.port} (data: {args.data_dir})")
    serve_forever(args.port, args.data_dir)
    return 0


def _cmd_bench(args) -> int:
    replay = load_transcripts(args.replay)
    if args.policy == "end_to_end":
        policy = EndToEndPolicy(_chat_backend(args.backend_url))
    else:
        policy = DecoupledPolicy(
            classifier=HttpClassifier(url=args.classifier_url),
            generator=_chat_backend(args.backend_url) if args.backend_url else None,
            threshold=args.threshold,
        )
    report = bench_policy(policy, replay, policy_name=args.policy)
    print(report.render())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="discussd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter", help="filter + dedup a seed records file")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rejects")
    p.add_argument("--min-title", type=int, default=15)
    p.add_argument("--min-content", type=int, default=50)
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("scenarios", help="stage 1 only: records -> scenarios.ndjson")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backend-url", default=None, help="chat backend base URL, or 'stub'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-retries", type=int, default=2)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_scenarios)

    p = sub.add_parser("pipeline", help="records -> validated transcript files")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--backend-url", default=None, help="chat backend base URL, or 'stub'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-retries", type=int, default=2)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("discussions", help="alias of pipeline for scenario-bearing records")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--backend-url", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-retries", type=int, default=2)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("expand", help="transcripts -> decisions/e2e/pairs files")
    p.add_argument("--transcripts", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-post", action="store_true", help="drop post-intervention SILENT examples")
    p.set_defaults(func=_cmd_expand)

    p = sub.add_parser("split", help="grouped train/test split of a decisions file")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--ratio", type=float, default=0.85)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-out", required=True)
    p.add_argument("--test-out", required=True)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("eval", help="replay a test set through a policy")
    p.add_argument("--test", required=True)
    p.add_argument("--policy", choices=["end_to_end", "decoupled"], required=True)
    p.add_argument("--backend-url", default=None)
    p.add_argument("--classifier-url", default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--report", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("serve", help="run the live session service")
    p.add_argument("--port", type=int, default=8400)
    p.add_argument("--data-dir", default="./discussd-sessions")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("bench", help="latency bench over replayed transcripts")
    p.add_argument("--policy", choices=["end_to_end", "decoupled"], required=True)
    p.add_argument("--replay", required=True, help="directory of transcript .txt files")
    p.add_argument("--backend-url", default=None)
    p.add_argument("--classifier-url", default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
