"""Command-line entry point: build-dataset, run, score, report, pareto."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter, defaultdict
from pathlib import Path

from . import dataset as ds
from . import report as rpt
from .guard import GuardConfig
from .model import ManifestError, read_manifest, read_results_dir, write_manifest
from .money import as_money, format_dollars
from .pricing import default_price_book, load_price_book, run_cost
from .runner import RunConfig, RunError, execute_run, method_id_for
from .strategies import StrategyId

log = logging.getLogger("pagepipe")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_FATAL = 2


def _parse_pages(spec: str):
    """'2,3' -> [2, 3]; '2:210,3:58' -> {2: 210, 3: 58}."""
    if ":" in spec:
        plan = {}
        for item in spec.split(","):
            count, docs = item.split(":")
            plan[int(count)] = int(docs)
        return plan
    return [int(item) for item in spec.split(",")]


def _parse_series(spec: str) -> list[int]:
    """'2:10' -> [2, 3, ..., 10]."""
    lo, hi = spec.split(":")
    return list(range(int(lo), int(hi) + 1))


def _count_summary(manifest) -> str:
    counts = Counter(doc.page_count for doc in manifest.documents)
    parts = ", ".join(f"{counts[n]}×{n}pp" for n in sorted(counts))
    return f"{len(manifest.documents)} documents ({parts})"


def _cmd_build_dataset(args) -> int:
    out_dir = Path(args.out)
    if args.source == "synthetic":
        noise = ds.default_noise_channel(args.seed)
        if args.noise:
            raw = json.loads(Path(args.noise).read_text(encoding="utf-8"))
            noise = ds.NoiseChannel(
                substitutions=tuple(
                    (str(p), str(r), float(prob)) for p, r, prob in raw.get("substitutions", [])
                ),
                structural_faults=tuple(
                    (str(f), float(prob)) for f, prob in raw.get("structural_faults", [])
                ),
                seed=args.seed,
            )
        if args.text_file:
            text_source = Path(args.text_file).read_text(encoding="utf-8").splitlines()
        else:
            text_source = ds.make_text_source(args.seed)
        if args.series:
            page_counts = {n: args.per_count for n in _parse_series(args.series)}
            target = None
        else:
            page_counts = _parse_pages(args.pages)
            target = args.count if isinstance(page_counts, list) else None
            if isinstance(page_counts, list) and target is None:
                target = args.docs
        manifest, oracle = ds.generate_synthetic_corpus(
            text_source=text_source,
            writers=args.writers,
            noise=noise,
            seed=args.seed,
            out_dir=out_dir,
            target_docs=args.docs if target is None else target,
            page_counts=page_counts,
            dataset_id=args.dataset_id,
        )
        write_manifest(manifest, out_dir / "manifest.jsonl")
        ds.write_oracle_table(oracle, out_dir / "oracle_ocr.jsonl")
        print(_count_summary(manifest))
        print(f"manifest: {out_dir / 'manifest.jsonl'}")
        print(f"oracle table: {out_dir / 'oracle_ocr.jsonl'}")
        return EXIT_OK

    if not args.records:
        raise ManifestError("--records is required for --source iam")
    records = ds.read_source_records(args.records)
    if args.series:
        manifest = ds.build_fixed_length_series(
            records,
            _parse_series(args.series),
            args.per_count,
            args.seed,
            out_dir,
            dataset_id=args.dataset_id,
            crop=not args.no_crop,
            writer_policy=args.writer_policy,
            allow_page_reuse=args.allow_page_reuse,
        )
    else:
        manifest = ds.build_iam_multipage(
            records,
            _parse_pages(args.pages),
            args.count,
            args.seed,
            out_dir,
            dataset_id=args.dataset_id,
            crop=not args.no_crop,
            writer_policy=args.writer_policy,
            allow_page_reuse=args.allow_page_reuse,
        )
    write_manifest(manifest, out_dir / "manifest.jsonl")
    print(_count_summary(manifest))
    for warning in manifest.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"manifest: {out_dir / 'manifest.jsonl'}")
    return EXIT_OK


def _guard_from_args(args) -> GuardConfig:
    if not args.guard_config:
        return GuardConfig(cer_divergence_threshold=args.guard_threshold)
    raw = json.loads(Path(args.guard_config).read_text(encoding="utf-8"))
    kwargs = {"cer_divergence_threshold": raw.get("threshold", args.guard_threshold)}
    if "prefixes" in raw:
        kwargs["refusal_prefixes"] = tuple(str(p) for p in raw["prefixes"])
    for key in ("repetition_block_min_chars", "repetition_min_repeats"):
        if key in raw:
            kwargs[key] = int(raw[key])
    return GuardConfig(**kwargs)


def _cmd_run(args) -> int:
    if not args.manifest or not args.strategy:
        raise RunError("run needs --manifest and --strategy (directly or via --config)")
    oracle = None
    if args.oracle_table:
        oracle = ds.read_oracle_table(args.oracle_table)
    engines = tuple(e for arg in args.engine for e in arg.split(",")) if args.engine else ()
    guard = _guard_from_args(args)
    book = load_price_book(args.price_book) if args.price_book else default_price_book()
    config = RunConfig(
        manifest_path=Path(args.manifest),
        strategy=StrategyId(args.strategy),
        engines=engines,
        model_id=args.model,
        selector_model_id=args.selector_model,
        mode=args.mode,
        out_dir=Path(args.out),
        fixtures_dir=Path(args.fixtures) if args.fixtures else None,
        oracle_table=oracle,
        template_version=args.template_version,
        guard=guard,
        concurrency=args.concurrency,
        seed=args.seed,
        force=args.force,
        dry_run=args.dry_run,
        price_book=book,
    )
    outcome = execute_run(config)
    if config.dry_run:
        print(f"dry run: {outcome.planned_requests} LLM requests planned")
        print(f"estimated cost: {format_dollars(outcome.estimated_cost)}")
        return EXIT_OK
    print(
        f"{method_id_for(config)}: {len(outcome.completed)} completed, "
        f"{len(outcome.skipped)} skipped, {len(outcome.failures)} failed"
    )
    print(f"artifacts: {outcome.run_dir}")
    for doc_id, error in outcome.failures:
        print(f"failed {doc_id}: {error}", file=sys.stderr)
    return EXIT_PARTIAL if outcome.failures else EXIT_OK


def _cmd_score(args) -> int:
    manifest = read_manifest(args.manifest)
    results = read_results_dir(args.run)
    if not results:
        print(f"no result artifacts in {args.run}", file=sys.stderr)
        return EXIT_FATAL
    records = rpt.score_run(manifest, results, pages_after_first=args.pages_after_first)
    out = Path(args.out) if args.out else Path(args.run) / "scores.csv"
    rpt.write_scores_csv(records, out)
    mean = sum(r.cer_full for r in records) / len(records)
    print(f"{records[0].method_id}: {len(records)} documents, mean CER {mean:.4f}")
    print(f"scores: {out}")
    return EXIT_OK


def _load_run_summary(manifest, run_dir: Path, book) -> rpt.RunSummary:
    meta = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
    results = read_results_dir(run_dir)
    records = rpt.score_run(manifest, results)
    cost = sum(
        (
            run_cost(result.usage, meta.get("engines", ()), book, meta.get("model_id"))
            for result in results
        ),
        start=as_money(0),
    )
    return rpt.summary_from_scores(
        meta["method_id"],
        meta.get("model_id"),
        records,
        cost,
        cost_is_estimated=any(r.usage_is_estimated for r in results),
    )


def _summaries_from_csv(path: Path) -> list[rpt.RunSummary]:
    summaries = []
    with Path(path).open(newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            summaries.append(
                rpt.RunSummary(
                    method_id=row["method_id"],
                    model_id=row.get("model_id") or None,
                    cer_by_doc={"_set": float(row["cer"])},
                    cost=as_money(row["cost"]),
                )
            )
    return summaries


def _gather_summaries(args, book):
    if args.summary_csv:
        summaries = _summaries_from_csv(Path(args.summary_csv))
        by_id = {s.method_id: s for s in summaries}
        if args.baseline_method not in by_id:
            raise RunError(
                f"--baseline-method {args.baseline_method!r} not in {sorted(by_id)}"
            )
        baseline = by_id[args.baseline_method]
        others = [s for s in summaries if s.method_id != args.baseline_method]
        return baseline, others
    manifest = read_manifest(args.manifest)
    baseline = _load_run_summary(manifest, Path(args.baseline), book)
    others = [_load_run_summary(manifest, Path(run), book) for run in args.runs]
    return baseline, others


def _cmd_report(args) -> int:
    book = load_price_book(args.price_book) if args.price_book else default_price_book()
    baseline, others = _gather_summaries(args, book)
    rows = rpt.comparison_table(others, baseline, weighted=args.weighted)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rpt.write_comparison_csv(rows, out_dir / "report.csv")
    markdown = rpt.render_comparison_markdown(rows)
    (out_dir / "report.md").write_text(markdown, encoding="utf-8")
    print(markdown)

    if args.curves:
        manifest = read_manifest(args.manifest)
        page_count_by_doc = {d.doc_id: d.page_count for d in manifest.documents}

        def cer_by_count(summary: rpt.RunSummary) -> dict[int, float]:
            grouped = defaultdict(list)
            for doc_id, cer in summary.cer_by_doc.items():
                grouped[page_count_by_doc[doc_id]].append(cer)
            return {count: sum(v) / len(v) for count, v in grouped.items()}

        points = rpt.per_page_count_curves(
            {s.method_id: cer_by_count(s) for s in others}, cer_by_count(baseline)
        )
        rpt.write_curves_csv(points, out_dir / "curves.csv")
        rpt.write_curves_svg(points, out_dir / "curves.svg")
        print(f"curves: {out_dir / 'curves.csv'}, {out_dir / 'curves.svg'}")
    return EXIT_OK


def _cmd_prices(args) -> int:
    from .pricing import write_default_price_book

    write_default_price_book(args.out)
    print(f"default price book: {args.out}")
    return EXIT_OK


def _cmd_pareto(args) -> int:
    book = load_price_book(args.price_book) if args.price_book else default_price_book()
    baseline, others = _gather_summaries(args, book)
    points = [
        rpt.ParetoPoint(cost=s.cost, cer=s.mean_cer, label=s.method_id)
        for s in [baseline, *others]
    ]
    frontier = rpt.pareto_frontier(points)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rpt.write_pareto_csv(points, frontier, out_dir / "pareto.csv")
    rpt.write_pareto_svg(points, frontier, out_dir / "pareto.svg")
    print("frontier (cheapest first):")
    for point in frontier:
        print(f"  {point.label}: cost {format_dollars(point.cost)}, CER {point.cer:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pagepipe",
        description="Multi-page handwritten document transcription pipeline",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="assemble a multi-page dataset")
    p.add_argument("--source", choices=["iam", "synthetic"], required=True)
    p.add_argument("--records", help="line-delimited source page records (iam)")
    p.add_argument("--pages", default="2,3", help="'2,3' or exact '2:210,3:58'")
    p.add_argument("--count", type=int, default=None, help="total documents (with bare --pages)")
    p.add_argument("--series", help="fixed-length series, e.g. '2:10'")
    p.add_argument("--per-count", type=int, default=10, help="documents per series page count")
    p.add_argument("--writers", type=int, default=5, help="synthetic writer count")
    p.add_argument("--docs", type=int, default=20, help="synthetic document count")
    p.add_argument("--noise", help="noise channel JSON (synthetic)")
    p.add_argument("--text-file", help="text source, one line per sentence (synthetic)")
    p.add_argument("--no-crop", action="store_true", help="keep source images uncropped (iam)")
    p.add_argument("--writer-policy", choices=["random", "spread"], default="random")
    p.add_argument("--allow-page-reuse", action="store_true",
                   help="let a source page appear in more than one document")
    p.add_argument("--dataset-id")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_build_dataset)

    p = sub.add_parser("run", help="run one transcription method over a manifest")
    p.add_argument("--config", help="JSON file of run settings; explicit flags win")
    p.add_argument("--manifest")
    p.add_argument("--strategy", choices=[s.value for s in StrategyId])
    p.add_argument("--engine", action="append", default=[], help="ocr engine (repeat or comma-join)")
    p.add_argument("--model", default="gpt-4o-mini")
    p.add_argument("--selector-model", default="gpt-4o-mini")
    p.add_argument("--mode", default="mock:parrot", help="live | record | replay | mock:<name>")
    p.add_argument("--fixtures", help="fixture directory for record/replay")
    p.add_argument("--oracle-table", help="oracle OCR table (synthetic engine)")
    p.add_argument("--template-version", default="v1")
    p.add_argument("--guard-threshold", type=float, default=0.5)
    p.add_argument("--guard-config", help="JSON guard settings {threshold, prefixes, ...}")
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="re-run completed documents")
    p.add_argument("--dry-run", action="store_true", help="print request counts and estimated cost")
    p.add_argument("--price-book")
    p.add_argument("--out", default="runs")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("score", help="score one run directory against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--pages-after-first", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_score)

    p = sub.add_parser("prices", help="write the default price book as JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_prices)

    for name, fn in (("report", _cmd_report), ("pareto", _cmd_pareto)):
        p = sub.add_parser(name, help=f"emit {name} artifacts")
        p.add_argument("--manifest")
        p.add_argument("--baseline", help="baseline (ocr_only) run directory")
        p.add_argument("--runs", nargs="*", default=[], help="method run directories")
        p.add_argument("--summary-csv", help="alternative input: method_id,model_id,cer,cost")
        p.add_argument("--baseline-method", help="baseline method_id within --summary-csv")
        p.add_argument("--weighted", action="store_true", help="length-weighted dataset CER")
        p.add_argument("--curves", action="store_true", help="also emit per-page-count curves")
        p.add_argument("--price-book")
        p.add_argument("--out", default="reports")
        p.set_defaults(fn=fn)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Seed run-subcommand defaults from a --config JSON file (flags still win)."""
    if "run" not in argv or "--config" not in argv:
        return
    config_path = argv[argv.index("--config") + 1]
    raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
    run_parser = next(
        action.choices["run"]
        for action in parser._subparsers._group_actions
        if "run" in getattr(action, "choices", {})
    )
    run_parser.set_defaults(**{k.replace("-", "_"): v for k, v in raw.items()})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
    except (OSError, json.JSONDecodeError, IndexError) as exc:
        print(f"error: bad --config file: {exc}", file=sys.stderr)
        return EXIT_FATAL
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except (ManifestError, RunError, ds.DatasetBuildError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
