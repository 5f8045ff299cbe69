"""Per-page-count behaviour on a fixed-length series corpus.

Page-by-page methods hold their improvement flat as documents grow; an
all-at-once transcriber whose quality decays with prompt length produces a
monotonically decreasing curve.
"""

from collections import defaultdict

import pytest

from conftest import run_mock
from pagepipe import dataset as ds
from pagepipe import report as rpt
from pagepipe.model import read_manifest, read_results_dir, write_manifest
from pagepipe.strategies import StrategyId


@pytest.fixture(scope="module")
def series_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("series")
    noise = ds.NoiseChannel(substitutions=(("in", "1n", 1.0), ("o", "0", 0.55)), seed=3)
    manifest, oracle = ds.generate_synthetic_corpus(
        text_source=ds.make_text_source(3),
        writers=10,
        noise=noise,
        seed=3,
        out_dir=out,
        target_docs=None,
        page_counts={n: 10 for n in range(2, 11)},
    )
    write_manifest(manifest, out / "manifest.jsonl")
    ds.write_oracle_table(oracle, out / "oracle_ocr.jsonl")
    return out, oracle


def _cer_by_count(manifest, run_dir):
    grouped = defaultdict(list)
    for record in rpt.score_run(manifest, read_results_dir(run_dir)):
        grouped[record.page_count].append(record.cer_full)
    return {count: sum(v) / len(v) for count, v in grouped.items()}


def test_series_has_ten_documents_per_count(series_corpus):
    corpus_dir, _ = series_corpus
    manifest = read_manifest(corpus_dir / "manifest.jsonl")
    counts = defaultdict(int)
    for doc in manifest.documents:
        counts[doc.page_count] += 1
    assert dict(counts) == {n: 10 for n in range(2, 11)}


def test_curves_pbp_flat_all_at_once_degrades(series_corpus, tmp_path):
    corpus_dir, oracle = series_corpus
    manifest = read_manifest(corpus_dir / "manifest.jsonl")

    base = run_mock(corpus_dir, oracle, StrategyId.OCR_ONLY, "mock:parrot", tmp_path / "b")
    degraded = run_mock(corpus_dir, oracle, StrategyId.OCR_ONLY_LLM, "mock:degrade", tmp_path / "d")
    pbp = run_mock(corpus_dir, oracle, StrategyId.OCR_PBP_LLM, "mock:parrot", tmp_path / "p")

    baseline_curve = _cer_by_count(manifest, base.run_dir)
    points = rpt.per_page_count_curves(
        {
            "all_at_once_degrading": _cer_by_count(manifest, degraded.run_dir),
            "pbp_parrot": _cer_by_count(manifest, pbp.run_dir),
        },
        baseline_curve,
    )

    degrade_curve = {
        p.page_count: p.rel_imp for p in points if p.method_id == "all_at_once_degrading"
    }
    flat_curve = {p.page_count: p.rel_imp for p in points if p.method_id == "pbp_parrot"}

    ordered = [degrade_curve[n] for n in sorted(degrade_curve)]
    assert len(ordered) == 9
    assert all(a > b for a, b in zip(ordered, ordered[1:])), ordered
    # identical per-page behaviour at any document length: exactly flat
    assert all(abs(v) < 1e-12 for v in flat_curve.values())

    # n=2 point equals the same method's improvement computed on that subset directly
    direct = rpt.per_page_count_curves(
        {"m": {2: _cer_by_count(manifest, degraded.run_dir)[2]}}, {2: baseline_curve[2]}
    )[0].rel_imp
    assert degrade_curve[2] == pytest.approx(direct)


def test_curve_artifacts_written(series_corpus, tmp_path):
    corpus_dir, oracle = series_corpus
    manifest = read_manifest(corpus_dir / "manifest.jsonl")
    base = run_mock(corpus_dir, oracle, StrategyId.OCR_ONLY, "mock:parrot", tmp_path / "b")
    pbp = run_mock(corpus_dir, oracle, StrategyId.OCR_PBP_LLM, "mock:parrot", tmp_path / "p")
    points = rpt.per_page_count_curves(
        {"pbp": _cer_by_count(manifest, pbp.run_dir)},
        _cer_by_count(manifest, base.run_dir),
    )
    rpt.write_curves_csv(points, tmp_path / "curves.csv")
    rpt.write_curves_svg(points, tmp_path / "curves.svg")
    assert (tmp_path / "curves.csv").read_text().count("\n") == 10  # header + 9 counts
    assert "<svg" in (tmp_path / "curves.svg").read_text()
