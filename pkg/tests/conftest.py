"""Shared fixtures: synthetic corpora and run helpers."""

from __future__ import annotations

import hashlib
from pathlib import Path

import pytest

from pagepipe import dataset as ds
from pagepipe.model import Manifest, write_manifest
from pagepipe.runner import RunConfig, execute_run
from pagepipe.strategies import StrategyId

# digit substitutions are uniquely invertible (no digit appears in the source
# text), so page-1 witnesses can never learn a wrong fix
ACCEPTANCE_NOISE = ds.NoiseChannel(
    substitutions=(("in", "1n", 1.0), ("o", "0", 0.55)),
    seed=7,
)


@pytest.fixture(scope="session")
def corpus50(tmp_path_factory) -> tuple[Path, Manifest, dict[str, str]]:
    """50 documents, 2-3 pages, writer-consistent noise at ~5% page CER."""
    out = tmp_path_factory.mktemp("corpus50")
    manifest, oracle = ds.generate_synthetic_corpus(
        text_source=ds.make_text_source(7),
        writers=8,
        noise=ACCEPTANCE_NOISE,
        seed=7,
        out_dir=out,
        target_docs=50,
        page_counts={2: 25, 3: 25},
    )
    write_manifest(manifest, out / "manifest.jsonl")
    ds.write_oracle_table(oracle, out / "oracle_ocr.jsonl")
    return out, manifest, oracle


@pytest.fixture(scope="session")
def corpus12(tmp_path_factory) -> tuple[Path, Manifest, dict[str, str]]:
    out = tmp_path_factory.mktemp("corpus12")
    manifest, oracle = ds.generate_synthetic_corpus(
        text_source=ds.make_text_source(5),
        writers=5,
        noise=ds.NoiseChannel(substitutions=(("in", "1n", 1.0), ("o", "0", 0.5)), seed=5),
        seed=5,
        out_dir=out,
        target_docs=12,
        page_counts=(2, 3),
    )
    write_manifest(manifest, out / "manifest.jsonl")
    ds.write_oracle_table(oracle, out / "oracle_ocr.jsonl")
    return out, manifest, oracle


def run_mock(
    corpus_dir: Path,
    oracle: dict[str, str],
    strategy: StrategyId,
    mode: str,
    out_dir: Path,
    concurrency: int = 4,
    **kwargs,
):
    config = RunConfig(
        manifest_path=corpus_dir / "manifest.jsonl",
        strategy=strategy,
        engines=() if strategy in (StrategyId.VISION, StrategyId.VISION_PBP) else ("synthetic",),
        model_id="gpt-4o-mini",
        mode=mode,
        out_dir=out_dir,
        oracle_table=oracle,
        concurrency=concurrency,
        **kwargs,
    )
    outcome = execute_run(config)
    assert not outcome.failures, f"run failures: {outcome.failures[:3]}"
    return outcome


def directory_digest(path: Path) -> str:
    digest = hashlib.sha256()
    for item in sorted(Path(path).rglob("*")):
        if item.is_file():
            digest.update(item.relative_to(path).as_posix().encode())
            digest.update(item.read_bytes())
    return digest.hexdigest()


def make_record_pool(writers: int, pages_per_writer: int) -> list[ds.SourcePageRecord]:
    """Assembly-only source records (no real images; use crop=False)."""
    records = []
    for w in range(writers):
        for p in range(pages_per_writer):
            records.append(
                ds.SourcePageRecord(
                    source_id=f"w{w:03d}-{p:03d}",
                    writer_id=f"w{w:03d}",
                    image_ref=f"img/w{w:03d}-{p:03d}.png",
                    handwritten_bbox=(0, 0, 100, 50),
                    ground_truth=f"line one of {w}/{p}\nline two of {w}/{p}",
                )
            )
    return records
