"""Multi-page dataset construction.

Three builders share one assembler: a source-record adapter that crops pages
to their handwritten region and combines them into multi-page documents by
writer, a fixed-page-count series builder, and a synthetic corpus generator
whose "OCR" output is a deterministic noise channel applied per writer (the
same channel for every page of a writer, so error patterns are consistent
across a document).
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from PIL import Image

from .model import Document, Manifest, Page

log = logging.getLogger("pagepipe.dataset")


class DatasetBuildError(RuntimeError):
    pass


class InsufficientPagesError(DatasetBuildError):
    def __init__(self, page_count: int, message: str):
        super().__init__(message)
        self.page_count = page_count


@dataclass(frozen=True)
class SourcePageRecord:
    """One single-page source item with the crop region for its handwriting."""

    source_id: str
    writer_id: str
    image_ref: str
    handwritten_bbox: tuple[int, int, int, int]  # x, y, width, height in pixels
    ground_truth: str

    def validate(self) -> None:
        x, y, w, h = self.handwritten_bbox
        if w <= 0 or h <= 0:
            raise DatasetBuildError(
                f"record {self.source_id}: bbox width/height must be > 0, got {w}x{h}"
            )
        if x < 0 or y < 0:
            raise DatasetBuildError(f"record {self.source_id}: bbox origin must be >= 0")


def read_source_records(path: str | Path) -> list[SourcePageRecord]:
    """Read a line-delimited source record file (see README for the schema)."""
    records = []
    with Path(path).open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                record = SourcePageRecord(
                    source_id=str(raw["source_id"]),
                    writer_id=str(raw["writer_id"]),
                    image_ref=str(raw["image_ref"]),
                    handwritten_bbox=tuple(int(v) for v in raw["bbox"]),
                    ground_truth=str(raw["ground_truth"]),
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise DatasetBuildError(f"{path}: line {lineno}: bad record ({exc})") from exc
            record.validate()
            records.append(record)
    return records


def derive_rng(seed: int, key: str) -> random.Random:
    """Seedable, portable substream: Mersenne Twister keyed by SHA-256(seed, key)."""
    digest = hashlib.sha256(f"{seed}:{key}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


# ---------------------------------------------------------------------------
# noise channel

FAULT_COLUMN_SPLIT = "column_split"
FAULT_LINE_MERGE = "line_merge"
FAULT_SPURIOUS_LINEBREAK = "spurious_linebreak"
KNOWN_FAULTS = (FAULT_COLUMN_SPLIT, FAULT_LINE_MERGE, FAULT_SPURIOUS_LINEBREAK)


@dataclass(frozen=True)
class NoiseChannel:
    """Deterministic text corruption standing in for a real OCR engine.

    Substitutions are (pattern, replacement, probability) applied to each
    occurrence in order; structural faults mimic layout-level misreads.
    """

    substitutions: tuple[tuple[str, str, float], ...] = ()
    structural_faults: tuple[tuple[str, float], ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        for pattern, _, p in self.substitutions:
            if not pattern or not 0.0 <= p <= 1.0:
                raise ValueError(f"bad substitution ({pattern!r}, p={p})")
        for fault, p in self.structural_faults:
            if fault not in KNOWN_FAULTS or not 0.0 <= p <= 1.0:
                raise ValueError(f"bad structural fault ({fault!r}, p={p})")


def default_noise_channel(seed: int = 0) -> NoiseChannel:
    """Writer-consistent substitutions that land around 5% page-level CER
    on the built-in text source."""
    return NoiseChannel(
        substitutions=(
            ("in", "1n", 1.0),
            ("w", "m", 1.0),
            ("e", "c", 0.12),
        ),
        structural_faults=(),
        seed=seed,
    )


def column_split(text: str) -> str:
    """Split every line at its midpoint column and emit all left halves,
    then all right halves (a two-column misread of single-column text)."""
    lines = text.split("\n")
    lefts = [line[: len(line) // 2] for line in lines]
    rights = [line[len(line) // 2:] for line in lines]
    return "\n".join(lefts + rights)


def invert_column_split(text: str) -> str:
    """Exact inverse of `column_split`."""
    lines = text.split("\n")
    if len(lines) % 2 != 0:
        raise ValueError("column-split text must have an even number of lines")
    half = len(lines) // 2
    return "\n".join(left + right for left, right in zip(lines[:half], lines[half:]))


def _apply_fault(fault: str, text: str, rng: random.Random) -> str:
    if fault == FAULT_COLUMN_SPLIT:
        return column_split(text)
    if fault == FAULT_LINE_MERGE:
        breaks = [i for i, c in enumerate(text) if c == "\n"]
        if not breaks:
            return text
        at = breaks[rng.randrange(len(breaks))]
        return text[:at] + " " + text[at + 1:]
    if fault == FAULT_SPURIOUS_LINEBREAK:
        spaces = [i for i, c in enumerate(text) if c == " "]
        if not spaces:
            return text
        at = spaces[rng.randrange(len(spaces))]
        return text[:at] + "\n" + text[at + 1:]
    raise ValueError(f"unknown fault {fault!r}")


def apply_noise(text: str, channel: NoiseChannel, writer_id: str) -> str:
    """Corrupt one page of text with the writer's noise substream.

    The RNG is re-derived from (channel.seed, writer_id) on every call, so
    the mapping text -> noisy text is one fixed function per writer.
    """
    rng = derive_rng(channel.seed, f"writer:{writer_id}")
    for pattern, replacement, p in channel.substitutions:
        out = []
        cursor = 0
        while True:
            found = text.find(pattern, cursor)
            if found < 0:
                out.append(text[cursor:])
                break
            out.append(text[cursor:found])
            out.append(replacement if rng.random() < p else pattern)
            cursor = found + len(pattern)
        text = "".join(out)
    for fault, p in channel.structural_faults:
        if rng.random() < p:
            text = _apply_fault(fault, text, rng)
    return text


# ---------------------------------------------------------------------------
# document assembly

def plan_page_counts(
    page_counts: Mapping[int, int] | Iterable[int],
    target_docs: int | None,
    total_pages: int,
) -> dict[int, int]:
    """Normalize a page-count spec into {page_count: documents}.

    A mapping is taken as exact per-count document counts. A bare list of
    allowed counts plus a document target consumes the page pool: every
    document starts at the minimum count and documents are upgraded one page
    at a time until the pool is spent or every document is at the maximum.
    """
    if isinstance(page_counts, Mapping):
        plan = {int(k): int(v) for k, v in page_counts.items()}
        if any(k < 1 or v < 0 for k, v in plan.items()):
            raise DatasetBuildError(f"bad page-count plan {plan}")
        if target_docs is not None and sum(plan.values()) != target_docs:
            raise DatasetBuildError(
                f"page-count plan totals {sum(plan.values())} documents, expected {target_docs}"
            )
        return {k: v for k, v in plan.items() if v > 0}

    counts = sorted(set(int(c) for c in page_counts))
    if not counts or counts[0] < 1:
        raise DatasetBuildError(f"bad page counts {counts}")
    if target_docs is None:
        raise DatasetBuildError("a bare page-count list needs a target document count")
    lo, hi = counts[0], counts[-1]
    if total_pages < lo * target_docs:
        raise InsufficientPagesError(
            lo, f"{total_pages} pages cannot fill {target_docs} documents of >= {lo} pages"
        )
    spare = min(total_pages - lo * target_docs, (hi - lo) * target_docs)
    full_rounds, remainder = divmod(spare, target_docs)
    plan = {}
    if target_docs - remainder:
        plan[lo + full_rounds] = target_docs - remainder
    if remainder:
        plan[lo + full_rounds + 1] = remainder
    return plan


def _relax_plan(plan: Mapping[int, int]) -> dict[int, int] | None:
    """Move one document from the largest page count one step down; None when
    every document already sits at the minimum count."""
    sizes = sorted(plan)
    lo, hi = sizes[0], sizes[-1]
    if hi == lo:
        return None
    relaxed = dict(plan)
    relaxed[hi] -= 1
    relaxed[hi - 1] = relaxed.get(hi - 1, 0) + 1
    if relaxed[hi] == 0:
        del relaxed[hi]
    return relaxed


def _assemble_greedy(
    pool_by_writer: Mapping[str, Sequence[str]],
    plan: Mapping[int, int],
    rng: random.Random,
    writer_policy: str,
    allow_page_reuse: bool,
    attempts: int,
) -> list[tuple[str, list[str]]]:
    """Doc-by-doc random draws, largest documents first. Random writer choice
    can paint itself into a corner on tight pools, so retry with fresh draws
    before giving up."""
    sizes = [size for size in sorted(plan, reverse=True) for _ in range(plan[size])]
    failure: InsufficientPagesError | None = None
    for _ in range(attempts):
        remaining = {w: list(pages) for w, pages in sorted(pool_by_writer.items())}
        docs: list[tuple[str, list[str]]] = []
        failure = None
        for size in sizes:
            eligible = [w for w in sorted(remaining) if len(remaining[w]) >= size]
            if not eligible:
                failure = InsufficientPagesError(
                    size, f"no writer has {size} unused pages left"
                )
                break
            if writer_policy == "spread":
                most = max(len(remaining[w]) for w in eligible)
                eligible = [w for w in eligible if len(remaining[w]) == most]
            writer = eligible[rng.randrange(len(eligible))]
            chosen = rng.sample(remaining[writer], size)
            if not allow_page_reuse:
                remaining[writer] = [p for p in remaining[writer] if p not in chosen]
            docs.append((writer, chosen))
        if failure is None:
            return docs
    assert failure is not None
    raise failure


def _assemble_exact_cover(
    pool_by_writer: Mapping[str, Sequence[str]],
    plan: Mapping[int, int],
    rng: random.Random,
) -> list[tuple[str, list[str]]]:
    """Allocation for plans that consume every page with sizes {n, n+1}.

    Every writer must decompose as k = a*n + b*(n+1), which pins b modulo n;
    the spare (n+1)-documents are then spread at random in steps of n."""
    sizes = sorted(plan)
    n = sizes[0]
    m = n + 1
    big_docs_needed = plan.get(m, 0)
    writers = sorted(pool_by_writer)
    b_by_writer: dict[str, int] = {}
    for writer in writers:
        k = len(pool_by_writer[writer])
        b_min = k % n
        if b_min * m > k:
            raise InsufficientPagesError(
                m, f"writer {writer} has {k} pages, which cannot split into {n}s and {m}s"
            )
        b_by_writer[writer] = b_min
    assigned = sum(b_by_writer.values())
    if assigned > big_docs_needed or (big_docs_needed - assigned) % n != 0:
        raise InsufficientPagesError(
            m,
            f"pool parity cannot meet {big_docs_needed} documents of {m} pages "
            f"(forced minimum {assigned}, steps of {n})",
        )
    steps_left = (big_docs_needed - assigned) // n
    while steps_left > 0:
        room = [w for w in writers if (b_by_writer[w] + n) * m <= len(pool_by_writer[w])]
        if not room:
            raise InsufficientPagesError(
                m, f"no writer can absorb another {n} documents of {m} pages"
            )
        b_by_writer[room[rng.randrange(len(room))]] += n
        steps_left -= 1
    docs: list[tuple[str, list[str]]] = []
    for writer in writers:
        pages = list(pool_by_writer[writer])
        rng.shuffle(pages)
        b = b_by_writer[writer]
        a = (len(pages) - m * b) // n
        cursor = 0
        for _ in range(b):
            docs.append((writer, pages[cursor: cursor + m]))
            cursor += m
        for _ in range(a):
            docs.append((writer, pages[cursor: cursor + n]))
            cursor += n
    rng.shuffle(docs)
    return docs


def _assemble_documents(
    pool_by_writer: Mapping[str, Sequence[str]],
    plan: Mapping[int, int],
    rng: random.Random,
    writer_policy: str = "random",
    allow_page_reuse: bool = False,
    attempts: int = 20,
) -> list[tuple[str, list[str]]]:
    """Draw (writer_id, [source_ids]) tuples satisfying the count plan.

    Pages never repeat within a document; reuse across documents is off by
    default. Plans that consume the pool exactly with two adjacent sizes go
    through a parity-aware allocator; everything else is randomized greedy."""
    total_pool = sum(len(p) for p in pool_by_writer.values())
    total_plan = sum(size * docs for size, docs in plan.items())
    sizes = sorted(plan)
    adjacent = len(sizes) <= 2 and sizes[-1] - sizes[0] <= 1
    if adjacent and total_plan == total_pool and not allow_page_reuse:
        return _assemble_exact_cover(pool_by_writer, plan, rng)
    return _assemble_greedy(pool_by_writer, plan, rng, writer_policy, allow_page_reuse, attempts)


def _documents_from_assembly(
    assembled: list[tuple[str, list[str]]],
    pages_by_source: Mapping[str, Page],
    dataset_id: str,
) -> list[Document]:
    documents = []
    for index, (writer_id, source_ids) in enumerate(assembled):
        pages = tuple(
            replace(pages_by_source[source_id], page_id=position + 1)
            for position, source_id in enumerate(source_ids)
        )
        documents.append(
            Document(doc_id=f"{dataset_id}-d{index:04d}", writer_id=writer_id, pages=pages)
        )
    return documents


# ---------------------------------------------------------------------------
# source-record builders (IAM-style input)

def crop_page(
    record: SourcePageRecord,
    out_dir: str | Path,
    page_id: int = 1,
    warnings: list[str] | None = None,
) -> Page:
    """Crop the handwritten region out of a source image and write it as PNG."""
    record.validate()
    out_dir = Path(out_dir)
    pages_dir = out_dir / "pages"
    pages_dir.mkdir(parents=True, exist_ok=True)
    try:
        image = Image.open(record.image_ref)
        image.load()
    except Exception as exc:
        raise DatasetBuildError(f"record {record.source_id}: cannot decode image: {exc}") from exc
    x, y, w, h = record.handwritten_bbox
    right, bottom = x + w, y + h
    if x >= image.width or y >= image.height:
        raise DatasetBuildError(
            f"record {record.source_id}: bbox origin ({x},{y}) outside image "
            f"{image.width}x{image.height}"
        )
    if right > image.width or bottom > image.height:
        clamped = (min(right, image.width), min(bottom, image.height))
        message = (
            f"record {record.source_id}: bbox {record.handwritten_bbox} exceeds image "
            f"{image.width}x{image.height}; clamped"
        )
        log.warning(message)
        if warnings is not None:
            warnings.append(message)
        right, bottom = clamped
    out_path = pages_dir / f"{record.source_id}.png"
    image.crop((x, y, right, bottom)).save(out_path)
    return Page(
        page_id=page_id,
        image_ref=f"pages/{record.source_id}.png",
        ground_truth=record.ground_truth,
        source_id=record.source_id,
    )


def _prepare_pages(
    records: Sequence[SourcePageRecord],
    out_dir: Path,
    crop: bool,
    min_pages: int,
    warnings: list[str],
) -> tuple[dict[str, list[str]], dict[str, Page]]:
    """Crop (or pass through) every usable page.

    Returns (writer -> source_ids, source_id -> Page)."""
    pages_by_source: dict[str, Page] = {}
    pool: dict[str, list[str]] = {}
    by_writer: dict[str, list[SourcePageRecord]] = {}
    for record in records:
        by_writer.setdefault(record.writer_id, []).append(record)
    for writer_id in sorted(by_writer):
        group = by_writer[writer_id]
        usable: list[str] = []
        for record in group:
            try:
                if crop:
                    page = crop_page(record, out_dir, warnings=warnings)
                else:
                    record.validate()
                    page = Page(
                        page_id=1,
                        image_ref=record.image_ref,
                        ground_truth=record.ground_truth,
                        source_id=record.source_id,
                    )
            except DatasetBuildError as exc:
                message = f"skipping page {record.source_id}: {exc}"
                log.warning(message)
                warnings.append(message)
                continue
            pages_by_source[record.source_id] = page
            usable.append(record.source_id)
        if len(usable) < min_pages:
            message = (
                f"skipping writer {writer_id}: {len(usable)} usable pages "
                f"< minimum document size {min_pages}"
            )
            log.warning(message)
            warnings.append(message)
            continue
        pool[writer_id] = usable
    return pool, pages_by_source


def build_multipage_dataset(
    records: Sequence[SourcePageRecord],
    page_counts: Mapping[int, int] | Iterable[int],
    target_docs: int | None,
    seed: int,
    out_dir: str | Path,
    dataset_id: str | None = None,
    crop: bool = True,
    writer_policy: str = "random",
    allow_page_reuse: bool = False,
) -> Manifest:
    """Assemble multi-page documents from single-page source records."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset_id is None:
        dataset_id = f"multipage-s{seed}"
    warnings: list[str] = []
    if isinstance(page_counts, Mapping):
        page_counts = {int(k): int(v) for k, v in page_counts.items()}
        min_pages = min(page_counts)
    else:
        page_counts = sorted(set(int(c) for c in page_counts))
        min_pages = page_counts[0]
    pool, pages_by_source = _prepare_pages(records, out_dir, crop, min_pages, warnings)
    total_pages = sum(len(v) for v in pool.values())
    if total_pages == 0:
        raise DatasetBuildError("no usable pages; cannot assemble any documents")
    plan = plan_page_counts(page_counts, target_docs, total_pages)
    rng = derive_rng(seed, "assembly")
    relaxable = not isinstance(page_counts, Mapping)
    while True:
        try:
            assembled = _assemble_documents(
                pool, plan, rng, writer_policy=writer_policy, allow_page_reuse=allow_page_reuse
            )
            break
        except InsufficientPagesError:
            # the pool-consuming policy prefers the fullest plan, but writer
            # fragmentation can make it unpackable; shed one page upgrade at
            # a time (stranding that page) until assembly fits
            relaxed = _relax_plan(plan) if relaxable else None
            if relaxed is None:
                raise
            if relaxed != plan:
                warnings.append(
                    f"page-count plan relaxed to {sorted(relaxed.items())}; "
                    "writer pool could not pack the fullest split"
                )
            plan = relaxed
    documents = _documents_from_assembly(assembled, pages_by_source, dataset_id)
    manifest = Manifest(dataset_id=dataset_id, documents=documents, seed=seed, base_dir=out_dir)
    manifest.warnings.extend(warnings)
    manifest.validate()
    return manifest


def build_iam_multipage(
    records: Sequence[SourcePageRecord],
    page_counts: Mapping[int, int] | Iterable[int],
    target_docs: int | None,
    seed: int,
    out_dir: str | Path,
    **kwargs,
) -> Manifest:
    """IAM-style build: crop to the handwritten region, combine by writer."""
    return build_multipage_dataset(records, page_counts, target_docs, seed, out_dir, **kwargs)


def build_fixed_length_series(
    records: Sequence[SourcePageRecord],
    page_counts: Iterable[int],
    docs_per_count: int,
    seed: int,
    out_dir: str | Path,
    **kwargs,
) -> Manifest:
    """Fixed-size series: exactly docs_per_count documents at every count."""
    plan = {int(c): docs_per_count for c in page_counts}
    kwargs.setdefault("dataset_id", f"series-s{seed}")
    return build_multipage_dataset(records, plan, None, seed, out_dir, **kwargs)


# ---------------------------------------------------------------------------
# synthetic corpus

WORD_POOL = (
    "the quick brown fox jumps over a lazy dog while rain falls on green hills "
    "and children walk in small groups past the old stone bridge near town "
    "where market stalls sell bread apples ink paper string candles and soap "
    "every morning brings fresh news from distant ports carried by tired riders "
    "whose letters speak of storms harvests journeys debts weddings and quiet "
    "evenings spent reading by the fire with strong tea and a patient cat"
).split()


def make_text_source(seed: int, lines: int = 400, words_per_line: tuple[int, int] = (7, 11)) -> list[str]:
    """Deterministic filler prose for the synthetic corpus."""
    rng = derive_rng(seed, "text-source")
    out = []
    for _ in range(lines):
        count = rng.randint(*words_per_line)
        out.append(" ".join(rng.choice(WORD_POOL) for _ in range(count)))
    return out


def _placeholder_png(source_id: str, path: Path) -> None:
    digest = hashlib.sha256(source_id.encode()).digest()
    color = (digest[0], digest[1], digest[2])
    image = Image.new("RGB", (16, 16), color)
    image.save(path)


def generate_synthetic_corpus(
    text_source: Sequence[str],
    writers: int,
    noise: NoiseChannel,
    seed: int,
    out_dir: str | Path,
    target_docs: int = 20,
    page_counts: Mapping[int, int] | Iterable[int] = (2, 3),
    lines_per_page: int = 4,
    dataset_id: str | None = None,
) -> tuple[Manifest, dict[str, str]]:
    """Build an offline test corpus plus its OCR oracle table.

    Page images are placeholder PNGs; the oracle maps each source_id to the
    noise channel's deterministic reading of that page, using the same
    per-writer channel for all pages of a writer.
    """
    if not text_source:
        raise DatasetBuildError("text_source must be non-empty")
    if writers < 1:
        raise DatasetBuildError("need at least one writer")
    out_dir = Path(out_dir)
    pages_dir = out_dir / "pages"
    pages_dir.mkdir(parents=True, exist_ok=True)
    if dataset_id is None:
        dataset_id = f"synthetic-s{seed}"

    if isinstance(page_counts, Mapping):
        plan = {int(k): int(v) for k, v in page_counts.items()}
    else:
        counts = sorted(set(int(c) for c in page_counts))
        base, remainder = divmod(target_docs, len(counts))
        plan = {c: base + (1 if i < remainder else 0) for i, c in enumerate(counts)}
    total_pages = sum(size * docs for size, docs in plan.items())
    per_writer = max(max(plan), -(-total_pages // writers) + max(plan))

    pages_by_source: dict[str, Page] = {}
    pool: dict[str, list[str]] = {}
    oracle: dict[str, str] = {}
    line_cursor = 0
    for w in range(writers):
        writer_id = f"writer{w:03d}"
        ids = []
        for p in range(per_writer):
            source_id = f"{dataset_id}-w{w:03d}p{p:03d}"
            lines = [
                text_source[(line_cursor + k) % len(text_source)] for k in range(lines_per_page)
            ]
            line_cursor += lines_per_page
            ground_truth = "\n".join(lines)
            _placeholder_png(source_id, pages_dir / f"{source_id}.png")
            page = Page(
                page_id=1,
                image_ref=f"pages/{source_id}.png",
                ground_truth=ground_truth,
                source_id=source_id,
            )
            pages_by_source[source_id] = page
            oracle[source_id] = apply_noise(ground_truth, noise, writer_id)
            ids.append(source_id)
        pool[writer_id] = ids

    rng = derive_rng(seed, "assembly")
    assembled = _assemble_documents(pool, plan, rng)
    documents = _documents_from_assembly(assembled, pages_by_source, dataset_id)
    manifest = Manifest(dataset_id=dataset_id, documents=documents, seed=seed, base_dir=out_dir)
    manifest.validate()
    used = {p.source_id for d in documents for p in d.pages}
    oracle = {sid: text for sid, text in sorted(oracle.items()) if sid in used}
    return manifest, oracle


def write_oracle_table(oracle: Mapping[str, str], path: str | Path) -> None:
    lines = [
        json.dumps({"source_id": sid, "ocr_text": oracle[sid]}, ensure_ascii=False)
        for sid in sorted(oracle)
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_oracle_table(path: str | Path) -> dict[str, str]:
    table = {}
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            raw = json.loads(line)
            table[str(raw["source_id"])] = str(raw["ocr_text"])
    return table
