"""Domain types shared across the pipeline, plus manifest and artifact I/O.

A dataset is a manifest of multi-page documents; each page carries an image
reference and its ground-truth text. Transcription methods produce
`TranscriptionResult` records that are persisted one file per
(document, method) pair.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from .money import Money, as_money

# Canonical page-break marker: literal newlines around the bracket token.
# Prompts display it escaped (see prompts module); payload text carries the
# real newlines so splitting stays exact.
PAGE_BREAK_TOKEN = "[NEW_PAGE]"
PAGE_BREAK_MARKER = "\n[NEW_PAGE]\n"
PAGE_BREAK_MARKER_ESCAPED = "\\n[NEW_PAGE]\\n"

_MARKER_RE = re.compile(r"\n?\[NEW_PAGE\]\n?")


class ManifestError(ValueError):
    """A manifest file or document failed parsing or validation."""


class GuardAction(str, Enum):
    NONE = "none"
    FALLBACK_REFUSAL = "fallback_refusal"
    FALLBACK_REPETITION = "fallback_repetition"
    FALLBACK_CER_DIVERGENCE = "fallback_cer_divergence"


def join_pages(texts: Sequence[str]) -> str:
    """Interleave page texts with the canonical page-break marker."""
    if not texts:
        raise ValueError("join_pages requires at least one page text")
    return PAGE_BREAK_MARKER.join(texts)


def split_pages(text: str) -> list[str]:
    """Split concatenated page text on page-break markers.

    Tolerant of markers missing one or both surrounding newlines; use
    `split_pages_with_notes` to see which occurrences were non-canonical.
    """
    return _MARKER_RE.split(text)


def split_pages_with_notes(text: str) -> tuple[list[str], list[str]]:
    """Like `split_pages` but also reports non-canonical marker occurrences."""
    notes = [
        f"marker at offset {m.start()} missing surrounding newline(s)"
        for m in _MARKER_RE.finditer(text)
        if m.group() != PAGE_BREAK_MARKER
    ]
    return _MARKER_RE.split(text), notes


@dataclass(frozen=True)
class Page:
    """One cropped handwritten page image plus its reference text."""

    page_id: int  # 1-based position within the document
    image_ref: str
    ground_truth: str
    source_id: str

    def validate(self) -> None:
        if self.page_id < 1:
            raise ManifestError(f"page_id must be >= 1, got {self.page_id}")
        if PAGE_BREAK_TOKEN in self.ground_truth:
            # the marker is synthesized between pages; one embedded in a page
            # would make splitting and marker-stripping normalization ambiguous
            raise ManifestError(
                f"page {self.source_id}: ground truth contains the reserved "
                f"page-break token {PAGE_BREAK_TOKEN}"
            )


@dataclass(frozen=True)
class Document:
    """An ordered multi-page unit assembled from a single writer's pages."""

    doc_id: str
    writer_id: str
    pages: tuple[Page, ...]

    @property
    def page_count(self) -> int:
        return len(self.pages)

    def ground_truth_pages(self) -> list[str]:
        return [p.ground_truth for p in self.pages]

    def marked_ground_truth(self) -> str:
        """Whole-document reference text with canonical markers."""
        return join_pages(self.ground_truth_pages())

    def validate(self) -> None:
        if not self.pages:
            raise ManifestError(f"document {self.doc_id} has no pages")
        for page in self.pages:
            page.validate()
        ids = [p.page_id for p in self.pages]
        if ids != list(range(1, len(ids) + 1)):
            raise ManifestError(
                f"document {self.doc_id}: non-consecutive page_ids {ids}"
            )


@dataclass(frozen=True)
class Usage:
    """Backend call and token counters for one run unit.

    `ocr_calls` counts calls per engine used; multi-engine methods call each
    engine that many times.
    """

    ocr_calls: int = 0
    llm_input_text_tokens: int = 0
    llm_input_image_tokens: int = 0
    llm_output_tokens: int = 0
    llm_calls: int = 0

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"usage field {name} must be >= 0, got {value}")

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            ocr_calls=self.ocr_calls + other.ocr_calls,
            llm_input_text_tokens=self.llm_input_text_tokens + other.llm_input_text_tokens,
            llm_input_image_tokens=self.llm_input_image_tokens + other.llm_input_image_tokens,
            llm_output_tokens=self.llm_output_tokens + other.llm_output_tokens,
            llm_calls=self.llm_calls + other.llm_calls,
        )


@dataclass(frozen=True)
class ModelSpec:
    """Pricing and context-window description of one chat model."""

    model_id: str
    input_token_price_per_million: Money
    output_token_price_per_million: Money
    image_token_multiplier: Fraction = Fraction(1)
    max_context_tokens: int = 128_000

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "input_token_price_per_million", as_money(self.input_token_price_per_million)
        )
        object.__setattr__(
            self, "output_token_price_per_million", as_money(self.output_token_price_per_million)
        )
        if not isinstance(self.image_token_multiplier, Fraction):
            object.__setattr__(
                self, "image_token_multiplier", as_money(self.image_token_multiplier)
            )
        if self.input_token_price_per_million < 0 or self.output_token_price_per_million < 0:
            raise ValueError("token prices must be >= 0")
        if self.image_token_multiplier <= 0:
            raise ValueError("image_token_multiplier must be > 0")


@dataclass(frozen=True)
class TranscriptionResult:
    """Final output of one method on one document, plus usage accounting."""

    doc_id: str
    method_id: str
    text: str
    usage: Usage
    guard_action: GuardAction = GuardAction.NONE
    per_page_texts: tuple[str, ...] | None = None
    raw_llm_text: str | None = None
    ocr_baseline_text: str | None = None
    request_ids: tuple[str, ...] = ()
    template_hash: str | None = None
    usage_is_estimated: bool = False

    def validate(self) -> None:
        if self.guard_action is not GuardAction.NONE:
            if self.ocr_baseline_text is None or self.text != self.ocr_baseline_text:
                raise ValueError(
                    f"{self.doc_id}/{self.method_id}: guarded result must carry the OCR baseline text"
                )
        if self.per_page_texts is not None:
            if join_pages(self.per_page_texts) != self.text:
                raise ValueError(
                    f"{self.doc_id}/{self.method_id}: per_page_texts do not reassemble to text"
                )


@dataclass
class Manifest:
    """A dataset: named, seeded, and holding its documents."""

    dataset_id: str
    documents: list[Document]
    seed: int
    base_dir: Path | None = field(default=None, compare=False)
    warnings: list[str] = field(default_factory=list, compare=False)

    def validate(self) -> None:
        seen: set[str] = set()
        for doc in self.documents:
            if doc.doc_id in seen:
                raise ManifestError(f"duplicate doc_id {doc.doc_id}")
            seen.add(doc.doc_id)
            doc.validate()

    def document(self, doc_id: str) -> Document:
        for doc in self.documents:
            if doc.doc_id == doc_id:
                return doc
        raise KeyError(doc_id)

    def resolve_image(self, page: Page) -> Path:
        ref = Path(page.image_ref)
        if ref.is_absolute() or self.base_dir is None:
            return ref
        return self.base_dir / ref


def _page_to_dict(page: Page) -> dict:
    return {
        "page_id": page.page_id,
        "image_ref": page.image_ref,
        "ground_truth": page.ground_truth,
        "source_id": page.source_id,
    }


def _page_from_dict(raw: dict) -> Page:
    return Page(
        page_id=int(raw["page_id"]),
        image_ref=str(raw["image_ref"]),
        ground_truth=_normalize_newlines(str(raw["ground_truth"])),
        source_id=str(raw["source_id"]),
    )


def _normalize_newlines(text: str) -> str:
    # ground truth is stored LF-only; CRLF from upstream sources is folded here
    return text.replace("\r\n", "\n").replace("\r", "\n")


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write a manifest as line-delimited JSON with stable field order.

    The first line is a dataset header; each following line is one document.
    """
    manifest.validate()
    path = Path(path)
    lines = [json.dumps({"dataset_id": manifest.dataset_id, "seed": manifest.seed}, ensure_ascii=False)]
    for doc in manifest.documents:
        lines.append(
            json.dumps(
                {
                    "doc_id": doc.doc_id,
                    "writer_id": doc.writer_id,
                    "pages": [_page_to_dict(p) for p in doc.pages],
                },
                ensure_ascii=False,
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> Manifest:
    """Read and validate a manifest file.

    Dangling image references do not fail the read; they are collected into
    `Manifest.warnings` and resolved lazily at run time.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    dataset_id = ""
    seed = 0
    documents: list[Document] = []
    header_seen = False
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if not header_seen and "doc_id" not in raw:
                dataset_id = str(raw.get("dataset_id", ""))
                seed = int(raw.get("seed", 0))
                header_seen = True
                continue
            header_seen = True
            try:
                doc = Document(
                    doc_id=str(raw["doc_id"]),
                    writer_id=str(raw["writer_id"]),
                    pages=tuple(_page_from_dict(p) for p in raw["pages"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}: line {lineno}: bad document record ({exc})") from exc
            documents.append(doc)
    manifest = Manifest(dataset_id=dataset_id, documents=documents, seed=seed, base_dir=path.parent)
    manifest.validate()
    for doc in manifest.documents:
        for page in doc.pages:
            if not manifest.resolve_image(page).exists():
                manifest.warnings.append(
                    f"{doc.doc_id} page {page.page_id}: image not found: {page.image_ref}"
                )
    return manifest


def result_to_dict(result: TranscriptionResult) -> dict:
    return {
        "doc_id": result.doc_id,
        "method_id": result.method_id,
        "text": result.text,
        "per_page_texts": list(result.per_page_texts) if result.per_page_texts is not None else None,
        "usage": asdict(result.usage),
        "guard_action": result.guard_action.value,
        "raw_llm_text": result.raw_llm_text,
        "ocr_baseline_text": result.ocr_baseline_text,
        "request_ids": list(result.request_ids),
        "template_hash": result.template_hash,
        "usage_is_estimated": result.usage_is_estimated,
    }


def result_from_dict(raw: dict) -> TranscriptionResult:
    per_page = raw.get("per_page_texts")
    return TranscriptionResult(
        doc_id=raw["doc_id"],
        method_id=raw["method_id"],
        text=raw["text"],
        usage=Usage(**raw["usage"]),
        guard_action=GuardAction(raw.get("guard_action", "none")),
        per_page_texts=tuple(per_page) if per_page is not None else None,
        raw_llm_text=raw.get("raw_llm_text"),
        ocr_baseline_text=raw.get("ocr_baseline_text"),
        request_ids=tuple(raw.get("request_ids", ())),
        template_hash=raw.get("template_hash"),
        usage_is_estimated=bool(raw.get("usage_is_estimated", False)),
    )


def write_result(result: TranscriptionResult, path: str | Path) -> None:
    result.validate()
    Path(path).write_text(
        json.dumps(result_to_dict(result), ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def read_result(path: str | Path) -> TranscriptionResult:
    return result_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def read_results_dir(run_dir: str | Path) -> list[TranscriptionResult]:
    """Load every per-document result file from a run directory, sorted by doc."""
    run_dir = Path(run_dir)
    results = []
    for path in sorted(run_dir.glob("*.json")):
        if path.name == "run.json":
            continue
        results.append(read_result(path))
    return results
