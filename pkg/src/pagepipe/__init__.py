"""pagepipe: multi-page handwritten document transcription pipeline.

OCR engines plus multimodal LLM post-processing strategies, with document-
level CER scoring, out-of-sample evaluation, cost accounting and Pareto
frontier reports.
"""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    Document,
    GuardAction,
    Manifest,
    ModelSpec,
    Page,
    PAGE_BREAK_MARKER,
    TranscriptionResult,
    Usage,
    join_pages,
    read_manifest,
    split_pages,
    write_manifest,
)
