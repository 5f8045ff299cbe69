"""Transcription strategies as pure plan builders.

A strategy maps a document (plus whatever OCR text it consumes) to an ordered
list of chat requests and an assembly rule. Execution lives elsewhere; plans
are inert data, which keeps every structural property testable offline.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .llm import ChatRequest, ContextOverflowError, ImagePart, TextPart, token_estimate
from .model import (
    Document,
    ModelSpec,
    Page,
    PAGE_BREAK_MARKER_ESCAPED,
    join_pages,
)
from .prompts import PromptTemplate, load_template


class StrategyError(RuntimeError):
    pass


class StrategyId(str, Enum):
    OCR_ONLY = "ocr_only"
    OCR_ONLY_LLM = "ocr_only_llm"
    OCR_PBP_LLM = "ocr_pbp_llm"
    FIRST_PAGE = "first_page"
    CHOSEN_PAGE = "chosen_page"
    VISION = "vision"
    VISION_PBP = "vision_pbp"
    ALL_PAGES = "all_pages"
    ALL_PAGES_PBP = "all_pages_pbp"
    ALL_OCR_LLM = "all_ocr_llm"
    ALL_OCR_PBP_LLM = "all_ocr_pbp_llm"


VISION_FAMILY = frozenset({StrategyId.VISION, StrategyId.VISION_PBP})
OCR_CONSUMING = frozenset(StrategyId) - VISION_FAMILY
# strategies whose LLM output the guard may replace with the OCR text
GUARDED = OCR_CONSUMING - {StrategyId.OCR_ONLY}
MULTI_ENGINE = frozenset({StrategyId.ALL_OCR_LLM, StrategyId.ALL_OCR_PBP_LLM})
NEEDS_IMAGES = frozenset(
    {
        StrategyId.FIRST_PAGE,
        StrategyId.CHOSEN_PAGE,
        StrategyId.VISION,
        StrategyId.VISION_PBP,
        StrategyId.ALL_PAGES,
        StrategyId.ALL_PAGES_PBP,
    }
)
PBP_STRATEGIES = frozenset(
    {
        StrategyId.OCR_PBP_LLM,
        StrategyId.VISION_PBP,
        StrategyId.ALL_PAGES_PBP,
        StrategyId.ALL_OCR_PBP_LLM,
    }
)


class Assembly(str, Enum):
    PASSTHROUGH = "passthrough"
    SINGLE_RESPONSE = "single_response"
    CONCAT_PBP = "concat_pbp"


@dataclass(frozen=True)
class RequestScope:
    """What one request covers: a page (0-based) or the whole document, and
    the OCR text for that scope (the guard's comparison text)."""

    page_index: int | None
    ocr_text: str | None


@dataclass(frozen=True)
class StrategyPlan:
    strategy: StrategyId
    assembly: Assembly
    requests: tuple[ChatRequest, ...]
    scopes: tuple[RequestScope, ...]
    passthrough_text: str | None = None
    template_hash: str | None = None
    stage2_of: str | None = None

    def __post_init__(self) -> None:
        if len(self.requests) != len(self.scopes):
            raise StrategyError("every request needs a scope")
        if self.assembly is Assembly.SINGLE_RESPONSE and len(self.requests) != 1:
            raise StrategyError("single_response plans carry exactly one request")
        if self.assembly is Assembly.PASSTHROUGH and self.requests:
            raise StrategyError("passthrough plans carry no requests")


ImageResolver = Callable[[Page], Path]

_MEDIA_TYPES = {
    ".png": "image/png",
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
    ".gif": "image/gif",
    ".webp": "image/webp",
}


def load_page_image(page: Page, resolve_image: ImageResolver) -> ImagePart:
    path = Path(resolve_image(page))
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise StrategyError(f"page {page.source_id}: image not readable: {path} ({exc})") from exc
    media = _MEDIA_TYPES.get(path.suffix.lower(), "image/png")
    return ImagePart(data=data, media_type=media)


def _check_ocr_texts(doc: Document, ocr_texts: Sequence[str]) -> None:
    if len(ocr_texts) != doc.page_count:
        raise StrategyError(
            f"{doc.doc_id}: got {len(ocr_texts)} OCR page texts for {doc.page_count} pages"
        )


def _template_pair(name: str, version: str) -> tuple[PromptTemplate, PromptTemplate, str]:
    system = load_template("system", version)
    body = load_template(name, version)
    combined = hashlib.sha256(
        (system.text + "\x00" + body.text).encode("utf-8")
    ).hexdigest()
    return system, body, combined


def _check_context(requests: Sequence[ChatRequest], model: ModelSpec) -> None:
    for request in requests:
        text_tokens, image_tokens = token_estimate(request, model)
        if text_tokens + image_tokens > model.max_context_tokens:
            raise ContextOverflowError(
                f"estimated {text_tokens + image_tokens} input tokens exceed "
                f"{model.model_id}'s {model.max_context_tokens}-token limit; "
                "use a page-by-page variant"
            )


def engine_sections(texts_by_engine: Mapping[str, str]) -> str:
    """Concatenate per-engine text with labeled delimiters, in fixed
    alphabetical engine order."""
    return "\n".join(
        f"=== ENGINE: {engine} ===\n{texts_by_engine[engine]}"
        for engine in sorted(texts_by_engine)
    )


# ---------------------------------------------------------------------------
# plan builders

def plan_ocr_only(doc: Document, ocr_texts: Sequence[str]) -> StrategyPlan:
    """No LLM at all: the marked join of per-page OCR output is the result."""
    _check_ocr_texts(doc, ocr_texts)
    return StrategyPlan(
        strategy=StrategyId.OCR_ONLY,
        assembly=Assembly.PASSTHROUGH,
        requests=(),
        scopes=(),
        passthrough_text=join_pages(ocr_texts),
    )


def plan_ocr_llm(
    doc: Document,
    ocr_texts: Sequence[str],
    model: ModelSpec,
    template_version: str = "v1",
) -> StrategyPlan:
    """Whole-document OCR text through the LLM in one request."""
    _check_ocr_texts(doc, ocr_texts)
    system, body, template_hash = _template_pair("ocr_only_llm", template_version)
    marked = join_pages(ocr_texts)
    request = ChatRequest(
        model_id=model.model_id,
        system_text=system.text,
        parts=(
            TextPart(
                body.render(
                    OCR_TEXT=marked,
                    PAGE_COUNT=doc.page_count,
                    MARKER_ESCAPED=PAGE_BREAK_MARKER_ESCAPED,
                )
            ),
        ),
    )
    _check_context([request], model)
    return StrategyPlan(
        strategy=StrategyId.OCR_ONLY_LLM,
        assembly=Assembly.SINGLE_RESPONSE,
        requests=(request,),
        scopes=(RequestScope(page_index=None, ocr_text=marked),),
        template_hash=template_hash,
    )


def plan_first_page(
    doc: Document,
    ocr_texts: Sequence[str],
    model: ModelSpec,
    resolve_image: ImageResolver,
    template_version: str = "v1",
) -> StrategyPlan:
    """Whole-document OCR text plus only the first page's image."""
    _check_ocr_texts(doc, ocr_texts)
    system, body, template_hash = _template_pair("first_page", template_version)
    marked = join_pages(ocr_texts)
    image = load_page_image(doc.pages[0], resolve_image)
    request = ChatRequest(
        model_id=model.model_id,
        system_text=system.text,
        parts=(
            TextPart(
                body.render(
                    OCR_TEXT=marked,
                    PAGE_COUNT=doc.page_count,
                    MARKER_ESCAPED=PAGE_BREAK_MARKER_ESCAPED,
                )
            ),
            image,
        ),
    )
    _check_context([request], model)
    return StrategyPlan(
        strategy=StrategyId.FIRST_PAGE,
        assembly=Assembly.SINGLE_RESPONSE,
        requests=(request,),
        scopes=(RequestScope(page_index=None, ocr_text=marked),),
        template_hash=template_hash,
    )


def plan_chosen_page_selection(
    doc: Document,
    ocr_texts: Sequence[str],
    selector_model: ModelSpec,
    template_version: str = "v1",
) -> StrategyPlan:
    """Stage 1 of the chosen-page strategy: a text-only page-picking prompt."""
    _check_ocr_texts(doc, ocr_texts)
    system, body, template_hash = _template_pair("chosen_page_select", template_version)
    marked = join_pages(ocr_texts)
    request = ChatRequest(
        model_id=selector_model.model_id,
        system_text=system.text,
        parts=(
            TextPart(
                body.render(
                    OCR_TEXT=marked,
                    PAGE_COUNT=doc.page_count,
                    MARKER_ESCAPED=PAGE_BREAK_MARKER_ESCAPED,
                )
            ),
        ),
        max_output_tokens=64,
    )
    _check_context([request], selector_model)
    return StrategyPlan(
        strategy=StrategyId.CHOSEN_PAGE,
        assembly=Assembly.SINGLE_RESPONSE,
        requests=(request,),
        scopes=(RequestScope(page_index=None, ocr_text=marked),),
        template_hash=template_hash,
    )


def parse_page_choice(text: str, page_count: int) -> tuple[int, str | None]:
    """First in-range integer in the selection response; page 1 otherwise."""
    for match in re.finditer(r"\d+", text):
        value = int(match.group())
        if 1 <= value <= page_count:
            return value, None
    return 1, f"unparsable page selection {text!r}; fell back to page 1"


def plan_chosen_page(
    doc: Document,
    ocr_texts: Sequence[str],
    model: ModelSpec,
    chosen_page_id: int,
    resolve_image: ImageResolver,
    template_version: str = "v1",
    stage2_of: str | None = None,
) -> StrategyPlan:
    """Stage 2 of the chosen-page strategy: like first-page but with the
    selected page's image attached."""
    _check_ocr_texts(doc, ocr_texts)
    if not 1 <= chosen_page_id <= doc.page_count:
        raise StrategyError(f"{doc.doc_id}: chosen page {chosen_page_id} out of range")
    system, body, template_hash = _template_pair("chosen_page", template_version)
    marked = join_pages(ocr_texts)
    image = load_page_image(doc.pages[chosen_page_id - 1], resolve_image)
    request = ChatRequest(
        model_id=model.model_id,
        system_text=system.text,
        parts=(
            TextPart(
                body.render(
                    OCR_TEXT=marked,
                    PAGE_COUNT=doc.page_count,
                    PAGE_NUMBER=chosen_page_id,
                    MARKER_ESCAPED=PAGE_BREAK_MARKER_ESCAPED,
                )
            ),
            image,
        ),
    )
    _check_context([request], model)
    return StrategyPlan(
        strategy=StrategyId.CHOSEN_PAGE,
        assembly=Assembly.SINGLE_RESPONSE,
        requests=(request,),
        scopes=(RequestScope(page_index=None, ocr_text=marked),),
        template_hash=template_hash,
        stage2_of=stage2_of,
    )


def plan_vision(
    doc: Document,
    model: ModelSpec,
    resolve_image: ImageResolver,
    pbp: bool = False,
    template_version: str = "v1",
) -> StrategyPlan:
    """Images only, no OCR text anywhere in the request."""
    if pbp:
        system, body, template_hash = _template_pair("vision_pbp", template_version)
        requests = []
        scopes = []
        for index, page in enumerate(doc.pages):
            requests.append(
                ChatRequest(
                    model_id=model.model_id,
                    system_text=system.text,
                    parts=(TextPart(body.text), load_page_image(page, resolve_image)),
                )
            )
            scopes.append(RequestScope(page_index=index, ocr_text=None))
        _check_context(requests, model)
        return StrategyPlan(
            strategy=StrategyId.VISION_PBP,
            assembly=Assembly.CONCAT_PBP,
            requests=tuple(requests),
            scopes=tuple(scopes),
            template_hash=template_hash,
        )
    system, body, template_hash = _template_pair("vision", template_version)
    images = tuple(load_page_image(page, resolve_image) for page in doc.pages)
    request = ChatRequest(
        model_id=model.model_id,
        system_text=system.text,
        parts=(
            TextPart(
                body.render(
                    PAGE_COUNT=doc.page_count, MARKER_ESCAPED=PAGE_BREAK_MARKER_ESCAPED
                )
            ),
            *images,
        ),
    )
    _check_context([request], model)
    return StrategyPlan(
        strategy=StrategyId.VISION,
        assembly=Assembly.SINGLE_RESPONSE,
        requests=(request,),
        scopes=(RequestScope(page_index=None, ocr_text=None),),
        template_hash=template_hash,
    )


def plan_all_pages(
    doc: Document,
    ocr_texts: Sequence[str],
    model: ModelSpec,
    resolve_image: ImageResolver,
    pbp: bool = False,
    template_version: str = "v1",
) -> StrategyPlan:
    """OCR text and page images together."""
    _check_ocr_texts(doc, ocr_texts)
    if pbp:
        system, body, template_hash = _template_pair("all_pages_pbp", template_version)
        requests = []
        scopes = []
        for index, page in enumerate(doc.pages):
            requests.append(
                ChatRequest(
                    model_id=model.model_id,
                    system_text=system.text,
                    parts=(
                        TextPart(body.render(OCR_TEXT=ocr_texts[index])),
                        load_page_image(page, resolve_image),
                    ),
                )
            )
            scopes.append(RequestScope(page_index=index, ocr_text=ocr_texts[index]))
        _check_context(requests, model)
        return StrategyPlan(
            strategy=StrategyId.ALL_PAGES_PBP,
            assembly=Assembly.CONCAT_PBP,
            requests=tuple(requests),
            scopes=tuple(scopes),
            template_hash=template_hash,
        )
    system, body, template_hash = _template_pair("all_pages", template_version)
    marked = join_pages(ocr_texts)
    images = tuple(load_page_image(page, resolve_image) for page in doc.pages)
    request = ChatRequest(
        model_id=model.model_id,
        system_text=system.text,
        parts=(
            TextPart(
                body.render(
                    OCR_TEXT=marked,
                    PAGE_COUNT=doc.page_count,
                    MARKER_ESCAPED=PAGE_BREAK_MARKER_ESCAPED,
                )
            ),
            *images,
        ),
    )
    _check_context([request], model)
    return StrategyPlan(
        strategy=StrategyId.ALL_PAGES,
        assembly=Assembly.SINGLE_RESPONSE,
        requests=(request,),
        scopes=(RequestScope(page_index=None, ocr_text=marked),),
        template_hash=template_hash,
    )


def plan_all_ocr(
    doc: Document,
    ocr_texts_by_engine: Mapping[str, Sequence[str]],
    model: ModelSpec,
    pbp: bool = False,
    template_version: str = "v1",
) -> StrategyPlan:
    """Concatenated output of all three OCR engines through the LLM.

    The guard's comparison text is the alphabetically-first engine's output."""
    if len(ocr_texts_by_engine) != 3:
        raise StrategyError(
            f"all_ocr needs exactly three engine outputs, got {sorted(ocr_texts_by_engine)}"
        )
    for engine, texts in ocr_texts_by_engine.items():
        if len(texts) != doc.page_count:
            raise StrategyError(
                f"{doc.doc_id}: engine {engine} has {len(texts)} page texts "
                f"for {doc.page_count} pages"
            )
    engines = sorted(ocr_texts_by_engine)
    primary = engines[0]
    if pbp:
        system, body, template_hash = _template_pair("all_ocr_pbp_llm", template_version)
        requests = []
        scopes = []
        for index in range(doc.page_count):
            sections = engine_sections(
                {engine: ocr_texts_by_engine[engine][index] for engine in engines}
            )
            requests.append(
                ChatRequest(
                    model_id=model.model_id,
                    system_text=system.text,
                    parts=(TextPart(body.render(ENGINE_SECTIONS=sections)),),
                )
            )
            scopes.append(
                RequestScope(page_index=index, ocr_text=ocr_texts_by_engine[primary][index])
            )
        _check_context(requests, model)
        return StrategyPlan(
            strategy=StrategyId.ALL_OCR_PBP_LLM,
            assembly=Assembly.CONCAT_PBP,
            requests=tuple(requests),
            scopes=tuple(scopes),
            template_hash=template_hash,
        )
    system, body, template_hash = _template_pair("all_ocr_llm", template_version)
    sections = engine_sections(
        {engine: join_pages(ocr_texts_by_engine[engine]) for engine in engines}
    )
    request = ChatRequest(
        model_id=model.model_id,
        system_text=system.text,
        parts=(
            TextPart(
                body.render(
                    ENGINE_SECTIONS=sections,
                    PAGE_COUNT=doc.page_count,
                    MARKER_ESCAPED=PAGE_BREAK_MARKER_ESCAPED,
                )
            ),
        ),
    )
    _check_context([request], model)
    return StrategyPlan(
        strategy=StrategyId.ALL_OCR_LLM,
        assembly=Assembly.SINGLE_RESPONSE,
        requests=(request,),
        scopes=(RequestScope(page_index=None, ocr_text=join_pages(ocr_texts_by_engine[primary])),),
        template_hash=template_hash,
    )


_PBP_INNER = {
    StrategyId.OCR_ONLY_LLM: StrategyId.OCR_PBP_LLM,
    StrategyId.VISION: StrategyId.VISION_PBP,
    StrategyId.ALL_PAGES: StrategyId.ALL_PAGES_PBP,
    StrategyId.ALL_OCR_LLM: StrategyId.ALL_OCR_PBP_LLM,
}


def plan_pbp(
    inner: StrategyId,
    doc: Document,
    ocr_texts: Sequence[str] | None,
    model: ModelSpec,
    resolve_image: ImageResolver | None = None,
    ocr_texts_by_engine: Mapping[str, Sequence[str]] | None = None,
    template_version: str = "v1",
) -> StrategyPlan:
    """Page-by-page variant of an all-at-once strategy: one request per page,
    responses joined with page-break markers at assembly time."""
    if inner not in _PBP_INNER:
        raise StrategyError(f"no page-by-page variant of {inner.value}")
    if inner is StrategyId.OCR_ONLY_LLM:
        if ocr_texts is None:
            raise StrategyError("ocr pbp needs OCR page texts")
        _check_ocr_texts(doc, ocr_texts)
        system, body, template_hash = _template_pair("ocr_pbp_llm", template_version)
        requests = tuple(
            ChatRequest(
                model_id=model.model_id,
                system_text=system.text,
                parts=(TextPart(body.render(OCR_TEXT=ocr_texts[index])),),
            )
            for index in range(doc.page_count)
        )
        scopes = tuple(
            RequestScope(page_index=index, ocr_text=ocr_texts[index])
            for index in range(doc.page_count)
        )
        _check_context(requests, model)
        return StrategyPlan(
            strategy=StrategyId.OCR_PBP_LLM,
            assembly=Assembly.CONCAT_PBP,
            requests=requests,
            scopes=scopes,
            template_hash=template_hash,
        )
    if inner is StrategyId.VISION:
        if resolve_image is None:
            raise StrategyError("vision pbp needs an image resolver")
        return plan_vision(doc, model, resolve_image, pbp=True, template_version=template_version)
    if inner is StrategyId.ALL_PAGES:
        if resolve_image is None:
            raise StrategyError("all_pages pbp needs an image resolver")
        if ocr_texts is None:
            raise StrategyError("all_pages pbp needs OCR page texts")
        return plan_all_pages(
            doc, ocr_texts, model, resolve_image, pbp=True, template_version=template_version
        )
    if ocr_texts_by_engine is None:
        raise StrategyError("all_ocr pbp needs per-engine OCR texts")
    return plan_all_ocr(doc, ocr_texts_by_engine, model, pbp=True, template_version=template_version)
