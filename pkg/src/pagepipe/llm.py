"""Chat-completion clients over mixed text and image parts.

One request/response shape serves four client kinds: a live OpenAI-style
HTTP client, a recording wrapper that persists fixtures, a replay client
that answers only from fixtures, and scriptable mocks for offline pipeline
tests. Token usage reported by a provider always wins over estimates.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import math
import os
import random
import re
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Protocol

import requests
from PIL import Image

from .backoff import RetryPolicy, call_with_retries
from .model import Document, ModelSpec, Usage, join_pages


class LlmError(RuntimeError):
    pass


class FixtureMissingError(LlmError):
    pass


class ContextOverflowError(LlmError):
    pass


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    CONTENT_FILTER = "content_filter"
    ERROR = "error"


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    media_type: str = "image/png"


Part = TextPart | ImagePart

DEFAULT_MAX_OUTPUT_TOKENS = 16_384


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    system_text: str
    parts: tuple[Part, ...]
    temperature: float = 0.0
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS

    def __post_init__(self) -> None:
        if not self.parts:
            raise ValueError("a chat request needs at least one part")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: Usage
    finish_reason: FinishReason = FinishReason.STOP
    usage_is_estimated: bool = False


def canonical_request_digest(request: ChatRequest) -> str:
    """Stable SHA-256 over a field-ordered canonical form of the request."""
    parts = []
    for part in request.parts:
        if isinstance(part, TextPart):
            parts.append({"kind": "text", "text": part.text})
        else:
            parts.append(
                {
                    "kind": "image",
                    "media_type": part.media_type,
                    "sha256": hashlib.sha256(part.data).hexdigest(),
                }
            )
    payload = {
        "max_output_tokens": request.max_output_tokens,
        "model_id": request.model_id,
        "parts": parts,
        "system_text": request.system_text,
        "temperature": request.temperature,
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _utf8_token_estimate(text: str) -> int:
    return (len(text.encode("utf-8")) + 3) // 4


def image_tile_tokens(data: bytes) -> int:
    """Tile-model token count for one image: 85 base + 170 per 512px tile
    after the provider's documented resize (fit in 2048, shortest side <= 768)."""
    with Image.open(io.BytesIO(data)) as img:
        width, height = img.size
    longest = max(width, height)
    if longest > 2048:
        scale = 2048 / longest
        width, height = width * scale, height * scale
    shortest = min(width, height)
    if shortest > 768:
        scale = 768 / shortest
        width, height = width * scale, height * scale
    tiles = math.ceil(width / 512) * math.ceil(height / 512)
    return 85 + 170 * tiles


def token_estimate(request: ChatRequest, model_spec: ModelSpec | None = None) -> tuple[int, int]:
    """Estimate (text_tokens, image_tokens); image tokens include the
    model's reported-count multiplier, mirroring what the API would bill."""
    text_tokens = _utf8_token_estimate(request.system_text) if request.system_text else 0
    image_tokens = 0
    for part in request.parts:
        if isinstance(part, TextPart):
            text_tokens += _utf8_token_estimate(part.text)
        else:
            image_tokens += image_tile_tokens(part.data)
    if model_spec is not None and image_tokens:
        image_tokens = math.ceil(image_tokens * model_spec.image_token_multiplier)
    return text_tokens, image_tokens


# ---------------------------------------------------------------------------
# execution contexts and clients

_live_semaphore = threading.BoundedSemaphore(4)


def configure_live_concurrency(limit: int) -> None:
    """Set the global in-flight cap for live backend calls."""
    global _live_semaphore
    if limit < 1:
        raise ValueError("concurrency limit must be >= 1")
    _live_semaphore = threading.BoundedSemaphore(limit)


@dataclass(frozen=True)
class MockContext:
    """What a scripted mock may look at: the document and the OCR text that
    went into the request, scoped the same way the request was."""

    doc: Document
    page_index: int | None = None  # 0-based; None = whole-document request
    ocr_texts: tuple[str, ...] | None = None
    ocr_texts_by_engine: Mapping[str, tuple[str, ...]] | None = None


class ChatClient(Protocol):
    def complete(
        self,
        request: ChatRequest,
        ctx: MockContext | None = None,
        model_spec: ModelSpec | None = None,
    ) -> ChatResponse: ...


def complete(
    client: ChatClient,
    request: ChatRequest,
    ctx: MockContext | None = None,
    model_spec: ModelSpec | None = None,
) -> ChatResponse:
    """Run one request through a client after a pre-flight context check."""
    if model_spec is not None:
        text_tokens, image_tokens = token_estimate(request, model_spec)
        if text_tokens + image_tokens > model_spec.max_context_tokens:
            raise ContextOverflowError(
                f"estimated {text_tokens + image_tokens} input tokens exceed "
                f"{model_spec.model_id}'s {model_spec.max_context_tokens}-token limit; "
                "use a page-by-page variant"
            )
    return client.complete(request, ctx, model_spec)


def _estimated_usage(request: ChatRequest, text: str, model_spec: ModelSpec | None) -> Usage:
    text_tokens, image_tokens = token_estimate(request, model_spec)
    return Usage(
        llm_input_text_tokens=text_tokens,
        llm_input_image_tokens=image_tokens,
        llm_output_tokens=_utf8_token_estimate(text),
        llm_calls=1,
    )


class MockLlmClient:
    """Applies a registered transformation instead of calling a provider."""

    def __init__(self, name: str, fn: "MockFn"):
        self.name = name
        self.fn = fn

    def complete(self, request, ctx=None, model_spec=None):
        out = self.fn(request, ctx)
        if isinstance(out, ChatResponse):
            return out
        return ChatResponse(
            text=out,
            usage=_estimated_usage(request, out, model_spec),
            finish_reason=FinishReason.STOP,
            usage_is_estimated=True,
        )


def _fixture_path(fixtures_dir: Path, model_id: str, digest: str) -> Path:
    return Path(fixtures_dir) / "llm" / model_id / f"{digest}.json"


class ReplayLlmClient:
    """Answers only from recorded fixtures; a miss is an explicit error."""

    def __init__(self, fixtures_dir: str | Path):
        self.fixtures_dir = Path(fixtures_dir)

    def complete(self, request, ctx=None, model_spec=None):
        digest = canonical_request_digest(request)
        path = _fixture_path(self.fixtures_dir, request.model_id, digest)
        if not path.exists():
            raise FixtureMissingError(f"no LLM fixture for {request.model_id}/{digest}")
        raw = json.loads(path.read_text(encoding="utf-8"))
        return ChatResponse(
            text=raw["text"],
            usage=Usage(**raw["usage"]),
            finish_reason=FinishReason(raw.get("finish_reason", "stop")),
            usage_is_estimated=bool(raw.get("usage_is_estimated", False)),
        )


class RecordingLlmClient:
    """Wraps a live client and persists each response keyed by request digest."""

    def __init__(self, inner: ChatClient, fixtures_dir: str | Path):
        self.inner = inner
        self.fixtures_dir = Path(fixtures_dir)

    def complete(self, request, ctx=None, model_spec=None):
        response = self.inner.complete(request, ctx, model_spec)
        digest = canonical_request_digest(request)
        path = _fixture_path(self.fixtures_dir, request.model_id, digest)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "request_digest": digest,
            "text": response.text,
            "usage": {
                "ocr_calls": response.usage.ocr_calls,
                "llm_input_text_tokens": response.usage.llm_input_text_tokens,
                "llm_input_image_tokens": response.usage.llm_input_image_tokens,
                "llm_output_tokens": response.usage.llm_output_tokens,
                "llm_calls": response.usage.llm_calls,
            },
            "finish_reason": response.finish_reason.value,
            "usage_is_estimated": response.usage_is_estimated,
        }
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)
        return response


class OpenAiChatClient:
    """Minimal chat-completions client (OPENAI_API_KEY)."""

    def __init__(
        self,
        api_key: str | None = None,
        base_url: str = "https://api.openai.com/v1",
        retry: RetryPolicy = RetryPolicy(),
        timeout: float = 120.0,
    ):
        self.api_key = api_key or os.environ.get("OPENAI_API_KEY", "")
        self.base_url = base_url.rstrip("/")
        self.retry = retry
        self.timeout = timeout
        if not self.api_key:
            raise LlmError("OPENAI_API_KEY is not set")

    def _messages(self, request: ChatRequest) -> list[dict]:
        content = []
        for part in request.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                b64 = base64.b64encode(part.data).decode("ascii")
                content.append(
                    {
                        "type": "image_url",
                        "image_url": {"url": f"data:{part.media_type};base64,{b64}"},
                    }
                )
        messages = []
        if request.system_text:
            messages.append({"role": "system", "content": request.system_text})
        messages.append({"role": "user", "content": content})
        return messages

    def complete(self, request, ctx=None, model_spec=None):
        body = {
            "model": request.model_id,
            "messages": self._messages(request),
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }

        def _call():
            with _live_semaphore:
                resp = requests.post(
                    f"{self.base_url}/chat/completions",
                    headers={"Authorization": f"Bearer {self.api_key}"},
                    json=body,
                    timeout=self.timeout,
                )
            if resp.status_code == 429 or resp.status_code >= 500:
                raise _RetryableHttpError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            if resp.status_code != 200:
                raise LlmError(f"HTTP {resp.status_code}: {resp.text[:500]}")
            return resp.json()

        data = call_with_retries(
            _call, self.retry, retryable=lambda exc: isinstance(exc, _RetryableHttpError)
        )
        choice = data["choices"][0]
        text = choice["message"].get("content") or ""
        finish = choice.get("finish_reason", "stop")
        if finish not in FinishReason._value2member_map_:
            finish = "error"
        usage, estimated = self._usage_from(data.get("usage"), request, text, model_spec)
        return ChatResponse(
            text=text,
            usage=usage,
            finish_reason=FinishReason(finish),
            usage_is_estimated=estimated,
        )

    def _usage_from(self, raw, request, text, model_spec) -> tuple[Usage, bool]:
        if not raw:
            return _estimated_usage(request, text, model_spec), True
        prompt = int(raw.get("prompt_tokens", 0))
        completion = int(raw.get("completion_tokens", 0))
        # the API reports one prompt total; carve out the image share with the
        # tile model so image-heavy methods are priced as image input
        _, image_estimate = token_estimate(request, model_spec)
        image_tokens = min(image_estimate, prompt)
        return (
            Usage(
                llm_input_text_tokens=prompt - image_tokens,
                llm_input_image_tokens=image_tokens,
                llm_output_tokens=completion,
                llm_calls=1,
            ),
            False,
        )


class _RetryableHttpError(LlmError):
    pass


# ---------------------------------------------------------------------------
# scriptable mocks

MockFn = Callable[[ChatRequest, MockContext | None], "str | ChatResponse"]

MOCK_REGISTRY: dict[str, MockFn] = {}


def register_mock(name: str):
    def deco(fn: MockFn) -> MockFn:
        MOCK_REGISTRY[name] = fn
        return fn

    return deco


def build_mock_client(name: str) -> MockLlmClient:
    if name not in MOCK_REGISTRY:
        raise LlmError(f"unknown mock '{name}'; registered: {sorted(MOCK_REGISTRY)}")
    return MockLlmClient(name, MOCK_REGISTRY[name])


def _require_ctx(ctx: MockContext | None) -> MockContext:
    if ctx is None:
        raise LlmError("this mock needs a request context")
    return ctx


def _scope_ocr(ctx: MockContext) -> str:
    if ctx.ocr_texts is None:
        raise LlmError("mock context has no OCR text")
    if ctx.page_index is None:
        return join_pages(ctx.ocr_texts)
    return ctx.ocr_texts[ctx.page_index]


@register_mock("parrot")
def _parrot(request, ctx):
    """Returns the OCR text it was given, untouched."""
    return _scope_ocr(_require_ctx(ctx))


@register_mock("perfect")
def _perfect(request, ctx):
    """Returns the ground truth for the request scope."""
    ctx = _require_ctx(ctx)
    if ctx.page_index is None:
        return ctx.doc.marked_ground_truth()
    return ctx.doc.pages[ctx.page_index].ground_truth


@register_mock("refuser")
def _refuser(request, ctx):
    return "Sorry, but I can't answer that..."


def _split_tokens(text: str) -> list[str]:
    # keep whitespace runs as their own tokens so reassembly is exact
    return re.split(r"(\s+)", text)


@register_mock("witness_invert")
def _witness_invert(request, ctx):
    """Models the single-image extrapolation mechanism: learn word fixes by
    comparing page 1's OCR against page 1's image (ground truth here), then
    apply those fixes to every page of the OCR text."""
    ctx = _require_ctx(ctx)
    if ctx.ocr_texts is None:
        raise LlmError("witness_invert needs OCR text")
    truth_tokens = _split_tokens(ctx.doc.pages[0].ground_truth)
    ocr_tokens = _split_tokens(ctx.ocr_texts[0])
    fixes: dict[str, str] = {}
    if len(truth_tokens) == len(ocr_tokens):
        for seen, truth in zip(ocr_tokens, truth_tokens):
            if seen != truth and seen.strip():
                fixes[seen] = truth

    def fix_page(text: str) -> str:
        return "".join(fixes.get(tok, tok) for tok in _split_tokens(text))

    fixed = [fix_page(t) for t in ctx.ocr_texts]
    if ctx.page_index is None:
        return join_pages(fixed)
    return fixed[ctx.page_index]


DEGRADE_SCALE_CHARS = 60_000


@register_mock("degrade")
def _degrade(request, ctx):
    """A transcriber whose quality decays with prompt length: starts from the
    ground truth and corrupts a fraction of characters proportional to the
    request's input size."""
    ctx = _require_ctx(ctx)
    input_chars = len(request.system_text) + sum(
        len(p.text) for p in request.parts if isinstance(p, TextPart)
    )
    if ctx.page_index is None:
        base = ctx.doc.marked_ground_truth()
    else:
        base = ctx.doc.pages[ctx.page_index].ground_truth
    fraction = min(1.0, input_chars / DEGRADE_SCALE_CHARS)
    count = round(fraction * len(base))
    seed = int.from_bytes(
        hashlib.sha256(f"{ctx.doc.doc_id}:{ctx.page_index}".encode()).digest()[:8], "big"
    )
    rng = random.Random(seed)
    chars = list(base)
    eligible = [i for i, c in enumerate(chars) if c not in "\n[]"]
    for i in rng.sample(eligible, min(count, len(eligible))):
        chars[i] = "#"
    return "".join(chars)


CATASTROPHE_KINDS = ("refusal", "repetition", "garble")


def is_catastrophe_target(doc_id: str, rate_denominator: int = 10) -> str | None:
    """Deterministic selection of ~1/denominator documents, with the
    catastrophe kind cycling across selected documents."""
    digest = int.from_bytes(hashlib.sha256(doc_id.encode()).digest()[:8], "big")
    if digest % rate_denominator != 0:
        return None
    return CATASTROPHE_KINDS[(digest // rate_denominator) % len(CATASTROPHE_KINDS)]


@register_mock("inject_catastrophes")
def _inject_catastrophes(request, ctx):
    """Parrots the OCR text, except on ~10% of documents where it emits one
    of the classic failure modes (refusal, runaway repetition, garbage)."""
    ctx = _require_ctx(ctx)
    scope = _scope_ocr(ctx)
    kind = is_catastrophe_target(ctx.doc.doc_id)
    if kind is None:
        return scope
    if kind == "refusal":
        return "Sorry, but I can't answer that..."
    if kind == "repetition":
        return scope[:40] + ("the cat sat on the mat. " * 6)
    seed = int.from_bytes(hashlib.sha256(ctx.doc.doc_id.encode()).digest()[8:16], "big")
    rng = random.Random(seed)
    chars = list(scope)
    eligible = [i for i, c in enumerate(chars) if c != "\n"]
    for i in rng.sample(eligible, int(0.6 * len(eligible))):
        chars[i] = "#"
    return "".join(chars)


@register_mock("consensus")
def _consensus(request, ctx):
    """Majority vote per token position across the three engine outputs."""
    ctx = _require_ctx(ctx)
    if not ctx.ocr_texts_by_engine:
        raise LlmError("consensus mock needs per-engine OCR text")
    scoped: list[list[str]] = []
    for engine in sorted(ctx.ocr_texts_by_engine):
        texts = ctx.ocr_texts_by_engine[engine]
        text = join_pages(texts) if ctx.page_index is None else texts[ctx.page_index]
        scoped.append(_split_tokens(text))
    first = scoped[0]
    if any(len(tokens) != len(first) for tokens in scoped):
        return "".join(first)
    voted = []
    for position, token in enumerate(first):
        candidates = [tokens[position] for tokens in scoped]
        counts = {c: candidates.count(c) for c in candidates}
        best = max(counts.items(), key=lambda kv: (kv[1], kv[0] == token))
        voted.append(best[0])
    return "".join(voted)
