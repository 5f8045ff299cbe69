"""OCR engines behind one page-level interface.

Live clients cover Azure AI Vision, Google Cloud Vision and Amazon Textract.
Offline work uses the synthetic engine (a pre-built source_id -> text oracle)
or the replay engine (fixtures recorded from live runs, keyed by image
content hash, so renames don't invalidate them).
"""

from __future__ import annotations

import base64
import datetime
import hashlib
import hmac
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol

import requests

from .backoff import RetryPolicy, call_with_retries
from . import llm as _llm
from .model import Document, Page

LIVE_ENGINES = ("azure", "google", "textract")
ENGINES = LIVE_ENGINES + ("synthetic", "replay")


class OcrError(RuntimeError):
    pass


class CredentialError(OcrError):
    pass


class BackendError(OcrError):
    pass


class FixtureMissingError(OcrError):
    pass


@dataclass(frozen=True)
class OcrPageOutput:
    source_id: str
    text: str
    engine: str
    latency_ms: int = 0
    raw_response_ref: str | None = None


class OcrEngine(Protocol):
    engine_id: str

    def transcribe_page(self, page: Page, image_path: Path | None) -> OcrPageOutput: ...


def image_fixture_key(image_bytes: bytes) -> str:
    return hashlib.sha256(image_bytes).hexdigest()


def _fixture_path(fixtures_dir: Path, engine_id: str, key: str) -> Path:
    return Path(fixtures_dir) / "ocr" / engine_id / f"{key}.json"


def _read_image(page: Page, image_path: Path | None) -> bytes:
    if image_path is None:
        raise OcrError(f"page {page.source_id}: no image path resolved")
    try:
        return Path(image_path).read_bytes()
    except OSError as exc:
        raise OcrError(f"page {page.source_id}: cannot read image {image_path}: {exc}") from exc


class SyntheticOcr:
    """Deterministic engine backed by a source_id -> text oracle table."""

    engine_id = "synthetic"

    def __init__(self, table: Mapping[str, str]):
        self.table = dict(table)

    def transcribe_page(self, page: Page, image_path: Path | None = None) -> OcrPageOutput:
        try:
            text = self.table[page.source_id]
        except KeyError as exc:
            raise FixtureMissingError(f"oracle table has no entry for {page.source_id}") from exc
        return OcrPageOutput(source_id=page.source_id, text=text, engine=self.engine_id)


class ReplayOcr:
    """Answers only from recorded fixtures; never falls through to live."""

    def __init__(self, fixtures_dir: str | Path, engine_id: str = "replay"):
        self.fixtures_dir = Path(fixtures_dir)
        self.engine_id = engine_id

    def transcribe_page(self, page: Page, image_path: Path | None) -> OcrPageOutput:
        key = image_fixture_key(_read_image(page, image_path))
        path = _fixture_path(self.fixtures_dir, self.engine_id, key)
        if not path.exists():
            raise FixtureMissingError(
                f"fixture missing for {self.engine_id} page {page.source_id} ({key})"
            )
        raw = json.loads(path.read_text(encoding="utf-8"))
        return OcrPageOutput(
            source_id=page.source_id,
            text=raw["text"],
            engine=self.engine_id,
            latency_ms=int(raw.get("latency_ms", 0)),
            raw_response_ref=str(path),
        )


class RecordingOcr:
    """Wraps a live engine and persists each response by image content hash."""

    def __init__(self, inner: OcrEngine, fixtures_dir: str | Path):
        self.inner = inner
        self.engine_id = inner.engine_id
        self.fixtures_dir = Path(fixtures_dir)

    def transcribe_page(self, page: Page, image_path: Path | None) -> OcrPageOutput:
        image_bytes = _read_image(page, image_path)
        output = self.inner.transcribe_page(page, image_path)
        key = image_fixture_key(image_bytes)
        path = _fixture_path(self.fixtures_dir, self.engine_id, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "text": output.text,
            "latency_ms": output.latency_ms,
            "raw_response": output.raw_response_ref,
            "engine": self.engine_id,
            "api_version": getattr(self.inner, "api_version", None),
        }
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)
        return output


def _require_env(name: str) -> str:
    value = os.environ.get(name, "")
    if not value:
        raise CredentialError(f"environment variable {name} is not set")
    return value


def _is_retryable_http(exc: Exception) -> bool:
    return isinstance(exc, _RetryableHttpError)


class _RetryableHttpError(BackendError):
    pass


def _checked(resp: requests.Response) -> dict:
    if resp.status_code == 429 or resp.status_code >= 500:
        raise _RetryableHttpError(f"HTTP {resp.status_code}: {resp.text[:200]}")
    if resp.status_code in (401, 403):
        raise CredentialError(f"HTTP {resp.status_code}: {resp.text[:200]}")
    if resp.status_code >= 400:
        raise BackendError(f"HTTP {resp.status_code}: {resp.text[:500]}")
    return resp.json()


class AzureOcr:
    """Azure AI Vision Read (AZURE_VISION_KEY / AZURE_VISION_ENDPOINT)."""

    engine_id = "azure"
    api_version = "2024-02-01"

    def __init__(self, retry: RetryPolicy = RetryPolicy(), timeout: float = 60.0):
        self.key = _require_env("AZURE_VISION_KEY")
        self.endpoint = _require_env("AZURE_VISION_ENDPOINT").rstrip("/")
        self.retry = retry
        self.timeout = timeout

    def transcribe_page(self, page: Page, image_path: Path | None) -> OcrPageOutput:
        image_bytes = _read_image(page, image_path)
        url = (
            f"{self.endpoint}/computervision/imageanalysis:analyze"
            f"?api-version={self.api_version}&features=read"
        )

        def _call():
            with _llm._live_semaphore:
                started = time.monotonic()
                resp = requests.post(
                    url,
                    headers={
                        "Ocp-Apim-Subscription-Key": self.key,
                        "Content-Type": "application/octet-stream",
                    },
                    data=image_bytes,
                    timeout=self.timeout,
                )
            return _checked(resp), int((time.monotonic() - started) * 1000)

        data, latency_ms = call_with_retries(_call, self.retry, retryable=_is_retryable_http)
        lines = []
        for block in data.get("readResult", {}).get("blocks", []):
            for line in block.get("lines", []):
                poly = line.get("boundingPolygon") or [{}]
                lines.append(
                    {"text": line.get("text", ""), "y": poly[0].get("y", 0), "x": poly[0].get("x", 0)}
                )
        text = "\n".join(self._ordered(lines))
        return OcrPageOutput(page.source_id, text, self.engine_id, latency_ms)

    @staticmethod
    def _ordered(lines: list[dict]) -> list[str]:
        indexed = sorted(enumerate(lines), key=lambda it: (it[1]["y"], it[1]["x"], it[0]))
        return [line["text"] for _, line in indexed]


class GoogleVisionOcr:
    """Google Cloud Vision document text detection (GOOGLE_VISION_KEY)."""

    engine_id = "google"

    def __init__(self, retry: RetryPolicy = RetryPolicy(), timeout: float = 60.0):
        self.key = _require_env("GOOGLE_VISION_KEY")
        self.retry = retry
        self.timeout = timeout

    def transcribe_page(self, page: Page, image_path: Path | None) -> OcrPageOutput:
        image_bytes = _read_image(page, image_path)
        body = {
            "requests": [
                {
                    "image": {"content": base64.b64encode(image_bytes).decode("ascii")},
                    "features": [{"type": "DOCUMENT_TEXT_DETECTION"}],
                }
            ]
        }

        def _call():
            with _llm._live_semaphore:
                started = time.monotonic()
                resp = requests.post(
                    f"https://vision.googleapis.com/v1/images:annotate?key={self.key}",
                    json=body,
                    timeout=self.timeout,
                )
            return _checked(resp), int((time.monotonic() - started) * 1000)

        data, latency_ms = call_with_retries(_call, self.retry, retryable=_is_retryable_http)
        response = data.get("responses", [{}])[0]
        if "error" in response:
            raise BackendError(str(response["error"]))
        text = response.get("fullTextAnnotation", {}).get("text", "").rstrip("\n")
        return OcrPageOutput(page.source_id, text, self.engine_id, latency_ms)


class TextractOcr:
    """Amazon Textract DetectDocumentText (AWS_ACCESS_KEY_ID / AWS_SECRET_ACCESS_KEY)."""

    engine_id = "textract"

    def __init__(self, region: str | None = None, retry: RetryPolicy = RetryPolicy(), timeout: float = 60.0):
        self.access_key = _require_env("AWS_ACCESS_KEY_ID")
        self.secret_key = _require_env("AWS_SECRET_ACCESS_KEY")
        self.region = region or os.environ.get("AWS_REGION", "us-east-1")
        self.retry = retry
        self.timeout = timeout

    def _signed_headers(self, body: bytes) -> dict:
        # AWS signature v4, hand-rolled to keep the client dependency-free
        service = "textract"
        host = f"textract.{self.region}.amazonaws.com"
        now = datetime.datetime.now(datetime.timezone.utc)
        amz_date = now.strftime("%Y%m%dT%H%M%SZ")
        datestamp = now.strftime("%Y%m%d")
        payload_hash = hashlib.sha256(body).hexdigest()
        canonical = "\n".join(
            [
                "POST",
                "/",
                "",
                "content-type:application/x-amz-json-1.1",
                f"host:{host}",
                f"x-amz-date:{amz_date}",
                "x-amz-target:Textract.DetectDocumentText",
                "",
                "content-type;host;x-amz-date;x-amz-target",
                payload_hash,
            ]
        )
        scope = f"{datestamp}/{self.region}/{service}/aws4_request"
        to_sign = "\n".join(
            ["AWS4-HMAC-SHA256", amz_date, scope, hashlib.sha256(canonical.encode()).hexdigest()]
        )

        def _hmac(key: bytes, msg: str) -> bytes:
            return hmac.new(key, msg.encode(), hashlib.sha256).digest()

        k_date = _hmac(f"AWS4{self.secret_key}".encode(), datestamp)
        k_region = _hmac(k_date, self.region)
        k_service = _hmac(k_region, service)
        k_signing = _hmac(k_service, "aws4_request")
        signature = hmac.new(k_signing, to_sign.encode(), hashlib.sha256).hexdigest()
        return {
            "Content-Type": "application/x-amz-json-1.1",
            "X-Amz-Date": amz_date,
            "X-Amz-Target": "Textract.DetectDocumentText",
            "Authorization": (
                f"AWS4-HMAC-SHA256 Credential={self.access_key}/{scope}, "
                "SignedHeaders=content-type;host;x-amz-date;x-amz-target, "
                f"Signature={signature}"
            ),
        }

    def transcribe_page(self, page: Page, image_path: Path | None) -> OcrPageOutput:
        image_bytes = _read_image(page, image_path)
        body = json.dumps(
            {"Document": {"Bytes": base64.b64encode(image_bytes).decode("ascii")}}
        ).encode()

        def _call():
            with _llm._live_semaphore:
                started = time.monotonic()
                resp = requests.post(
                    f"https://textract.{self.region}.amazonaws.com/",
                    headers=self._signed_headers(body),
                    data=body,
                    timeout=self.timeout,
                )
            return _checked(resp), int((time.monotonic() - started) * 1000)

        data, latency_ms = call_with_retries(_call, self.retry, retryable=_is_retryable_http)
        lines = [
            {
                "text": block.get("Text", ""),
                "y": block.get("Geometry", {}).get("BoundingBox", {}).get("Top", 0.0),
                "x": block.get("Geometry", {}).get("BoundingBox", {}).get("Left", 0.0),
            }
            for block in data.get("Blocks", [])
            if block.get("BlockType") == "LINE"
        ]
        indexed = sorted(enumerate(lines), key=lambda it: (it[1]["y"], it[1]["x"], it[0]))
        text = "\n".join(line["text"] for _, line in indexed)
        return OcrPageOutput(page.source_id, text, self.engine_id, latency_ms)


def build_engine(
    engine_id: str,
    mode: str = "replay",
    fixtures_dir: str | Path | None = None,
    oracle_table: Mapping[str, str] | None = None,
) -> OcrEngine:
    """Wire up an engine for the requested execution mode."""
    if engine_id == "synthetic":
        if oracle_table is None:
            raise OcrError("synthetic engine needs an oracle table")
        return SyntheticOcr(oracle_table)
    if mode == "replay":
        if fixtures_dir is None:
            raise OcrError("replay mode needs a fixtures directory")
        return ReplayOcr(fixtures_dir, engine_id)
    live: OcrEngine
    if engine_id == "azure":
        live = AzureOcr()
    elif engine_id == "google":
        live = GoogleVisionOcr()
    elif engine_id == "textract":
        live = TextractOcr()
    else:
        raise OcrError(f"unknown OCR engine '{engine_id}'")
    if mode == "record":
        if fixtures_dir is None:
            raise OcrError("record mode needs a fixtures directory")
        return RecordingOcr(live, fixtures_dir)
    return live


def ocr_page(engine: OcrEngine, page: Page, image_path: Path | None) -> OcrPageOutput:
    return engine.transcribe_page(page, image_path)


def ocr_document(
    engine: OcrEngine,
    doc: Document,
    resolve_image,
    max_workers: int = 1,
) -> list[OcrPageOutput]:
    """OCR every page of a document; output order follows page order
    regardless of completion order. Any page failure fails the document."""

    def _one(page: Page) -> OcrPageOutput:
        try:
            return engine.transcribe_page(page, resolve_image(page))
        except OcrError as exc:
            raise OcrError(f"{doc.doc_id} page {page.page_id}: {exc}") from exc

    if max_workers <= 1 or doc.page_count == 1:
        return [_one(page) for page in doc.pages]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(_one, doc.pages))
