"""Price book and per-run cost accounting (exact arithmetic)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping

from .model import ModelSpec, Usage
from .money import Money, as_money


class MissingPriceError(KeyError):
    pass


def _as_fraction(value) -> Fraction:
    if isinstance(value, str) and "/" in value:
        num, den = value.split("/", 1)
        return Fraction(int(num), int(den))
    return as_money(value)


@dataclass(frozen=True)
class PriceBook:
    ocr_price_per_1k_calls: Mapping[str, Money]
    model_specs: Mapping[str, ModelSpec]

    def ocr_price(self, engine: str) -> Money:
        try:
            return self.ocr_price_per_1k_calls[engine]
        except KeyError as exc:
            raise MissingPriceError(f"no OCR price for engine '{engine}'") from exc

    def model_spec(self, model_id: str) -> ModelSpec:
        try:
            return self.model_specs[model_id]
        except KeyError as exc:
            raise MissingPriceError(f"no model spec for '{model_id}'") from exc


def default_price_book() -> PriceBook:
    """List prices for the supported commercial engines and models.

    gpt-4o-mini's image-token multiplier is pinned to the input-price ratio:
    the API inflates reported image token counts so a given image costs the
    same on both models.
    """
    return PriceBook(
        ocr_price_per_1k_calls={
            "azure": as_money("1.00"),
            "google": as_money("1.50"),
            "textract": as_money("1.50"),
            # simulated engine billed like the cheapest real one so offline
            # pipelines still produce meaningful cost ratios
            "synthetic": as_money("1.00"),
        },
        model_specs={
            "gpt-4o": ModelSpec(
                model_id="gpt-4o",
                input_token_price_per_million=as_money("2.50"),
                output_token_price_per_million=as_money("10.00"),
                image_token_multiplier=Fraction(1),
                max_context_tokens=128_000,
            ),
            "gpt-4o-mini": ModelSpec(
                model_id="gpt-4o-mini",
                input_token_price_per_million=as_money("0.15"),
                output_token_price_per_million=as_money("0.60"),
                image_token_multiplier=Fraction(50, 3),  # 2.50 / 0.15
                max_context_tokens=128_000,
            ),
        },
    )


def load_price_book(path: str | Path) -> PriceBook:
    """Price book from JSON config; fields mirror the defaults."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    ocr = {k: as_money(v) for k, v in raw.get("ocr_price_per_1k_calls", {}).items()}
    models = {}
    for model_id, spec in raw.get("models", {}).items():
        models[model_id] = ModelSpec(
            model_id=model_id,
            input_token_price_per_million=as_money(spec["input"]),
            output_token_price_per_million=as_money(spec["output"]),
            image_token_multiplier=_as_fraction(spec.get("image_multiplier", 1)),
            max_context_tokens=int(spec.get("max_context_tokens", 128_000)),
        )
    return PriceBook(ocr_price_per_1k_calls=ocr, model_specs=models)


def write_default_price_book(path: str | Path) -> None:
    payload = {
        "ocr_price_per_1k_calls": {"azure": "1.00", "google": "1.50", "textract": "1.50"},
        "models": {
            "gpt-4o": {"input": "2.50", "output": "10.00", "image_multiplier": "1", "max_context_tokens": 128000},
            "gpt-4o-mini": {"input": "0.15", "output": "0.60", "image_multiplier": "50/3", "max_context_tokens": 128000},
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_cost(
    usage: Usage,
    engines: Iterable[str],
    price_book: PriceBook,
    model_id: str | None = None,
) -> Money:
    """Exact dollar cost of a usage record.

    `usage.ocr_calls` counts calls per engine; each engine in `engines` is
    billed that many calls. Image token counts are already multiplier-scaled
    (by the provider's reported usage or by the estimator), so they price at
    the plain input rate.
    """
    total = Fraction(0)
    if usage.ocr_calls:
        for engine in engines:
            total += price_book.ocr_price(engine) * usage.ocr_calls / 1000
    if usage.llm_input_text_tokens or usage.llm_input_image_tokens or usage.llm_output_tokens:
        if model_id is None:
            raise MissingPriceError("LLM usage present but no model_id given")
        spec = price_book.model_spec(model_id)
        input_tokens = usage.llm_input_text_tokens + usage.llm_input_image_tokens
        total += input_tokens * spec.input_token_price_per_million / 1_000_000
        total += usage.llm_output_tokens * spec.output_token_price_per_million / 1_000_000
    return total
