"""Catastrophic-output detection with OCR fallback.

Model output that refuses, loops, or diverges wildly from the OCR text it was
asked to correct is discarded in favour of the OCR text, so outliers cannot
drag a method's score below the plain-OCR baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import metrics
from .model import GuardAction
from .strategies import GUARDED, StrategyId

DEFAULT_REFUSAL_PREFIXES = (
    "sorry, but i can't answer",
    "sorry, but i cannot answer",
    "i'm sorry, but i can't",
    "i'm sorry, but i cannot",
    "sorry, i can't",
    "i can't assist with",
    "i cannot assist with",
)


@dataclass(frozen=True)
class GuardConfig:
    cer_divergence_threshold: float = 0.5
    refusal_prefixes: tuple[str, ...] = DEFAULT_REFUSAL_PREFIXES
    repetition_block_min_chars: int = 20
    repetition_min_repeats: int = 5
    # OCR-consuming LLM strategies only; there is nothing to fall back to elsewhere
    enabled_for: frozenset[StrategyId] = field(default=GUARDED)

    def __post_init__(self) -> None:
        if self.cer_divergence_threshold <= 0:
            raise ValueError("cer_divergence_threshold must be > 0")
        if self.repetition_block_min_chars < 2 or self.repetition_min_repeats < 2:
            raise ValueError("repetition detector needs blocks >= 2 chars and >= 2 repeats")

    def applies_to(self, strategy: StrategyId) -> bool:
        return strategy in self.enabled_for


def is_refusal(text: str, prefixes: tuple[str, ...] = DEFAULT_REFUSAL_PREFIXES) -> bool:
    lowered = text.strip().lower()
    return any(lowered.startswith(prefix) for prefix in prefixes)


def has_trailing_repetition(text: str, min_chars: int = 20, min_repeats: int = 5) -> bool:
    """True when the text ends with some block of >= min_chars repeated
    consecutively >= min_repeats times (how runaway loops manifest)."""
    n = len(text)
    largest_block = n // min_repeats
    for size in range(min_chars, largest_block + 1):
        block = text[n - size:]
        repeats = 1
        pos = n - size
        while pos >= size and text[pos - size: pos] == block:
            repeats += 1
            pos -= size
            if repeats >= min_repeats:
                return True
    return False


def apply_guard(
    ocr_text: str,
    llm_text: str,
    finish_reason: str,
    config: GuardConfig = GuardConfig(),
) -> tuple[str, GuardAction]:
    """Return (final_text, action); on any detection the OCR text wins.

    `ocr_text` must be the same scope of text the model received (whole
    document for all-at-once methods, one page for page-by-page).
    """
    if llm_text == ocr_text:
        return ocr_text, GuardAction.NONE

    if is_refusal(llm_text, config.refusal_prefixes):
        return ocr_text, GuardAction.FALLBACK_REFUSAL

    # a truncated response with any trailing repetition is a loop the
    # token limit happened to cut short
    min_repeats = 2 if finish_reason == "length" else config.repetition_min_repeats
    if has_trailing_repetition(llm_text, config.repetition_block_min_chars, min_repeats):
        return ocr_text, GuardAction.FALLBACK_REPETITION

    try:
        divergence = metrics.cer(ocr_text, llm_text)
    except metrics.UndefinedMetricError:
        divergence = None
    if divergence is not None and divergence > config.cer_divergence_threshold:
        return ocr_text, GuardAction.FALLBACK_CER_DIVERGENCE

    return llm_text, GuardAction.NONE
