import pytest
from hypothesis import given, settings, strategies as st

from pagepipe.guard import GuardConfig, apply_guard, has_trailing_repetition, is_refusal
from pagepipe.model import GuardAction

OCR = "the quick brown fox\njumped over the lazy dog\nand ran far away home"


class TestRefusal:
    def test_canonical_refusal_string(self):
        final, action = apply_guard(OCR, "Sorry, but I can't answer that.", "stop", GuardConfig())
        assert action is GuardAction.FALLBACK_REFUSAL
        assert final == OCR

    def test_case_insensitive_after_trim(self):
        _, action = apply_guard(OCR, "  SORRY, BUT I CAN'T ANSWER that request.", "stop", GuardConfig())
        assert action is GuardAction.FALLBACK_REFUSAL

    def test_is_refusal_prefix_only(self):
        assert not is_refusal("the text mentions sorry, but i can't answer later on")


class TestRepetition:
    def test_trailing_loop_detected(self):
        text = OCR[:30] + ("the cat sat on the mat. " * 6)
        _, action = apply_guard(OCR, text, "stop", GuardConfig())
        assert action is GuardAction.FALLBACK_REPETITION

    def test_short_tail_repetition_below_thresholds_ignored(self):
        # 18 trailing chars cannot host a 20-char block repeated 5 times;
        # longer short-block loops compose into qualifying larger blocks
        assert not has_trailing_repetition(OCR + "ab " * 6, 20, 5)
        assert has_trailing_repetition(OCR + "ab " * 40, 20, 5)

    def test_four_repeats_not_enough(self):
        block = "this block is long enough. "
        assert not has_trailing_repetition("x" + block * 4, 20, 5)
        assert has_trailing_repetition("x" + block * 5, 20, 5)

    def test_truncated_output_with_trailing_repetition(self):
        block = "another long repeated block here. "
        text = OCR[:40] + block * 2
        _, action = apply_guard(OCR, text, "length", GuardConfig())
        assert action is GuardAction.FALLBACK_REPETITION
        # same text at finish_reason=stop needs the full repeat count
        _, action = apply_guard(OCR, text, "stop", GuardConfig())
        assert action is not GuardAction.FALLBACK_REPETITION


class TestDivergence:
    def test_garbled_output_falls_back(self):
        garbled = "#" * len(OCR)
        final, action = apply_guard(OCR, garbled, "stop", GuardConfig())
        assert action is GuardAction.FALLBACK_CER_DIVERGENCE
        assert final == OCR

    def test_small_corrections_pass_through(self):
        corrected = OCR.replace("quick", "quack")
        final, action = apply_guard(OCR, corrected, "stop", GuardConfig())
        assert action is GuardAction.NONE
        assert final == corrected

    def test_monotone_threshold(self):
        # raising the threshold never converts a pass into a divergence fallback
        hyp = OCR[: len(OCR) // 2] + "#" * (len(OCR) // 2)
        low = GuardConfig(cer_divergence_threshold=0.1)
        high = GuardConfig(cer_divergence_threshold=2.0)
        _, action_low = apply_guard(OCR, hyp, "stop", low)
        _, action_high = apply_guard(OCR, hyp, "stop", high)
        assert action_low is GuardAction.FALLBACK_CER_DIVERGENCE
        assert action_high is GuardAction.NONE

    @given(st.text(alphabet="ab #\n", min_size=1, max_size=80))
    @settings(max_examples=60)
    def test_never_fires_on_identical_text(self, text):
        final, action = apply_guard(text, text, "stop", GuardConfig())
        assert action is GuardAction.NONE
        assert final == text


class TestConfig:
    def test_threshold_must_be_positive(self):
        with pytest.raises(ValueError):
            GuardConfig(cer_divergence_threshold=0.0)

    def test_repetition_params_floor(self):
        with pytest.raises(ValueError):
            GuardConfig(repetition_block_min_chars=1)
        with pytest.raises(ValueError):
            GuardConfig(repetition_min_repeats=1)

    def test_empty_ocr_text_never_divergence(self):
        # no reference to compare against: divergence check is skipped
        _, action = apply_guard("", "some new text output", "stop", GuardConfig())
        assert action is GuardAction.NONE
