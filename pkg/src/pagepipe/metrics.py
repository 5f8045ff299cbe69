"""Character-level scoring.

Edit distance is unit-cost Levenshtein over Unicode scalar values. The
distance-only path strips common affixes and runs a band-doubling dynamic
program (exact; fast when the strings are close, which transcripts are).
The alignment path keeps the full matrix and emits a replayable op list,
which page segmentation uses to cut hypothesis text at ground-truth page
boundaries when page-break markers are missing or miscounted.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from typing import Sequence

from .model import Document, TranscriptionResult, _MARKER_RE


class UndefinedMetricError(ValueError):
    """A metric was requested where its denominator is empty or nonpositive."""


# (op, ref_index, hyp_index); replaying ops over ref reproduces hyp exactly
EditOp = tuple[str, int, int]

MATCH = "match"
SUBSTITUTE = "substitute"
INSERT = "insert"
DELETE = "delete"


@dataclass(frozen=True)
class EditDistanceResult:
    distance: int
    reference_length: int
    alignment: tuple[EditOp, ...] | None = None


@dataclass(frozen=True)
class NormalizationConfig:
    """Text normalization applied to both sides before CER."""

    strip_page_markers: bool = True
    normalize_crlf: bool = True
    unicode_nfc: bool = True
    collapse_whitespace: bool = False


DEFAULT_NORMALIZATION = NormalizationConfig()

_WS_RE = re.compile(r"\s+")


class SegmentationMode(str, Enum):
    MARKER = "marker"
    ALIGNMENT_FALLBACK = "alignment_fallback"


def normalize(text: str, config: NormalizationConfig = DEFAULT_NORMALIZATION) -> str:
    if config.normalize_crlf:
        text = text.replace("\r\n", "\n").replace("\r", "\n")
    if config.strip_page_markers:
        text = _MARKER_RE.sub("\n", text)
    if config.unicode_nfc:
        text = unicodedata.normalize("NFC", text)
    if config.collapse_whitespace:
        text = _WS_RE.sub(" ", text).strip()
    return text


def _common_affix_lengths(a: str, b: str) -> tuple[int, int]:
    limit = min(len(a), len(b))
    prefix = 0
    while prefix < limit and a[prefix] == b[prefix]:
        prefix += 1
    suffix = 0
    while suffix < limit - prefix and a[len(a) - 1 - suffix] == b[len(b) - 1 - suffix]:
        suffix += 1
    return prefix, suffix


def _myers_distance(pattern: str, text: str) -> int:
    """Bit-parallel Levenshtein distance (Myers/Hyyrö).

    The pattern is encoded as per-character position bitmasks in one big
    integer, so each text character advances a whole DP column with a handful
    of word-wide operations."""
    m = len(pattern)
    full = (1 << m) - 1
    msb = 1 << (m - 1)
    position_masks: dict[str, int] = {}
    for index, char in enumerate(pattern):
        position_masks[char] = position_masks.get(char, 0) | (1 << index)
    vp = full
    vn = 0
    score = m
    for char in text:
        eq = position_masks.get(char, 0)
        d0 = ((((eq & vp) + vp) ^ vp) | eq | vn) & full
        hp = vn | (full & ~(d0 | vp))
        hn = vp & d0
        if hp & msb:
            score += 1
        elif hn & msb:
            score -= 1
        shifted = ((hp << 1) | 1) & full
        vp = ((hn << 1) & full) | (full & ~(d0 | shifted))
        vn = shifted & d0
    return score


def _distance(a: str, b: str) -> int:
    if a == b:
        return 0
    prefix, suffix = _common_affix_lengths(a, b)
    a = a[prefix: len(a) - suffix]
    b = b[prefix: len(b) - suffix]
    if not a:
        return len(b)
    if not b:
        return len(a)
    if len(a) > len(b):
        a, b = b, a
    return _myers_distance(a, b)


def _alignment_ops(ref: str, hyp: str) -> list[EditOp]:
    prefix, suffix = _common_affix_lengths(ref, hyp)
    core_ref = ref[prefix: len(ref) - suffix]
    core_hyp = hyp[prefix: len(hyp) - suffix]
    n, m = len(core_ref), len(core_hyp)

    row0 = list(range(m + 1))
    matrix = [row0]
    for i in range(1, n + 1):
        prev = matrix[i - 1]
        cur = [i] + [0] * m
        ci = core_ref[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1] + (ci != core_hyp[j - 1])
            up = prev[j] + 1
            if up < best:
                best = up
            left = cur[j - 1] + 1
            if left < best:
                best = left
            cur[j] = best
        matrix.append(cur)

    core_ops: list[EditOp] = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            diag = matrix[i - 1][j - 1]
            same = core_ref[i - 1] == core_hyp[j - 1]
            if matrix[i][j] == diag + (0 if same else 1):
                core_ops.append((MATCH if same else SUBSTITUTE, i - 1, j - 1))
                i -= 1
                j -= 1
                continue
        if i > 0 and matrix[i][j] == matrix[i - 1][j] + 1:
            core_ops.append((DELETE, i - 1, j))
            i -= 1
            continue
        core_ops.append((INSERT, i, j - 1))
        j -= 1
    core_ops.reverse()

    ops: list[EditOp] = [(MATCH, k, k) for k in range(prefix)]
    ops.extend((op, r + prefix, h + prefix) for op, r, h in core_ops)
    ref_tail = len(ref) - suffix
    hyp_tail = len(hyp) - suffix
    ops.extend((MATCH, ref_tail + k, hyp_tail + k) for k in range(suffix))
    return ops


def edit_distance(ref: str, hyp: str, with_alignment: bool = False) -> EditDistanceResult:
    """Minimal unit-cost edit distance; optionally with a replayable traceback."""
    if with_alignment:
        ops = _alignment_ops(ref, hyp)
        distance = sum(1 for op, _, _ in ops if op != MATCH)
        return EditDistanceResult(distance, len(ref), tuple(ops))
    return EditDistanceResult(_distance(ref, hyp), len(ref))


def replay_alignment(ref: str, hyp: str, ops: Sequence[EditOp]) -> str:
    """Rebuild the hypothesis from the reference via the op list (sanity check)."""
    out: list[str] = []
    for op, r, h in ops:
        if op == MATCH:
            out.append(ref[r])
        elif op in (SUBSTITUTE, INSERT):
            out.append(hyp[h])
    return "".join(out)


def cer(
    ref: str,
    hyp: str,
    config: NormalizationConfig = DEFAULT_NORMALIZATION,
) -> float:
    """Document-level character error rate: distance / |normalized reference|."""
    ref_n = normalize(ref, config)
    hyp_n = normalize(hyp, config)
    if not ref_n:
        raise UndefinedMetricError("CER undefined: normalized reference is empty")
    return _distance(ref_n, hyp_n) / len(ref_n)


def segment_pages(hyp: str, gt_pages: Sequence[str]) -> tuple[list[str], SegmentationMode]:
    """Cut hypothesis text into per-page segments.

    If the hypothesis carries exactly the expected number of page-break
    markers, cut right after each marker (segments keep their trailing
    marker, so concatenating the segments always reproduces the input
    byte-for-byte). Otherwise fall back to a global character alignment
    against the LF-joined ground-truth pages and cut at the alignment image
    of each page start.
    """
    if not gt_pages:
        raise ValueError("segment_pages requires at least one ground-truth page")
    n_pages = len(gt_pages)
    markers = list(_MARKER_RE.finditer(hyp))
    if len(markers) == n_pages - 1:
        cuts = [m.end() for m in markers]
        segments = _cut_at(hyp, cuts)
        return segments, SegmentationMode.MARKER

    joined = "\n".join(gt_pages)
    boundaries = []
    offset = 0
    for page in gt_pages[:-1]:
        offset += len(page) + 1
        boundaries.append(offset)
    ops = _alignment_ops(joined, hyp)
    cuts = _map_ref_positions(ops, boundaries, len(hyp))
    return _cut_at(hyp, cuts), SegmentationMode.ALIGNMENT_FALLBACK


def _cut_at(text: str, cuts: Sequence[int]) -> list[str]:
    segments = []
    start = 0
    for cut in cuts:
        segments.append(text[start:cut])
        start = cut
    segments.append(text[start:])
    return segments


def _map_ref_positions(ops: Sequence[EditOp], boundaries: Sequence[int], hyp_len: int) -> list[int]:
    """Map reference positions to hypothesis positions along the alignment path.

    Each boundary is cut at the first moment the walk has consumed exactly
    that many reference characters, so insertions sitting on a boundary land
    in the following segment.
    """
    cuts: list[int] = []
    bi = 0
    r = h = 0
    for op, _, _ in ops:
        while bi < len(boundaries) and r == boundaries[bi]:
            cuts.append(h)
            bi += 1
        if op == MATCH or op == SUBSTITUTE:
            r += 1
            h += 1
        elif op == DELETE:
            r += 1
        else:
            h += 1
    while bi < len(boundaries):
        cuts.append(h if r >= boundaries[bi] else hyp_len)
        bi += 1
    return cuts


def cer_after_first(
    doc: Document,
    result: TranscriptionResult,
    config: NormalizationConfig = DEFAULT_NORMALIZATION,
) -> tuple[float, SegmentationMode]:
    """Out-of-sample CER over pages 2..n only."""
    if doc.page_count < 2:
        raise UndefinedMetricError(
            f"{doc.doc_id}: pages-after-first CER needs at least 2 pages"
        )
    gt_pages = doc.ground_truth_pages()
    segments, mode = segment_pages(result.text, gt_pages)
    ref_tail = "\n".join(gt_pages[1:])
    hyp_tail = "".join(segments[1:])
    return cer(ref_tail, hyp_tail, config), mode


def relative_improvement(cer_ocr: float, cer_method: float) -> float:
    """Baseline-relative improvement; negative when the method is worse."""
    if cer_ocr <= 0:
        raise UndefinedMetricError("relative improvement undefined for baseline CER <= 0")
    return (cer_ocr - cer_method) / cer_ocr


def cost_normalized_improvement(rel_imp: float, cost_method, cost_ocr) -> float:
    """Relative improvement divided by the method/baseline cost ratio."""
    if cost_ocr <= 0 or cost_method <= 0:
        raise UndefinedMetricError("cost-normalized improvement needs positive costs")
    return rel_imp / float(cost_method / cost_ocr)


def round_half_away(value: float, places: int) -> float:
    """Display rounding with ties away from zero (matches printed tables)."""
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))
