"""Scoring records, comparison tables, page-count curves and Pareto frontier.

Everything here aggregates immutable run artifacts; charts are written as
plain SVG so report output diffs cleanly in review.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from . import metrics
from .metrics import NormalizationConfig, DEFAULT_NORMALIZATION, SegmentationMode, round_half_away
from .model import Document, Manifest, TranscriptionResult
from .money import Money, to_decimal


class ReportError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# scoring

@dataclass(frozen=True)
class ScoreRecord:
    doc_id: str
    method_id: str
    cer_full: float
    page_count: int
    cer_after_first: float | None = None
    segmentation_mode: SegmentationMode | None = None
    ref_length: int = 0


def score_result(
    doc: Document,
    result: TranscriptionResult,
    pages_after_first: bool = False,
    config: NormalizationConfig = DEFAULT_NORMALIZATION,
) -> ScoreRecord:
    reference = doc.marked_ground_truth()
    cer_full = metrics.cer(reference, result.text, config)
    after = None
    mode = None
    if pages_after_first and doc.page_count >= 2:
        after, mode = metrics.cer_after_first(doc, result, config)
    return ScoreRecord(
        doc_id=doc.doc_id,
        method_id=result.method_id,
        cer_full=cer_full,
        page_count=doc.page_count,
        cer_after_first=after,
        segmentation_mode=mode,
        ref_length=len(metrics.normalize(reference, config)),
    )


def score_run(
    manifest: Manifest,
    results: Sequence[TranscriptionResult],
    pages_after_first: bool = False,
    config: NormalizationConfig = DEFAULT_NORMALIZATION,
) -> list[ScoreRecord]:
    return [
        score_result(manifest.document(result.doc_id), result, pages_after_first, config)
        for result in sorted(results, key=lambda r: r.doc_id)
    ]


def write_scores_csv(records: Sequence[ScoreRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["doc_id", "method_id", "cer_full", "cer_after_first", "segmentation_mode", "page_count"]
        )
        for record in records:
            writer.writerow(
                [
                    record.doc_id,
                    record.method_id,
                    f"{record.cer_full:.12g}",
                    "n/a" if record.cer_after_first is None else f"{record.cer_after_first:.12g}",
                    record.segmentation_mode.value if record.segmentation_mode else "n/a",
                    record.page_count,
                ]
            )


# ---------------------------------------------------------------------------
# run summaries and the baseline-relative comparison table

@dataclass(frozen=True)
class RunSummary:
    """One scored run collapsed to what the comparison table needs."""

    method_id: str
    model_id: str | None
    cer_by_doc: Mapping[str, float]
    cost: Money
    ref_length_by_doc: Mapping[str, int] | None = None
    cost_is_estimated: bool = False

    @property
    def mean_cer(self) -> float:
        values = list(self.cer_by_doc.values())
        return sum(values) / len(values)

    @property
    def weighted_cer(self) -> float:
        """Length-weighted aggregate: total edits over total reference length."""
        if not self.ref_length_by_doc:
            return self.mean_cer
        edits = sum(
            cer * self.ref_length_by_doc[doc_id] for doc_id, cer in self.cer_by_doc.items()
        )
        total = sum(self.ref_length_by_doc[doc_id] for doc_id in self.cer_by_doc)
        return edits / total


def summary_from_scores(
    method_id: str,
    model_id: str | None,
    records: Sequence[ScoreRecord],
    cost: Money,
    cost_is_estimated: bool = False,
) -> RunSummary:
    return RunSummary(
        method_id=method_id,
        model_id=model_id,
        cer_by_doc={r.doc_id: r.cer_full for r in records},
        cost=cost,
        ref_length_by_doc={r.doc_id: r.ref_length for r in records},
        cost_is_estimated=cost_is_estimated,
    )


@dataclass(frozen=True)
class ComparisonRow:
    method_id: str
    model_id: str | None
    cer_method: float
    cer_ocr: float
    rel_imp: float | None
    cost_method: Money
    cost_ocr: Money
    cost_ratio: float
    ri_over_cost: float | None
    cost_is_estimated: bool = False
    # length-weighted aggregate alongside the headline unweighted mean
    cer_method_weighted: float | None = None


def comparison_table(
    runs: Sequence[RunSummary],
    baseline: RunSummary,
    weighted: bool = False,
) -> list[ComparisonRow]:
    """One row per run (baseline included), ordered by ascending cost."""
    baseline_docs = set(baseline.cer_by_doc)
    for run in runs:
        difference = baseline_docs ^ set(run.cer_by_doc)
        if difference:
            raise ReportError(
                f"{run.method_id} scored a different document set than the baseline; "
                f"symmetric difference: {sorted(difference)}"
            )
    cer_ocr = baseline.weighted_cer if weighted else baseline.mean_cer
    rows = []
    everything = list(runs)
    if baseline.method_id not in {r.method_id for r in runs}:
        everything.append(baseline)
    for run in everything:
        cer_method = run.weighted_cer if weighted else run.mean_cer
        rel = None
        if cer_ocr > 0:
            rel = metrics.relative_improvement(cer_ocr, cer_method)
        ratio = float(run.cost / baseline.cost) if baseline.cost > 0 else math.inf
        ri_over_cost = None
        if rel is not None and run.cost > 0 and baseline.cost > 0:
            ri_over_cost = metrics.cost_normalized_improvement(rel, run.cost, baseline.cost)
        rows.append(
            ComparisonRow(
                method_id=run.method_id,
                model_id=run.model_id,
                cer_method=cer_method,
                cer_ocr=cer_ocr,
                rel_imp=rel,
                cost_method=run.cost,
                cost_ocr=baseline.cost,
                cost_ratio=ratio,
                ri_over_cost=ri_over_cost,
                cost_is_estimated=run.cost_is_estimated,
                cer_method_weighted=run.weighted_cer if run.ref_length_by_doc else None,
            )
        )
    rows.sort(key=lambda r: (r.cost_method, r.method_id))
    return rows


def _fmt(value: float | None, places: int) -> str:
    if value is None:
        return "n/a"
    if not math.isfinite(value):
        return "inf"
    return f"{round_half_away(value, places):.{places}f}"


def render_comparison_markdown(rows: Sequence[ComparisonRow], title: str = "Method comparison") -> str:
    lines = [
        f"# {title}",
        "",
        "| Method | Model | CER | Rel.Imp. | Cost ($) | Cost ratio | R.I./cost ratio |",
        "|---|---|---|---|---|---|---|",
    ]
    any_estimated = False
    for row in rows:
        star = ""
        if row.cost_is_estimated:
            star = "\\*"
            any_estimated = True
        lines.append(
            "| {method} | {model} | {cer} | {rel} | {cost}{star} | {ratio} | {ri_cost} |".format(
                method=row.method_id,
                model=row.model_id or "-",
                cer=_fmt(row.cer_method, 3),
                rel=_fmt(row.rel_imp, 2),
                cost=to_decimal(row.cost_method, 6),
                star=star,
                ratio=_fmt(row.cost_ratio, 2),
                ri_cost=_fmt(row.ri_over_cost, 2),
            )
        )
    lines.append("")
    if any_estimated:
        lines.append("\\* cost estimated from token heuristics, not provider-reported usage")
        lines.append("")
    return "\n".join(lines)


def write_comparison_csv(rows: Sequence[ComparisonRow], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [
                "method_id",
                "model_id",
                "cer_method",
                "cer_method_weighted",
                "cer_ocr",
                "rel_imp",
                "cost_method",
                "cost_ocr",
                "cost_ratio",
                "ri_over_cost",
                "cost_is_estimated",
            ]
        )
        for row in rows:
            writer.writerow(
                [
                    row.method_id,
                    row.model_id or "",
                    f"{row.cer_method:.12g}",
                    "" if row.cer_method_weighted is None else f"{row.cer_method_weighted:.12g}",
                    f"{row.cer_ocr:.12g}",
                    "" if row.rel_imp is None else f"{row.rel_imp:.12g}",
                    to_decimal(row.cost_method, 6),
                    to_decimal(row.cost_ocr, 6),
                    f"{row.cost_ratio:.12g}",
                    "" if row.ri_over_cost is None else f"{row.ri_over_cost:.12g}",
                    "yes" if row.cost_is_estimated else "no",
                ]
            )


# ---------------------------------------------------------------------------
# per-page-count curves

@dataclass(frozen=True)
class CurvePoint:
    method_id: str
    page_count: int
    rel_imp: float | None  # None = count absent for this method, not interpolated


def per_page_count_curves(
    method_cer_by_count: Mapping[str, Mapping[int, float]],
    baseline_cer_by_count: Mapping[int, float],
) -> list[CurvePoint]:
    counts = sorted(baseline_cer_by_count)
    points = []
    for method_id in sorted(method_cer_by_count):
        by_count = method_cer_by_count[method_id]
        for count in counts:
            if count not in by_count or baseline_cer_by_count[count] <= 0:
                points.append(CurvePoint(method_id, count, None))
                continue
            points.append(
                CurvePoint(
                    method_id,
                    count,
                    metrics.relative_improvement(baseline_cer_by_count[count], by_count[count]),
                )
            )
    return points


def write_curves_csv(points: Sequence[CurvePoint], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["method_id", "page_count", "rel_imp"])
        for point in points:
            writer.writerow(
                [
                    point.method_id,
                    point.page_count,
                    "absent" if point.rel_imp is None else f"{point.rel_imp:.12g}",
                ]
            )


# ---------------------------------------------------------------------------
# Pareto frontier

@dataclass(frozen=True)
class ParetoPoint:
    cost: Money
    cer: float
    label: str


def pareto_frontier(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Points not strictly dominated (cheaper-and-no-worse or no-pricier-and-
    better), sorted by ascending cost; exact coordinate ties all survive."""
    if not points:
        return []
    ordered = sorted(points, key=lambda p: (p.cost, p.cer, p.label))
    frontier: list[ParetoPoint] = []
    best_cer = math.inf
    index = 0
    while index < len(ordered):
        group_end = index
        while group_end < len(ordered) and ordered[group_end].cost == ordered[index].cost:
            group_end += 1
        group = ordered[index:group_end]
        group_min = min(p.cer for p in group)
        if group_min < best_cer:
            frontier.extend(p for p in group if p.cer == group_min)
            best_cer = group_min
        index = group_end
    return frontier


def pareto_frontier_bruteforce(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """O(n^2) dominance filter; the oracle the fast path is tested against."""
    survivors = []
    for p in points:
        dominated = any(
            q.cost <= p.cost and q.cer <= p.cer and (q.cost < p.cost or q.cer < p.cer)
            for q in points
        )
        if not dominated:
            survivors.append(p)
    return sorted(survivors, key=lambda p: (p.cost, p.cer, p.label))


def write_pareto_csv(
    points: Sequence[ParetoPoint], frontier: Sequence[ParetoPoint], path: str | Path
) -> None:
    on_frontier = {(p.cost, p.cer, p.label) for p in frontier}
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["label", "cost", "cer", "on_frontier"])
        for point in sorted(points, key=lambda p: (p.cost, p.cer, p.label)):
            writer.writerow(
                [
                    point.label,
                    to_decimal(point.cost, 6),
                    f"{point.cer:.12g}",
                    "yes" if (point.cost, point.cer, point.label) in on_frontier else "no",
                ]
            )


# ---------------------------------------------------------------------------
# SVG charts (no plotting dependency; reviewable in diffs)

_SVG_W, _SVG_H = 860, 520
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 70, 30, 40, 60


def _scale(value: float, lo: float, hi: float, pixel_lo: float, pixel_hi: float) -> float:
    if hi == lo:
        return (pixel_lo + pixel_hi) / 2
    return pixel_lo + (value - lo) / (hi - lo) * (pixel_hi - pixel_lo)


def _axis_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    step = (hi - lo) / (count - 1)
    return [lo + i * step for i in range(count)]


def _svg_header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}" font-family="sans-serif" font-size="12">',
        f'<text x="{_SVG_W / 2}" y="20" text-anchor="middle" font-size="16">{title}</text>',
    ]

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _axes(x_lo, x_hi, y_lo, y_hi, x_label, y_label, x_fmt=lambda v: f"{v:g}", y_fmt=lambda v: f"{v:.2f}"):
    left, right = _MARGIN_L, _SVG_W - _MARGIN_R
    top, bottom = _MARGIN_T, _SVG_H - _MARGIN_B
    parts = [
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
        f'<text x="{(left + right) / 2}" y="{_SVG_H - 15}" text-anchor="middle">{x_label}</text>',
        f'<text x="18" y="{(top + bottom) / 2}" text-anchor="middle" '
        f'transform="rotate(-90 18 {(top + bottom) / 2})">{y_label}</text>',
    ]
    for tick in _axis_ticks(x_lo, x_hi):
        px = _scale(tick, x_lo, x_hi, left, right)
        parts.append(f'<line x1="{px:.1f}" y1="{bottom}" x2="{px:.1f}" y2="{bottom + 5}" stroke="black"/>')
        parts.append(f'<text x="{px:.1f}" y="{bottom + 20}" text-anchor="middle">{x_fmt(tick)}</text>')
    for tick in _axis_ticks(y_lo, y_hi):
        py = _scale(tick, y_lo, y_hi, bottom, top)
        parts.append(f'<line x1="{left - 5}" y1="{py:.1f}" x2="{left}" y2="{py:.1f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{py + 4:.1f}" text-anchor="end">{y_fmt(tick)}</text>')
    return parts, left, right, top, bottom


def write_curves_svg(points: Sequence[CurvePoint], path: str | Path, title: str = "Relative improvement by page count") -> None:
    present = [p for p in points if p.rel_imp is not None]
    if not present:
        Path(path).write_text("\n".join(_svg_header(title)) + "\n</svg>\n", encoding="utf-8")
        return
    methods = sorted({p.method_id for p in present})
    x_lo = min(p.page_count for p in present)
    x_hi = max(p.page_count for p in present)
    y_lo = min(p.rel_imp for p in present)
    y_hi = max(p.rel_imp for p in present)
    pad = (y_hi - y_lo) * 0.08 or 0.1
    y_lo, y_hi = y_lo - pad, y_hi + pad
    parts = _svg_header(title)
    axes, left, right, top, bottom = _axes(x_lo, x_hi, y_lo, y_hi, "page count", "Rel. Imp.", x_fmt=lambda v: f"{v:.0f}")
    parts.extend(axes)
    for color_index, method in enumerate(methods):
        color = _PALETTE[color_index % len(_PALETTE)]
        series = sorted(
            (p for p in present if p.method_id == method), key=lambda p: p.page_count
        )
        coords = " ".join(
            f"{_scale(p.page_count, x_lo, x_hi, left, right):.1f},"
            f"{_scale(p.rel_imp, y_lo, y_hi, bottom, top):.1f}"
            for p in series
        )
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for p in series:
            parts.append(
                f'<circle cx="{_scale(p.page_count, x_lo, x_hi, left, right):.1f}" '
                f'cy="{_scale(p.rel_imp, y_lo, y_hi, bottom, top):.1f}" r="3" fill="{color}"/>'
            )
        parts.append(
            f'<text x="{right - 10}" y="{top + 16 * (color_index + 1)}" text-anchor="end" '
            f'fill="{color}">{method}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def write_pareto_svg(
    points: Sequence[ParetoPoint],
    frontier: Sequence[ParetoPoint],
    path: str | Path,
    title: str = "Cost vs CER (Pareto frontier)",
) -> None:
    if not points:
        Path(path).write_text("\n".join(_svg_header(title)) + "\n</svg>\n", encoding="utf-8")
        return
    xs = [math.log10(float(p.cost)) for p in points]
    ys = [p.cer for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_pad = (x_hi - x_lo) * 0.08 or 0.5
    y_pad = (y_hi - y_lo) * 0.08 or 0.01
    x_lo, x_hi = x_lo - x_pad, x_hi + x_pad
    y_lo, y_hi = y_lo - y_pad, y_hi + y_pad
    parts = _svg_header(title)
    axes, left, right, top, bottom = _axes(
        x_lo, x_hi, y_lo, y_hi, "cost ($, log10)", "CER", x_fmt=lambda v: f"{v:.1f}", y_fmt=lambda v: f"{v:.3f}"
    )
    parts.extend(axes)
    frontier_sorted = sorted(frontier, key=lambda p: p.cost)
    coords = " ".join(
        f"{_scale(math.log10(float(p.cost)), x_lo, x_hi, left, right):.1f},"
        f"{_scale(p.cer, y_lo, y_hi, bottom, top):.1f}"
        for p in frontier_sorted
    )
    if coords:
        parts.append(f'<polyline points="{coords}" fill="none" stroke="#d62728" stroke-width="2"/>')
    on_frontier = {(p.cost, p.cer, p.label) for p in frontier}
    for p in points:
        px = _scale(math.log10(float(p.cost)), x_lo, x_hi, left, right)
        py = _scale(p.cer, y_lo, y_hi, bottom, top)
        hot = (p.cost, p.cer, p.label) in on_frontier
        parts.append(
            f'<circle cx="{px:.1f}" cy="{py:.1f}" r="4" '
            f'fill="{"#d62728" if hot else "#1f77b4"}"/>'
        )
        parts.append(f'<text x="{px + 6:.1f}" y="{py - 6:.1f}">{p.label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
