"""Run execution: OCR, plan, LLM calls, guard, persistence.

A run is (manifest, engine set, strategy, model, mode). Artifacts are one
JSON file per document under a directory keyed by method and template hash;
re-running skips completed documents unless forced, and replay/mock runs are
byte-identical regardless of concurrency.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from . import llm as llm_mod
from . import ocr as ocr_mod
from . import strategies as strat
from .guard import GuardConfig, apply_guard
from .llm import ChatResponse, MockContext, canonical_request_digest
from .model import (
    Document,
    GuardAction,
    Manifest,
    ModelSpec,
    TranscriptionResult,
    Usage,
    join_pages,
    read_manifest,
    write_result,
)
from .pricing import PriceBook, default_price_book, run_cost
from .strategies import Assembly, StrategyId, StrategyPlan

log = logging.getLogger("pagepipe.runner")


class RunError(RuntimeError):
    pass


@dataclass
class RunConfig:
    manifest_path: Path
    strategy: StrategyId
    engines: tuple[str, ...] = ()
    model_id: str | None = "gpt-4o-mini"
    selector_model_id: str = "gpt-4o-mini"
    mode: str = "mock:parrot"  # live | record | replay | mock:<name>
    out_dir: Path = Path("runs")
    fixtures_dir: Path | None = None
    oracle_table: Mapping[str, str] | None = None
    template_version: str = "v1"
    guard: GuardConfig = field(default_factory=GuardConfig)
    concurrency: int = 4
    seed: int = 0
    force: bool = False
    dry_run: bool = False
    price_book: PriceBook = field(default_factory=default_price_book)

    def __post_init__(self) -> None:
        self.manifest_path = Path(self.manifest_path)
        self.out_dir = Path(self.out_dir)
        if self.fixtures_dir is not None:
            self.fixtures_dir = Path(self.fixtures_dir)
        if isinstance(self.strategy, str):
            self.strategy = StrategyId(self.strategy)
        if self.strategy in strat.VISION_FAMILY:
            self.engines = ()
        elif not self.engines:
            raise RunError(f"strategy {self.strategy.value} needs at least one OCR engine")
        if self.strategy in strat.MULTI_ENGINE and len(self.engines) != 3:
            raise RunError(
                f"strategy {self.strategy.value} needs exactly three engines, got {self.engines}"
            )
        if self.strategy is not StrategyId.OCR_ONLY and not self.model_id:
            raise RunError(f"strategy {self.strategy.value} needs a model_id")


def method_id_for(config: RunConfig) -> str:
    engine_part = "+".join(config.engines) if config.engines else "none"
    model_part = config.model_id if (
        config.strategy is not StrategyId.OCR_ONLY and config.model_id
    ) else "none"
    return f"{engine_part}-{config.strategy.value}-{model_part}"


def _plan_template_hash(config: RunConfig) -> str:
    if config.strategy is StrategyId.OCR_ONLY:
        return "plain"
    names = {
        StrategyId.OCR_ONLY_LLM: "ocr_only_llm",
        StrategyId.OCR_PBP_LLM: "ocr_pbp_llm",
        StrategyId.FIRST_PAGE: "first_page",
        StrategyId.CHOSEN_PAGE: "chosen_page",
        StrategyId.VISION: "vision",
        StrategyId.VISION_PBP: "vision_pbp",
        StrategyId.ALL_PAGES: "all_pages",
        StrategyId.ALL_PAGES_PBP: "all_pages_pbp",
        StrategyId.ALL_OCR_LLM: "all_ocr_llm",
        StrategyId.ALL_OCR_PBP_LLM: "all_ocr_pbp_llm",
    }
    _, _, combined = strat._template_pair(names[config.strategy], config.template_version)
    return combined


def run_dir_for(config: RunConfig, manifest: Manifest) -> Path:
    return (
        config.out_dir
        / manifest.dataset_id
        / method_id_for(config)
        / _plan_template_hash(config)[:8]
    )


def _build_llm_client(config: RunConfig):
    if config.strategy is StrategyId.OCR_ONLY:
        return None
    if config.mode.startswith("mock:"):
        return llm_mod.build_mock_client(config.mode.split(":", 1)[1])
    if config.mode == "replay":
        if config.fixtures_dir is None:
            raise RunError("replay mode needs --fixtures")
        return llm_mod.ReplayLlmClient(config.fixtures_dir)
    live = llm_mod.OpenAiChatClient()
    if config.mode == "record":
        if config.fixtures_dir is None:
            raise RunError("record mode needs --fixtures")
        return llm_mod.RecordingLlmClient(live, config.fixtures_dir)
    if config.mode == "live":
        return live
    raise RunError(f"unknown mode {config.mode!r}")


def _build_ocr_engines(config: RunConfig) -> dict[str, ocr_mod.OcrEngine]:
    # the LLM may be mocked while OCR still needs a source: synthetic engines
    # stay synthetic, live engines degrade to replay under mock mode
    ocr_mode = "replay" if config.mode.startswith("mock:") else config.mode
    engines = {}
    for engine_id in config.engines:
        engines[engine_id] = ocr_mod.build_engine(
            engine_id,
            mode=ocr_mode,
            fixtures_dir=config.fixtures_dir,
            oracle_table=config.oracle_table,
        )
    return engines


@dataclass
class RunOutcome:
    run_dir: Path
    completed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)
    estimated_cost: object | None = None
    planned_requests: int = 0


def _model_spec(config: RunConfig, model_id: str | None) -> ModelSpec | None:
    if model_id is None:
        return None
    return config.price_book.model_spec(model_id)


def _execute_plan(
    plan: StrategyPlan,
    doc: Document,
    client,
    model_spec: ModelSpec | None,
    ocr_texts: tuple[str, ...] | None,
    ocr_by_engine: Mapping[str, tuple[str, ...]] | None,
    max_workers: int = 1,
) -> list[ChatResponse]:
    def _one(pair) -> ChatResponse:
        request, scope = pair
        ctx = MockContext(
            doc=doc,
            page_index=scope.page_index,
            ocr_texts=ocr_texts,
            ocr_texts_by_engine=ocr_by_engine,
        )
        return llm_mod.complete(client, request, ctx, model_spec)

    pairs = list(zip(plan.requests, plan.scopes))
    if max_workers <= 1 or len(pairs) <= 1:
        return [_one(pair) for pair in pairs]
    # responses come back in request order regardless of completion order
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(_one, pairs))


def _assemble(plan: StrategyPlan, responses: list[ChatResponse]) -> tuple[str, tuple[str, ...] | None]:
    if plan.assembly is Assembly.PASSTHROUGH:
        assert plan.passthrough_text is not None
        return plan.passthrough_text, None
    if plan.assembly is Assembly.SINGLE_RESPONSE:
        return responses[0].text, None
    texts = tuple(r.text for r in responses)
    return join_pages(texts), texts


def run_document(
    doc: Document,
    config: RunConfig,
    manifest: Manifest,
    engines: Mapping[str, ocr_mod.OcrEngine],
    client,
) -> TranscriptionResult:
    method = method_id_for(config)
    resolve = manifest.resolve_image
    model_spec = _model_spec(config, config.model_id)
    selector_spec = _model_spec(config, config.selector_model_id)

    ocr_by_engine: dict[str, tuple[str, ...]] = {}
    for engine_id in config.engines:
        outputs = ocr_mod.ocr_document(
            engines[engine_id], doc, resolve, max_workers=config.concurrency
        )
        ocr_by_engine[engine_id] = tuple(o.text for o in outputs)
    # ocr_calls counts calls per engine; each configured engine made page_count
    ocr_usage = Usage(ocr_calls=doc.page_count if config.engines else 0)
    primary_texts = ocr_by_engine[config.engines[0]] if config.engines else None

    stage1_ids: tuple[str, ...] = ()
    stage1_usage = Usage()
    selection_note = None
    if config.strategy is StrategyId.CHOSEN_PAGE:
        assert primary_texts is not None and selector_spec is not None
        stage1 = strat.plan_chosen_page_selection(
            doc, primary_texts, selector_spec, config.template_version
        )
        stage1_responses = _execute_plan(
            stage1, doc, client, selector_spec, primary_texts, ocr_by_engine,
            max_workers=config.concurrency,
        )
        for response in stage1_responses:
            stage1_usage += response.usage
        chosen, selection_note = strat.parse_page_choice(
            stage1_responses[0].text, doc.page_count
        )
        if selection_note:
            log.info("%s: %s", doc.doc_id, selection_note)
        stage1_ids = tuple(canonical_request_digest(r) for r in stage1.requests)
        plan = strat.plan_chosen_page(
            doc,
            primary_texts,
            model_spec,
            chosen,
            resolve,
            config.template_version,
            stage2_of=stage1_ids[0],
        )
    else:
        plan = build_plan(config, doc, manifest, ocr_by_engine)

    responses = _execute_plan(
        plan, doc, client, model_spec, primary_texts, ocr_by_engine,
        max_workers=config.concurrency,
    )
    assembled, per_page = _assemble(plan, responses)

    baseline = join_pages(primary_texts) if primary_texts is not None else None
    guard_action = GuardAction.NONE
    final_text = assembled
    raw_text = assembled if plan.requests else None
    if config.guard.applies_to(config.strategy):
        assert baseline is not None
        for response, scope in zip(responses, plan.scopes):
            if scope.ocr_text is None:
                continue
            _, action = apply_guard(
                scope.ocr_text, response.text, response.finish_reason.value, config.guard
            )
            if action is not GuardAction.NONE:
                guard_action = action
                break
        if guard_action is not GuardAction.NONE:
            # one bad scope poisons the document: fall back wholesale so the
            # guarded score equals the OCR baseline exactly
            final_text = baseline
            per_page = tuple(primary_texts) if primary_texts else None

    usage = ocr_usage + stage1_usage
    for response in responses:
        usage += response.usage

    return TranscriptionResult(
        doc_id=doc.doc_id,
        method_id=method,
        text=final_text,
        usage=usage,
        guard_action=guard_action,
        per_page_texts=per_page,
        raw_llm_text=raw_text,
        ocr_baseline_text=baseline,
        request_ids=stage1_ids + tuple(canonical_request_digest(r) for r in plan.requests),
        template_hash=plan.template_hash,
        usage_is_estimated=any(r.usage_is_estimated for r in responses),
    )


def build_plan(
    config: RunConfig,
    doc: Document,
    manifest: Manifest,
    ocr_by_engine: Mapping[str, tuple[str, ...]],
) -> StrategyPlan:
    resolve = manifest.resolve_image
    model_spec = _model_spec(config, config.model_id)
    primary = ocr_by_engine[config.engines[0]] if config.engines else None
    version = config.template_version
    s = config.strategy
    if s is StrategyId.OCR_ONLY:
        return strat.plan_ocr_only(doc, primary)
    if s is StrategyId.OCR_ONLY_LLM:
        return strat.plan_ocr_llm(doc, primary, model_spec, version)
    if s is StrategyId.OCR_PBP_LLM:
        return strat.plan_pbp(StrategyId.OCR_ONLY_LLM, doc, primary, model_spec, template_version=version)
    if s is StrategyId.FIRST_PAGE:
        return strat.plan_first_page(doc, primary, model_spec, resolve, version)
    if s is StrategyId.VISION:
        return strat.plan_vision(doc, model_spec, resolve, pbp=False, template_version=version)
    if s is StrategyId.VISION_PBP:
        return strat.plan_vision(doc, model_spec, resolve, pbp=True, template_version=version)
    if s is StrategyId.ALL_PAGES:
        return strat.plan_all_pages(doc, primary, model_spec, resolve, pbp=False, template_version=version)
    if s is StrategyId.ALL_PAGES_PBP:
        return strat.plan_all_pages(doc, primary, model_spec, resolve, pbp=True, template_version=version)
    if s is StrategyId.ALL_OCR_LLM:
        return strat.plan_all_ocr(doc, ocr_by_engine, model_spec, pbp=False, template_version=version)
    if s is StrategyId.ALL_OCR_PBP_LLM:
        return strat.plan_all_ocr(doc, ocr_by_engine, model_spec, pbp=True, template_version=version)
    raise RunError(f"no plan builder for strategy {s}")


def _dry_run_document(
    doc: Document,
    config: RunConfig,
    manifest: Manifest,
    engines: Mapping[str, ocr_mod.OcrEngine],
) -> tuple[int, Usage]:
    ocr_by_engine = {}
    for engine_id in config.engines:
        outputs = ocr_mod.ocr_document(engines[engine_id], doc, manifest.resolve_image)
        ocr_by_engine[engine_id] = tuple(o.text for o in outputs)
    usage = Usage(ocr_calls=doc.page_count if config.engines else 0)
    if config.strategy is StrategyId.OCR_ONLY:
        return 0, usage
    model_spec = _model_spec(config, config.model_id)
    if config.strategy is StrategyId.CHOSEN_PAGE:
        primary = ocr_by_engine[config.engines[0]]
        selector_spec = _model_spec(config, config.selector_model_id)
        stage1 = strat.plan_chosen_page_selection(doc, primary, selector_spec, config.template_version)
        plan = strat.plan_chosen_page(
            doc, primary, model_spec, 1, manifest.resolve_image, config.template_version
        )
        requests = list(stage1.requests) + list(plan.requests)
    else:
        plan = build_plan(config, doc, manifest, ocr_by_engine)
        requests = list(plan.requests)
    for request in requests:
        text_tokens, image_tokens = llm_mod.token_estimate(request, model_spec)
        usage += Usage(
            llm_input_text_tokens=text_tokens,
            llm_input_image_tokens=image_tokens,
            llm_output_tokens=max(64, text_tokens // 2),  # coarse output guess
            llm_calls=1,
        )
    return len(requests), usage


def execute_run(config: RunConfig) -> RunOutcome:
    manifest = read_manifest(config.manifest_path)
    engines = _build_ocr_engines(config)
    run_dir = run_dir_for(config, manifest)
    outcome = RunOutcome(run_dir=run_dir)

    if config.dry_run:
        total_usage = Usage()
        total_requests = 0
        for doc in manifest.documents:
            count, usage = _dry_run_document(doc, config, manifest, engines)
            total_requests += count
            total_usage += usage
        outcome.planned_requests = total_requests
        model_for_cost = config.model_id if config.strategy is not StrategyId.OCR_ONLY else None
        outcome.estimated_cost = run_cost(
            total_usage, config.engines, config.price_book, model_for_cost
        )
        return outcome

    run_dir.mkdir(parents=True, exist_ok=True)
    client = _build_llm_client(config)
    llm_mod.configure_live_concurrency(max(1, config.concurrency))

    def _one(doc: Document) -> tuple[str, str | None]:
        artifact = run_dir / f"{doc.doc_id}.json"
        if artifact.exists() and not config.force:
            log.debug("%s: artifact exists, skipping", doc.doc_id)
            return "skipped", None
        result = run_document(doc, config, manifest, engines, client)
        write_result(result, artifact)
        log.info("%s: done (guard=%s)", doc.doc_id, result.guard_action.value)
        return "completed", None

    docs = sorted(manifest.documents, key=lambda d: d.doc_id)
    if config.concurrency <= 1:
        for doc in docs:
            try:
                status, _ = _one(doc)
                getattr(outcome, status).append(doc.doc_id)
            except Exception as exc:  # noqa: BLE001 - collected for the exit report
                log.error("%s failed: %s", doc.doc_id, exc)
                outcome.failures.append((doc.doc_id, str(exc)))
    else:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            futures = {pool.submit(_one, doc): doc for doc in docs}
            for future in as_completed(futures):
                doc = futures[future]
                try:
                    status, _ = future.result()
                    getattr(outcome, status).append(doc.doc_id)
                except Exception as exc:  # noqa: BLE001
                    log.error("%s failed: %s", doc.doc_id, exc)
                    outcome.failures.append((doc.doc_id, str(exc)))
    outcome.completed.sort()
    outcome.skipped.sort()
    outcome.failures.sort()

    summary = {
        "dataset_id": manifest.dataset_id,
        "method_id": method_id_for(config),
        "strategy": config.strategy.value,
        "engines": list(config.engines),
        "model_id": config.model_id if config.strategy is not StrategyId.OCR_ONLY else None,
        "selector_model_id": config.selector_model_id
        if config.strategy is StrategyId.CHOSEN_PAGE
        else None,
        "mode": config.mode,
        "template_version": config.template_version,
        "template_hash": _plan_template_hash(config),
        "seed": config.seed,
        "guard": {
            "cer_divergence_threshold": config.guard.cer_divergence_threshold,
            "repetition_block_min_chars": config.guard.repetition_block_min_chars,
            "repetition_min_repeats": config.guard.repetition_min_repeats,
        },
        "documents": len(manifest.documents),
        "failed_doc_ids": [doc_id for doc_id, _ in outcome.failures],
    }
    (run_dir / "run.json").write_text(
        json.dumps(summary, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return outcome
