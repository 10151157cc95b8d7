"""Batched inference through pluggable generation backends, throughput and accuracy reports."""

from __future__ import annotations

import json
import logging
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import CategoryPath, CoTTrace, Label, LanguageTag, QueryRecord, RelevanceExample, TaskKind
from .preprocess import LanguageTable
from .prompts import oracle as rules
from .prompts.engine import (
    PromptMode,
    PromptTemplate,
    Stage,
    check_template_set,
    example_context,
    parse_trace,
    render_fused_prompt,
    render_fused_response,
    render_judgment_response,
    render_stage_prompt,
)

log = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.10


class InferenceAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class GenerationLimits:
    max_new_tokens: int = 256

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")


class GeneratorBackend(Protocol):
    name: str
    thread_safe: bool

    def generate(self, prompt: str, limits: GenerationLimits) -> str: ...

    def generate_batch(self, prompts: Sequence[str], limits: GenerationLimits) -> list[str]: ...


class _Backend:
    name = "base"
    thread_safe = True

    def generate(self, prompt: str, limits: GenerationLimits) -> str:
        raise NotImplementedError

    def generate_batch(self, prompts: Sequence[str], limits: GenerationLimits) -> list[str]:
        return [self.generate(p, limits) for p in prompts]


NULL_RESPONSE = render_fused_response(
    "(none)", "(none)", "(none)", render_judgment_response(Label.RELEVANT)
)


class NullBackend(_Backend):
    """Returns a fixed response; measures the harness without a model."""

    name = "null"

    def __init__(self, response: str = NULL_RESPONSE, staged_response: str = "Final answer: 1"):
        self.response = response
        self.staged_response = staged_response

    def generate(self, prompt: str, limits: GenerationLimits) -> str:
        # staged prompts open with their step heading; fused prompts with the preamble
        return self.staged_response if prompt.startswith("Step ") else self.response


# --- rule oracle backend --------------------------------------------------

_FIELD_RE_CACHE: dict[str, re.Pattern] = {}


def prompt_field(prompt: str, name: str) -> str | None:
    """Value of the first ``name: value`` line, ignoring fused-mode step references."""
    pat = _FIELD_RE_CACHE.get(name)
    if pat is None:
        pat = _FIELD_RE_CACHE[name] = re.compile(rf"^{re.escape(name)}: ?(.*)$", re.MULTILINE)
    m = pat.search(prompt)
    if m is None:
        return None
    value = m.group(1).strip()
    if value.startswith("<output of Step"):
        return None
    return value


def prompt_stages(prompt: str) -> list[Stage]:
    heads = {line.strip() for line in prompt.splitlines()}
    return [s for s in Stage if s.heading in heads]


class RuleOracleBackend(_Backend):
    """Answers shipped-template prompts with the keyword/attribute rules.

    Reads the ``Query:``, ``Language:``, ``English query:``, ``Intent:``,
    ``Category path:``/``Item:`` and ``Matching analysis:`` lines of the
    prompt. A prompt holding all four step headings gets a full fused trace;
    a prompt opening with one step heading gets that stage's output.
    """

    name = "rule"

    def __init__(self, translator=None, table: LanguageTable | None = None):
        self.oracle = rules.RuleOracle(translator)
        table = table or LanguageTable()
        self._codes = {table[c].casefold(): c for c in table.codes()}

    def _language(self, prompt: str) -> LanguageTag:
        name = prompt_field(prompt, "Language")
        if name is None:
            raise ValueError("prompt has no Language line")
        code = self._codes.get(name.casefold(), name.lower())
        return LanguageTag(code, name)

    def _translation(self, prompt: str) -> str:
        english = prompt_field(prompt, "English query")
        if english:
            return english
        query = prompt_field(prompt, "Query")
        if query is None:
            raise ValueError("prompt has no Query line")
        return self.oracle.translate_text(query, self._language(prompt))

    def _levels(self, prompt: str) -> tuple[str, ...]:
        category = prompt_field(prompt, "Category path")
        if category is None:
            category = prompt_field(prompt, "Item")
        if category is None:
            raise ValueError("prompt has no Category path/Item line")
        return CategoryPath.parse(category).levels

    def _intent(self, prompt: str, translation: str) -> rules.Intent:
        text = prompt_field(prompt, "Intent")
        return rules.Intent.parse(text) if text else rules.extract_intent(translation)

    def generate(self, prompt: str, limits: GenerationLimits) -> str:
        stages = prompt_stages(prompt)
        if len(stages) == len(Stage):
            translation = self._translation(prompt)
            intent = rules.extract_intent(translation)
            matching = rules.match_analysis(intent, self._levels(prompt))
            label = rules.judge(matching)
            return render_fused_response(
                translation,
                intent.render(),
                matching,
                render_judgment_response(label, rules.judgment_rationale(label)),
            )
        if not stages or not prompt.startswith(stages[0].heading):
            raise ValueError("prompt carries no recognizable step heading")
        stage = stages[0]
        if stage is Stage.TRANSLATION:
            return self._translation(prompt)
        if stage is Stage.INTENT_UNDERSTANDING:
            return rules.extract_intent(self._translation(prompt)).render()
        if stage is Stage.CATEGORY_MATCHING:
            intent = self._intent(prompt, self._translation(prompt))
            return rules.match_analysis(intent, self._levels(prompt))
        matching = prompt_field(prompt, "Matching analysis")
        if not matching:
            raise ValueError("judgment prompt has no Matching analysis line")
        label = rules.judge(matching)
        return render_judgment_response(label, rules.judgment_rationale(label))


# --- toy model backend ----------------------------------------------------


class ToyModelBackend(_Backend):
    """Greedy decoding with the toy transformer (no KV cache)."""

    name = "toy"

    def __init__(self, model, tokenizer):
        from .train import prompt_ids

        self.model = model.eval()
        self.tok = tokenizer
        self._prompt_ids = prompt_ids
        self.thread_safe = False  # forward caches activations on the model

    def generate(self, prompt: str, limits: GenerationLimits) -> str:
        from .train import EOS

        ids = self._prompt_ids(self.tok, prompt)
        eos = self.tok.id(EOS)
        budget = min(limits.max_new_tokens, self.model.config.max_seq_len - len(ids))
        if budget < 1:
            raise ValueError(f"prompt of {len(ids)} tokens leaves no room to generate")
        out: list[int] = []
        for _ in range(budget):
            logits = self.model.forward(np.array(ids + out, dtype=np.int64))
            nxt = int(np.argmax(logits[-1]))
            if nxt == eos:
                break
            out.append(nxt)
        return self.tok.decode(out)


# --- pipeline -------------------------------------------------------------


@dataclass(frozen=True)
class InferenceResult:
    id: str
    trace: CoTTrace | None
    label: Label | None
    error: str | None = None

    def to_dict(self, include_trace: bool = True) -> dict:
        row: dict = {"id": self.id, "label": None if self.label is None else int(self.label)}
        if include_trace and self.trace is not None:
            row["trace"] = self.trace.to_dict()
        if self.error is not None:
            row["error"] = self.error
        return row


@dataclass
class ThroughputReport:
    total_samples: int
    wall_seconds: float
    samples_per_second: float
    batch_size: int
    backend: str
    failures: int = 0

    @classmethod
    def measure(cls, total: int, wall: float, batch_size: int, backend: str, failures: int = 0) -> "ThroughputReport":
        wall = max(wall, 1e-9)
        return cls(total, wall, total / wall, batch_size, backend, failures)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ThroughputReport":
        return cls(**json.loads(text))


def _stage_context(ex: RelevanceExample, use_offline_translation: bool) -> dict[str, str]:
    return example_context(ex, use_offline_translation)


def _run_staged(batch, backend, by_stage, limits, use_offline_translation):
    """Four rounds over the batch; each round's responses feed the next stage's context."""
    ctxs = [_stage_context(ex, False) for ex in batch]
    prompts: list[list[str]] = [[] for _ in batch]
    responses: list[list[str]] = [[] for _ in batch]
    errors: list[str | None] = [None] * len(batch)
    keys = {Stage.TRANSLATION: "translation", Stage.INTENT_UNDERSTANDING: "intent",
            Stage.CATEGORY_MATCHING: "matching_analysis"}
    for stage in Stage:
        live = [i for i in range(len(batch)) if errors[i] is None]
        texts = []
        for i in live:
            try:
                texts.append(f"{stage.heading}\n{render_stage_prompt(by_stage[stage], ctxs[i])}")
            except Exception as exc:
                errors[i] = f"{type(exc).__name__}: {exc}"
                texts.append(None)
        pairs = [(i, t) for i, t in zip(live, texts) if t is not None]
        outs = _generate_each(backend, [t for _, t in pairs], limits)
        for (i, text), out in zip(pairs, outs):
            if isinstance(out, Exception):
                errors[i] = f"{type(out).__name__}: {out}"
                continue
            prompts[i].append(text)
            responses[i].append(out)
            if stage in keys:
                value = out.strip()
                if stage is Stage.TRANSLATION and use_offline_translation:
                    value = batch[i].query.english_text or value
                ctxs[i][keys[stage]] = value
    results = []
    for i, ex in enumerate(batch):
        if errors[i] is not None:
            results.append(InferenceResult(ex.id, None, None, errors[i]))
            continue
        try:
            trace = parse_trace(responses[i], PromptMode.STAGED, prompts[i])
            results.append(InferenceResult(ex.id, trace, trace.judgment))
        except Exception as exc:
            results.append(InferenceResult(ex.id, None, None, f"{type(exc).__name__}: {exc}"))
    return results


def _generate_each(backend, prompts: Sequence[str], limits) -> list:
    """Batch generation; on a batch failure, retry one by one so errors stay per-example."""
    if not prompts:
        return []
    try:
        return list(backend.generate_batch(prompts, limits))
    except Exception:
        out = []
        for p in prompts:
            try:
                out.append(backend.generate(p, limits))
            except Exception as exc:
                out.append(exc)
        return out


def _run_fused(batch, backend, templates, limits, use_offline_translation):
    prompts, idx, results = [], [], [None] * len(batch)
    for i, ex in enumerate(batch):
        try:
            prompts.append(render_fused_prompt(templates, ex, use_offline_translation))
            idx.append(i)
        except Exception as exc:
            results[i] = InferenceResult(ex.id, None, None, f"{type(exc).__name__}: {exc}")
    outs = _generate_each(backend, prompts, limits)
    for i, prompt, out in zip(idx, prompts, outs):
        ex = batch[i]
        if isinstance(out, Exception):
            results[i] = InferenceResult(ex.id, None, None, f"{type(out).__name__}: {out}")
            continue
        try:
            trace = parse_trace(out, PromptMode.FUSED, (prompt,))
            results[i] = InferenceResult(ex.id, trace, trace.judgment)
        except Exception as exc:
            results[i] = InferenceResult(ex.id, None, None, f"{type(exc).__name__}: {exc}")
    return results


def run_inference(
    examples: Sequence[RelevanceExample],
    backend: GeneratorBackend,
    templates: Sequence[PromptTemplate],
    mode: PromptMode | str = PromptMode.FUSED,
    batch_size: int = 8,
    limits: GenerationLimits | None = None,
    use_offline_translation: bool = False,
    workers: int = 1,
    max_failure_rate: float = MAX_FAILURE_RATE,
) -> tuple[list[InferenceResult], ThroughputReport]:
    """Run every example through ``backend``; results come back in input order.

    Per-example failures are recorded on the result. Once failures exceed
    ``max_failure_rate`` of the run the whole run aborts.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    mode = PromptMode(mode)
    limits = limits or GenerationLimits()
    by_stage = check_template_set(templates)
    batches = [list(examples[s : s + batch_size]) for s in range(0, len(examples), batch_size)]
    limit = max_failure_rate * len(examples)

    def run_batch(batch):
        if mode is PromptMode.FUSED:
            return _run_fused(batch, backend, templates, limits, use_offline_translation)
        return _run_staged(batch, backend, by_stage, limits, use_offline_translation)

    results: list[InferenceResult] = []
    failures = 0
    start = time.perf_counter()
    if workers > 1 and getattr(backend, "thread_safe", False):
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = pool.map(run_batch, batches)
            for chunk in chunks:
                results.extend(chunk)
                failures += sum(r.error is not None for r in chunk)
                if failures > limit:
                    break
    else:
        for batch in batches:
            chunk = run_batch(batch)
            results.extend(chunk)
            failures += sum(r.error is not None for r in chunk)
            if failures > limit:
                break
    wall = time.perf_counter() - start
    if failures > limit:
        raise InferenceAborted(f"{failures} of {len(examples)} examples failed (limit {max_failure_rate:.0%})")
    if failures:
        log.warning("%d of %d examples failed and carry no label", failures, len(examples))
    report = ThroughputReport.measure(len(examples), wall, batch_size, getattr(backend, "name", "?"), failures)
    return results, report


# --- evaluation -----------------------------------------------------------


@dataclass
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    total: int
    per_language: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int, per_language=None) -> "EvalReport":
        total = tp + fp + tn + fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        accuracy = (tp + tn) / total if total else 0.0
        return cls(accuracy, precision, recall, f1, tp, fp, tn, fn, total, per_language or {})

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(
    predictions: Sequence[tuple[str, Label]],
    gold: Sequence[tuple[str, Label]],
    languages: Mapping[str, str] | None = None,
) -> EvalReport:
    """Accuracy plus precision/recall/F1 of the Relevant class.

    ``languages`` maps example id to language code for the per-language
    breakdown.
    """
    for name, pairs in (("prediction", predictions), ("gold", gold)):
        dupes = [i for i, c in Counter(i for i, _ in pairs).items() if c > 1]
        if dupes:
            log.warning("duplicate %s ids: %s", name, sorted(dupes)[:10])
    pred = {i: Label.parse(l) for i, l in predictions}
    truth = {i: Label.parse(l) for i, l in gold}
    missing = sorted(truth.keys() - pred.keys())
    extra = sorted(pred.keys() - truth.keys())
    if missing or extra:
        raise ValueError(f"id mismatch: missing predictions for {missing}; unknown ids {extra}")
    tp = fp = tn = fn = 0
    by_lang: dict[str, list[int]] = {}
    for i, g in truth.items():
        p = pred[i]
        if p is Label.RELEVANT:
            tp += g is Label.RELEVANT
            fp += g is Label.IRRELEVANT
        else:
            tn += g is Label.IRRELEVANT
            fn += g is Label.RELEVANT
        if languages is not None:
            stats = by_lang.setdefault(languages.get(i, "unknown"), [0, 0])
            stats[0] += p == g
            stats[1] += 1
    per_language = {
        code: {"accuracy": c / n, "n": n} for code, (c, n) in sorted(by_lang.items())
    }
    return EvalReport.from_counts(tp, fp, tn, fn, per_language)


# --- harness benchmark ----------------------------------------------------


def bench_examples(n: int) -> list[RelevanceExample]:
    pool = [
        ("red running shoes", "en", "English", "Shoes > Running Shoes"),
        ("zapatos rojos", "es", "Spanish", "Shoes > Women"),
        ("montre pour femme", "fr", "French", "Jewelry > Watches > Men's Watches"),
        ("هاتف ذكي", "ar", "Arabic", "Electronics > Mobile Phones"),
    ]
    out = []
    for i in range(n):
        q, code, name, cat = pool[i % len(pool)]
        out.append(
            RelevanceExample(
                QueryRecord(f"b{i:07d}", q, LanguageTag(code, name)),
                CategoryPath.parse(cat),
                Label.RELEVANT,
                TaskKind.QC,
            )
        )
    return out


def bench_overhead(
    n: int,
    batch_size: int = 8,
    templates: Sequence[PromptTemplate] | None = None,
    mode: PromptMode | str = PromptMode.FUSED,
) -> ThroughputReport:
    """Render -> NullBackend -> parse for ``n`` samples; isolates harness cost."""
    from .prompts.engine import load_templates

    if n < 1:
        raise ValueError("n must be >= 1")
    templates = templates or load_templates(TaskKind.QC)
    _, report = run_inference(bench_examples(n), NullBackend(), templates, mode, batch_size)
    return report
