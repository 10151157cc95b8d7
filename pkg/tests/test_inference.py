import json
import math
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cotlora.core import Label
from cotlora.inference import (
    EvalReport,
    GenerationLimits,
    InferenceAborted,
    NullBackend,
    RuleOracleBackend,
    ThroughputReport,
    ToyModelBackend,
    bench_examples,
    bench_overhead,
    evaluate,
    run_inference,
)
from cotlora.nn import LoraConfig, ToyTransformer, ToyTransformerConfig, inject_adapters
from cotlora.preprocess import LanguageTable, preprocess_example
from cotlora.prompts import PromptMode, default_translator, load_templates
from cotlora.train import Tokenizer


@pytest.fixture(scope="module")
def qc():
    return load_templates("QC")


@pytest.fixture
def preprocessed(golden_examples):
    table, translator = LanguageTable(), default_translator()
    return [preprocess_example(ex, table, translator) for ex in golden_examples]


class FlakyBackend(NullBackend):
    """Fails on prompts mentioning any of ``bad``."""

    name = "flaky"

    def __init__(self, bad):
        super().__init__()
        self.bad = bad

    def generate(self, prompt, limits):
        if any(b in prompt for b in self.bad):
            raise RuntimeError("backend exploded")
        return super().generate(prompt, limits)


class TestRuleBackend:
    @pytest.mark.parametrize("mode", list(PromptMode))
    def test_golden_fixture(self, golden_examples, qc, mode):
        results, report = run_inference(golden_examples, RuleOracleBackend(), qc, mode, batch_size=5)
        assert [r.id for r in results] == [e.id for e in golden_examples]
        assert [r.label for r in results] == [e.label for e in golden_examples]
        assert report.failures == 0 and report.total_samples == 24

    def test_offline_translation_mode(self, preprocessed, qc):
        results, _ = run_inference(preprocessed, RuleOracleBackend(), qc, "fused", use_offline_translation=True)
        assert [r.label for r in results] == [e.label for e in preprocessed]
        for r, ex in zip(results, preprocessed):
            assert r.trace.translation == ex.query.translated_text

    def test_qi_templates(self, golden_examples):
        results, _ = run_inference(golden_examples, RuleOracleBackend(), load_templates("QI"), "staged")
        assert [r.label for r in results] == [e.label for e in golden_examples]

    def test_unrecognized_prompt(self):
        with pytest.raises(ValueError):
            RuleOracleBackend().generate("what is this?", GenerationLimits())


class TestRunInference:
    def test_null_backend_order_and_throughput(self, qc):
        examples = bench_examples(1000)
        results, report = run_inference(examples, NullBackend(), qc, batch_size=64)
        assert [r.id for r in results] == [e.id for e in examples]
        assert report.samples_per_second == 1000 / report.wall_seconds
        assert report.backend == "null"

    def test_batch_size_zero(self, qc):
        with pytest.raises(ValueError, match="batch_size"):
            run_inference(bench_examples(3), NullBackend(), qc, batch_size=0)

    @pytest.mark.parametrize("mode", list(PromptMode))
    def test_batch_invariance(self, golden_examples, qc, mode):
        runs = [run_inference(golden_examples, RuleOracleBackend(), qc, mode, batch_size=b)[0] for b in (1, 8, 64)]
        assert runs[0] == runs[1] == runs[2]

    def test_threaded_workers_keep_order(self, golden_examples, qc):
        serial, _ = run_inference(golden_examples, RuleOracleBackend(), qc, batch_size=3)
        threaded, _ = run_inference(golden_examples, RuleOracleBackend(), qc, batch_size=3, workers=4)
        assert threaded == serial

    def test_failures_recorded_below_threshold(self, qc):
        examples = bench_examples(40)
        examples[5] = replace(examples[5], query=replace(examples[5].query, raw_text="boom item"))
        results, report = run_inference(examples, FlakyBackend(["boom"]), qc, batch_size=8)
        assert report.failures == 1
        assert results[5].label is None and "backend exploded" in results[5].error
        assert all(r.label is Label.RELEVANT for i, r in enumerate(results) if i != 5)

    def test_abort_above_ten_percent(self, qc):
        examples = bench_examples(20)
        for i in (1, 2, 3):
            examples[i] = replace(examples[i], query=replace(examples[i].query, raw_text=f"boom {i}"))
        with pytest.raises(InferenceAborted, match="3 of 20"):
            run_inference(examples, FlakyBackend(["boom"]), qc, batch_size=4)

    def test_exactly_ten_percent_continues(self, qc):
        examples = bench_examples(20)
        for i in (1, 2):
            examples[i] = replace(examples[i], query=replace(examples[i].query, raw_text=f"boom {i}"))
        _, report = run_inference(examples, FlakyBackend(["boom"]), qc, batch_size=4)
        assert report.failures == 2

    def test_unparseable_response_is_a_failure(self, qc):
        results, report = run_inference(
            bench_examples(20), NullBackend(response="no headings here"), qc, max_failure_rate=1.0
        )
        assert report.failures == 20
        assert all("TraceParseError" in r.error for r in results)


class TestToyBackend:
    def test_greedy_is_deterministic_and_bounded(self):
        tok = Tokenizer.build(["Step 1: Translation red shoes Final answer: 1"])
        cfg = ToyTransformerConfig(d_model=16, n_heads=2, d_ff=24, vocab_size=len(tok), max_seq_len=64)
        model = inject_adapters(ToyTransformer.init(cfg, seed=0), config=LoraConfig(rank=2, alpha=4.0))
        backend = ToyModelBackend(model, tok)
        limits = GenerationLimits(max_new_tokens=5)
        first = backend.generate("red shoes", limits)
        calls = []
        forward = model.forward
        model.forward = lambda ids: calls.append(len(ids)) or forward(ids)
        assert backend.generate("red shoes", limits) == first
        assert 1 <= len(calls) <= 5

    def test_prompt_too_long(self):
        tok = Tokenizer.build(["ab"])
        cfg = ToyTransformerConfig(d_model=8, n_heads=2, d_ff=8, vocab_size=len(tok), max_seq_len=4)
        backend = ToyModelBackend(ToyTransformer.init(cfg), tok)
        with pytest.raises(ValueError, match="no room"):
            backend.generate("abab", GenerationLimits())


class TestEvaluate:
    def _pairs(self, tp, fp, fn, tn):
        pred, gold = [], []
        for name, n, p, g in (("tp", tp, 1, 1), ("fp", fp, 1, 0), ("fn", fn, 0, 1), ("tn", tn, 0, 0)):
            for i in range(n):
                pred.append((f"{name}{i}", Label(p)))
                gold.append((f"{name}{i}", Label(g)))
        return pred, gold

    def test_worked_example(self):
        report = evaluate(*self._pairs(3, 1, 2, 4))
        assert (report.tp, report.fp, report.fn, report.tn) == (3, 1, 2, 4)
        assert report.accuracy == pytest.approx(0.7, abs=1e-12)
        assert report.precision == pytest.approx(0.75, abs=1e-12)
        assert report.recall == pytest.approx(0.6, abs=1e-12)
        assert report.f1 == pytest.approx(2 / 3, abs=1e-12)

    def test_all_correct_and_all_wrong(self):
        pred, gold = self._pairs(4, 0, 0, 3)
        right = evaluate(pred, gold)
        assert right.accuracy == 1.0 and right.f1 == 1.0
        flipped = [(i, Label(1 - int(l))) for i, l in pred]
        assert evaluate(flipped, gold).accuracy == 0.0

    def test_mismatched_ids(self):
        with pytest.raises(ValueError, match=r"missing predictions for \['b'\]; unknown ids \['z'\]"):
            evaluate([("a", Label.RELEVANT), ("z", Label.RELEVANT)], [("a", Label.RELEVANT), ("b", Label.IRRELEVANT)])

    def test_per_language(self):
        pred = [("e1", Label.RELEVANT), ("e2", Label.RELEVANT), ("s1", Label.IRRELEVANT)]
        gold = [("e1", Label.RELEVANT), ("e2", Label.IRRELEVANT), ("s1", Label.IRRELEVANT)]
        report = evaluate(pred, gold, {"e1": "en", "e2": "en", "s1": "es"})
        assert report.per_language == {"en": {"accuracy": 0.5, "n": 2}, "es": {"accuracy": 1.0, "n": 1}}

    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
    def test_metric_identities(self, tp, fp, tn, fn):
        r = EvalReport.from_counts(tp, fp, tn, fn)
        total = tp + fp + tn + fn
        if total:
            assert r.accuracy == (tp + tn) / total
        p = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        assert (r.precision, r.recall) == (p, rec)
        assert r.f1 == (0.0 if p + rec == 0 else pytest.approx(2 * p * rec / (p + rec), rel=1e-12))
        assert 0.0 <= r.f1 <= 1.0 and 0.0 <= r.accuracy <= 1.0


class TestThroughputReport:
    def test_identity(self):
        r = ThroughputReport.measure(50, 2.5, 8, "null")
        assert r.samples_per_second == 20.0

    def test_round_trip(self):
        r = bench_overhead(1)
        assert r.wall_seconds > 0 and r.total_samples == 1
        assert ThroughputReport.from_json(r.to_json()) == r
        assert set(json.loads(r.to_json())) == {
            "total_samples", "wall_seconds", "samples_per_second", "batch_size", "backend", "failures"
        }

    def test_bench_rejects_zero(self):
        with pytest.raises(ValueError):
            bench_overhead(0)

    @pytest.mark.parametrize("mode", list(PromptMode))
    def test_bench_modes(self, mode):
        r = bench_overhead(40, batch_size=8, mode=mode)
        assert r.failures == 0 and math.isfinite(r.samples_per_second)
