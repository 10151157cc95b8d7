"""Command-line entry point: preprocess, build-dataset, train, infer, eval, bench.

Every command writes ``manifest.json`` (config snapshot, seed, input digests,
tool version) into ``--out-dir`` next to its outputs.

Value precedence: command-line flag > ``--config`` JSON file > built-in
default. The config file is a JSON object whose top-level keys are global
settings (``seed``, ``out_dir``) plus one section per command named after it
(``"train": {...}``), with keys spelled like the long flags using
underscores (``batch_size``, ``lr``...).

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .core import parse_examples, write_examples
from .inference import (
    EvalReport,
    GenerationLimits,
    NullBackend,
    RuleOracleBackend,
    ToyModelBackend,
    bench_overhead,
    evaluate,
    run_inference,
)
from .nn import _kernels
from .nn.checkpoint import load_adapters, load_model, save_adapters, save_model
from .nn.lora import LoraConfig, inject_adapters
from .nn.model import ToyTransformer, ToyTransformerConfig
from .preprocess import DictionaryTranslator, LanguageTable, preprocess_example
from .prompts.engine import (
    PromptMode,
    Stage,
    build_instruction_dataset,
    load_templates,
    read_instruction_jsonl,
    write_instruction_jsonl,
)
from .prompts.oracle import RuleOracle, default_translator

log = logging.getLogger("cotlora")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


# --- helpers --------------------------------------------------------------


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {path}")
    return p


def write_manifest(out_dir: Path, command: str, settings: dict, inputs: dict[str, Path | None], outputs: list[str]) -> Path:
    manifest = {
        "command": command,
        "tool": "cotlora",
        "version": __version__,
        "kernel_backend": _kernels.BACKEND,
        "seed": settings.get("seed", 0),
        "config": settings,
        "inputs": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in sorted(inputs.items()) if p is not None},
        "outputs": sorted(outputs),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _pick(s: dict, key: str, default):
    value = s.get(key)
    return default if value is None else value


def _read_examples(path: Path, fmt: str | None):
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "jsonl")
    return parse_examples(path.read_text(encoding="utf-8"), fmt)


def _templates(task_kind: str, directory: str | None):
    templates = load_templates(task_kind, directory)
    if len(templates) != len(Stage):
        raise ConfigError(f"expected 4 {task_kind} templates, found {len(templates)}")
    return templates


# --- commands -------------------------------------------------------------


def cmd_preprocess(s: dict, out_dir: Path) -> int:
    src = _existing(s.get("input"), "input file")
    if src is None:
        raise ConfigError("--input is required")
    lang_csv = _existing(s.get("languages"), "language table")
    dict_path = _existing(s.get("dictionary"), "dictionary")
    table = LanguageTable.from_csv(lang_csv) if lang_csv else LanguageTable()
    translator_name = s.get("translator") or "dictionary"
    if translator_name == "dictionary":
        translator = DictionaryTranslator.from_json(dict_path) if dict_path else default_translator()
    elif translator_name == "none":
        translator = None
    else:
        raise ConfigError(f"unknown translator {translator_name!r}")

    examples = _read_examples(src, s.get("format"))
    out = []
    for row, ex in enumerate(examples, start=1):
        try:
            out.append(preprocess_example(ex, table, translator))
        except Exception as exc:
            raise RuntimeError(f"row {row} (id {ex.id!r}): {exc}") from exc
    target = Path(s.get("output") or out_dir / "preprocessed.jsonl")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(write_examples(out, "jsonl"), encoding="utf-8")
    write_manifest(
        out_dir, "preprocess", s,
        {"input": src, "languages": lang_csv, "dictionary": dict_path}, [str(target)],
    )
    log.info("preprocessed %d examples -> %s", len(out), target)
    return EXIT_OK


def cmd_build_dataset(s: dict, out_dir: Path) -> int:
    src = _existing(s.get("input"), "input file")
    if src is None:
        raise ConfigError("--input is required")
    tdir = _existing(s.get("templates"), "template directory")
    try:
        mode = PromptMode(s.get("mode") or "staged")
    except ValueError:
        raise ConfigError(f"unknown mode {s.get('mode')!r}") from None
    templates = _templates(s.get("task_kind") or "QC", str(tdir) if tdir else None)
    dict_path = _existing(s.get("dictionary"), "dictionary")
    oracle = RuleOracle(DictionaryTranslator.from_json(dict_path) if dict_path else None)
    examples = _read_examples(src, s.get("format"))
    records = build_instruction_dataset(
        examples, templates, mode, oracle, use_offline_translation=bool(s.get("offline_translation"))
    )
    target = Path(s.get("output") or out_dir / "dataset.jsonl")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(write_instruction_jsonl(records), encoding="utf-8")
    write_manifest(out_dir, "build-dataset", s, {"input": src, "templates": tdir, "dictionary": dict_path}, [str(target)])
    log.info("built %d %s records from %d examples -> %s", len(records), mode.value, len(examples), target)
    return EXIT_OK


def _train_config(s: dict):
    from .train import TrainConfig

    cfg_path = _existing(s.get("train_config"), "train config")
    base = TrainConfig.from_json(cfg_path) if cfg_path else TrainConfig()
    overrides = {
        "batch_size": s.get("batch_size"),
        "grad_accum_steps": s.get("grad_accum"),
        "learning_rate": s.get("lr"),
        "epochs": s.get("epochs"),
        "max_steps": s.get("max_steps"),
        "loss_mask_policy": s.get("loss_mask"),
        "seed": s.get("seed"),
    }
    try:
        return replace(base, **{k: v for k, v in overrides.items() if v is not None})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(s: dict, out_dir: Path) -> int:
    from .train import Tokenizer, record_texts, tokenize, train

    src = _existing(s.get("dataset"), "dataset file")
    if src is None:
        raise ConfigError("--dataset is required")
    tcfg = _train_config(s)
    try:
        defaults = LoraConfig()
        lora = LoraConfig(
            rank=_pick(s, "rank", defaults.rank),
            alpha=_pick(s, "alpha", defaults.alpha),
            dropout=_pick(s, "dropout", defaults.dropout),
            targets=tuple(_pick(s, "targets", defaults.targets)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    records = read_instruction_jsonl(src.read_text(encoding="utf-8"))
    stages = s.get("stages") or "all"
    if stages == "judgment":
        records = [r for r in records if r.stage in (None, Stage.RELEVANCE_JUDGMENT)]
    elif stages != "all":
        raise ConfigError(f"unknown stage filter {stages!r}")
    if not records:
        raise RuntimeError("dataset is empty")
    tok = Tokenizer.build(record_texts(records), max_size=s.get("max_vocab"))
    probe = [tokenize(r, tok, None, tcfg.loss_mask_policy) for r in records]
    longest = max(len(t) for t in probe)
    try:
        mcfg = ToyTransformerConfig(
            d_model=_pick(s, "d_model", 64),
            n_heads=_pick(s, "n_heads", 4),
            n_layers=_pick(s, "n_layers", 2),
            d_ff=_pick(s, "d_ff", 128),
            vocab_size=len(tok),
            max_seq_len=_pick(s, "max_seq_len", max(512, longest)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    data = [tokenize(r, tok, mcfg.max_seq_len, tcfg.loss_mask_policy) for r in records]
    model = ToyTransformer.init(mcfg, seed=tcfg.seed)
    base_path, adapter_path = out_dir / "base_model.ckpt", out_dir / "adapter.ckpt"
    save_model(model, base_path, {"seed": tcfg.seed})
    inject_adapters(model, config=lora, seed=tcfg.seed + 1)
    model, report = train(data, model, tcfg)
    save_adapters(model, adapter_path, {"seed": tcfg.seed, "train_config": tcfg.to_dict()})
    tok.save(out_dir / "tokenizer.json")
    report_path = out_dir / "train_report.json"
    payload = {**report.to_dict(), "seed": tcfg.seed, "lora": {"rank": lora.rank, "alpha": lora.alpha,
               "dropout": lora.dropout, "targets": list(lora.targets)}, "model": mcfg.to_dict()}
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    outputs = [str(base_path), str(adapter_path), str(out_dir / "tokenizer.json"), str(report_path)]
    write_manifest(out_dir, "train", {**s, "seed": tcfg.seed, "resolved_train_config": tcfg.to_dict()}, {"dataset": src}, outputs)
    log.info("trained %d updates, final loss %.4f", report.steps, report.final_loss)
    return EXIT_OK


def _backend(s: dict):
    name = s.get("backend") or "rule"
    if name == "rule":
        dict_path = _existing(s.get("dictionary"), "dictionary")
        return RuleOracleBackend(DictionaryTranslator.from_json(dict_path) if dict_path else None)
    if name == "null":
        return NullBackend()
    if name == "toy":
        from .train import Tokenizer

        mdir = _existing(s.get("model_dir"), "model directory")
        if mdir is None:
            raise ConfigError("--model-dir is required for the toy backend")
        model = load_model(mdir / "base_model.ckpt")
        load_adapters(model, mdir / "adapter.ckpt")
        return ToyModelBackend(model, Tokenizer.load(mdir / "tokenizer.json"))
    raise ConfigError(f"unknown backend {name!r}")


def cmd_infer(s: dict, out_dir: Path) -> int:
    src = _existing(s.get("input"), "input file")
    if src is None:
        raise ConfigError("--input is required")
    tdir = _existing(s.get("templates"), "template directory")
    batch_size = _pick(s, "batch_size", 8)
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    try:
        mode = PromptMode(s.get("mode") or "fused")
        limits = GenerationLimits(_pick(s, "max_new_tokens", 256))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    backend = _backend(s)
    templates = _templates(s.get("task_kind") or "QC", str(tdir) if tdir else None)
    examples = _read_examples(src, s.get("format"))
    results, report = run_inference(
        examples, backend, templates, mode, batch_size, limits,
        use_offline_translation=bool(s.get("offline_translation")), workers=s.get("workers") or 1,
    )
    pred_path = Path(s.get("output") or out_dir / "predictions.jsonl")
    pred_path.parent.mkdir(parents=True, exist_ok=True)
    keep_trace = not s.get("no_trace")
    pred_path.write_text(
        "".join(json.dumps(r.to_dict(keep_trace), ensure_ascii=False) + "\n" for r in results), encoding="utf-8"
    )
    tp_path = out_dir / "throughput.json"
    tp_path.write_text(json.dumps({**report.to_dict(), "seed": s.get("seed", 0)}, indent=2, sort_keys=True) + "\n")
    write_manifest(out_dir, "infer", s, {"input": src, "templates": tdir}, [str(pred_path), str(tp_path)])
    log.info("%d samples in %.3fs (%.1f samples/s)", report.total_samples, report.wall_seconds, report.samples_per_second)
    return EXIT_OK


def cmd_eval(s: dict, out_dir: Path) -> int:
    pred_path = _existing(s.get("predictions"), "predictions file")
    gold_path = _existing(s.get("gold"), "gold file")
    if pred_path is None or gold_path is None:
        raise ConfigError("--predictions and --gold are required")
    rows = [json.loads(line) for line in pred_path.read_text(encoding="utf-8").split("\n") if line.strip()]
    failed = {r["id"] for r in rows if r.get("label") is None}
    if failed:
        log.warning("excluding %d failed predictions from metrics", len(failed))
    preds = [(r["id"], r["label"]) for r in rows if r["id"] not in failed]
    gold_examples = _read_examples(gold_path, s.get("format"))
    unlabeled = [ex.id for ex in gold_examples if ex.label is None]
    if unlabeled:
        raise RuntimeError(f"gold examples without labels: {unlabeled[:10]}")
    gold = [(ex.id, ex.label) for ex in gold_examples if ex.id not in failed]
    report: EvalReport = evaluate(preds, gold, {ex.id: ex.query.language.code for ex in gold_examples})
    path = out_dir / "eval_report.json"
    payload = {**report.to_dict(), "excluded_failures": sorted(failed), "seed": s.get("seed", 0)}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(out_dir, "eval", s, {"predictions": pred_path, "gold": gold_path}, [str(path)])
    print(f"accuracy {report.accuracy:.4f}  precision {report.precision:.4f}  recall {report.recall:.4f}  f1 {report.f1:.4f}")
    return EXIT_OK


def cmd_bench(s: dict, out_dir: Path) -> int:
    n = _pick(s, "n", 10_000)
    batch_size = _pick(s, "batch_size", 8)
    if n < 1 or batch_size < 1:
        raise ConfigError("--n and --batch-size must be >= 1")
    try:
        mode = PromptMode(s.get("mode") or "fused")
    except ValueError:
        raise ConfigError(f"unknown mode {s.get('mode')!r}") from None
    report = bench_overhead(n, batch_size, mode=mode)
    path = out_dir / "bench_report.json"
    path.write_text(json.dumps({**report.to_dict(), "seed": s.get("seed", 0)}, indent=2, sort_keys=True) + "\n")
    write_manifest(out_dir, "bench", s, {}, [str(path)])
    print(f"{report.total_samples} samples in {report.wall_seconds:.3f}s: {report.samples_per_second:.1f} samples/s")
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


# --- argument parsing -----------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=S, help="JSON config file")
    common.add_argument("--seed", type=int, default=S)
    common.add_argument("--out-dir", default=S)
    common.add_argument("-v", "--verbose", action="store_true", default=S)

    parser = _Parser(prog="cotlora", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"cotlora {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", parents=[common], help="complete languages, normalize, translate")
    p.add_argument("--input", default=S)
    p.add_argument("--format", choices=["jsonl", "csv"], default=S)
    p.add_argument("--languages", default=S, help="code,name CSV")
    p.add_argument("--translator", choices=["dictionary", "none"], default=S)
    p.add_argument("--dictionary", default=S, help="JSON phrase dictionary")
    p.add_argument("--output", default=S)

    p = sub.add_parser("build-dataset", parents=[common], help="render CoT instruction records")
    p.add_argument("--input", default=S)
    p.add_argument("--format", choices=["jsonl", "csv"], default=S)
    p.add_argument("--mode", choices=["staged", "fused"], default=S)
    p.add_argument("--task-kind", choices=["QC", "QI"], default=S)
    p.add_argument("--templates", default=S, help="template directory (default: shipped set)")
    p.add_argument("--dictionary", default=S)
    p.add_argument("--offline-translation", action="store_true", default=S)
    p.add_argument("--output", default=S)

    p = sub.add_parser("train", parents=[common], help="LoRA fine-tuning of the toy transformer")
    p.add_argument("--dataset", default=S)
    p.add_argument("--train-config", default=S, help="TrainConfig JSON")
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--grad-accum", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--max-steps", type=int, default=S)
    p.add_argument("--loss-mask", choices=["response_only", "full_sequence"], default=S)
    p.add_argument("--stages", choices=["all", "judgment"], default=S)
    p.add_argument("--rank", type=int, default=S)
    p.add_argument("--alpha", type=float, default=S)
    p.add_argument("--dropout", type=float, default=S)
    p.add_argument("--targets", nargs="+", default=S)
    p.add_argument("--d-model", type=int, default=S)
    p.add_argument("--n-heads", type=int, default=S)
    p.add_argument("--n-layers", type=int, default=S)
    p.add_argument("--d-ff", type=int, default=S)
    p.add_argument("--max-seq-len", type=int, default=S)
    p.add_argument("--max-vocab", type=int, default=S)

    p = sub.add_parser("infer", parents=[common], help="batched inference")
    p.add_argument("--input", default=S)
    p.add_argument("--format", choices=["jsonl", "csv"], default=S)
    p.add_argument("--backend", choices=["rule", "null", "toy"], default=S)
    p.add_argument("--model-dir", default=S)
    p.add_argument("--mode", choices=["staged", "fused"], default=S)
    p.add_argument("--task-kind", choices=["QC", "QI"], default=S)
    p.add_argument("--templates", default=S)
    p.add_argument("--dictionary", default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--workers", type=int, default=S)
    p.add_argument("--max-new-tokens", type=int, default=S)
    p.add_argument("--offline-translation", action="store_true", default=S)
    p.add_argument("--no-trace", action="store_true", default=S)
    p.add_argument("--output", default=S)

    p = sub.add_parser("eval", parents=[common], help="accuracy / F1 against gold labels")
    p.add_argument("--predictions", default=S)
    p.add_argument("--gold", default=S)
    p.add_argument("--format", choices=["jsonl", "csv"], default=S)

    p = sub.add_parser("bench", parents=[common], help="harness overhead with the null backend")
    p.add_argument("--n", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--mode", choices=["staged", "fused"], default=S)
    return parser


def resolve_settings(args: argparse.Namespace) -> dict[str, Any]:
    """Merge config file (global + command section) under command-line flags."""
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    file_cfg: dict[str, Any] = {}
    config_path = getattr(args, "config", None)
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {config_path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid config JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        section = raw.get(args.command, {})
        file_cfg = {k: v for k, v in raw.items() if not isinstance(v, dict)}
        file_cfg.update(section)
    settings = {**file_cfg, **flags}
    settings.setdefault("out_dir", ".")
    return settings


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        settings = resolve_settings(args)
        settings.pop("verbose", None)
        out_dir = Path(settings["out_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](settings, out_dir)
    except ConfigError as exc:
        print(f"cotlora {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"cotlora {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
