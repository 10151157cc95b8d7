"""Four-stage CoT prompt rendering, instruction-dataset construction and response parsing."""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

from ..core import CoTTrace, Label, RelevanceExample, TaskKind


class Stage(enum.IntEnum):
    TRANSLATION = 1
    INTENT_UNDERSTANDING = 2
    CATEGORY_MATCHING = 3
    RELEVANCE_JUDGMENT = 4

    @property
    def title(self) -> str:
        return _TITLES[self]

    @property
    def heading(self) -> str:
        return f"Step {int(self)}: {self.title}"

    @classmethod
    def parse(cls, name: str) -> "Stage":
        key = re.sub(r"[^a-z]", "", name.lower())
        for stage in cls:
            if key in (re.sub(r"[^a-z]", "", stage.name.lower()), re.sub(r"[^a-z]", "", stage.title.lower())):
                return stage
        raise ValueError(f"unknown stage {name!r}")


_TITLES = {
    Stage.TRANSLATION: "Translation",
    Stage.INTENT_UNDERSTANDING: "Intent Understanding",
    Stage.CATEGORY_MATCHING: "Category Matching",
    Stage.RELEVANCE_JUDGMENT: "Relevance Judgment",
}

# placeholders a stage may reference; later stages see everything produced before them
STAGE_PLACEHOLDERS: dict[Stage, frozenset[str]] = {
    Stage.TRANSLATION: frozenset({"query", "language"}),
    Stage.INTENT_UNDERSTANDING: frozenset({"query", "language", "translation"}),
    Stage.CATEGORY_MATCHING: frozenset({"query", "language", "translation", "intent", "category_path"}),
    Stage.RELEVANCE_JUDGMENT: frozenset(
        {"query", "language", "translation", "intent", "category_path", "matching_analysis"}
    ),
}
ALL_PLACEHOLDERS = STAGE_PLACEHOLDERS[Stage.RELEVANCE_JUDGMENT]

_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
_LABEL_TOKEN_RE = re.compile(r"(?<![\w.])([01])(?!\w|\.\d)")


class PromptMode(str, enum.Enum):
    STAGED = "staged"
    FUSED = "fused"


class TemplateError(ValueError):
    pass


class TraceParseError(ValueError):
    pass


def placeholders(body: str) -> list[str]:
    return _PLACEHOLDER_RE.findall(body)


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    stage: Stage
    task_kind: TaskKind
    body: str
    version: str = "1"

    def __post_init__(self):
        allowed = STAGE_PLACEHOLDERS[self.stage]
        bad = sorted(set(placeholders(self.body)) - allowed)
        if bad:
            raise TemplateError(
                f"template {self.template_id!r} ({self.stage.title}) references invalid placeholders {bad}"
            )
        if not self.body.strip():
            raise TemplateError(f"template {self.template_id!r} has an empty body")

    @classmethod
    def parse(cls, text: str) -> "PromptTemplate":
        """Parse ``---``-delimited front matter followed by the body."""
        lines = text.splitlines()
        if not lines or lines[0].strip() != "---":
            raise TemplateError("template must start with a '---' front-matter block")
        try:
            end = next(i for i in range(1, len(lines)) if lines[i].strip() == "---")
        except StopIteration:
            raise TemplateError("unterminated front matter") from None
        meta = {}
        for line in lines[1:end]:
            key, sep, value = line.partition(":")
            if not sep:
                raise TemplateError(f"bad front-matter line {line!r}")
            meta[key.strip()] = value.strip()
        missing = {"template_id", "stage", "task_kind", "version"} - meta.keys()
        if missing:
            raise TemplateError(f"front matter missing {sorted(missing)}")
        body = "\n".join(lines[end + 1 :]).strip("\n")
        return cls(meta["template_id"], Stage.parse(meta["stage"]), TaskKind(meta["task_kind"]), body, meta["version"])

    def dump(self) -> str:
        stage_name = "".join(w.capitalize() for w in self.stage.name.split("_"))
        return (
            f"---\ntemplate_id: {self.template_id}\nstage: {stage_name}\n"
            f"task_kind: {self.task_kind.value}\nversion: {self.version}\n---\n{self.body}\n"
        )


def load_template(path: str | Path) -> PromptTemplate:
    return PromptTemplate.parse(Path(path).read_text(encoding="utf-8"))


def load_templates(task_kind: TaskKind | str = TaskKind.QC, directory: str | Path | None = None) -> list[PromptTemplate]:
    """Load the four stage templates for ``task_kind``, from ``directory`` or the shipped set."""
    kind = TaskKind(task_kind)
    if directory is None:
        root = resources.files("cotlora.prompts") / "templates"
        texts = [p.read_text(encoding="utf-8") for p in root.iterdir() if p.name.endswith(".txt")]
    else:
        texts = [p.read_text(encoding="utf-8") for p in sorted(Path(directory).glob("*.txt"))]
    templates = [t for t in map(PromptTemplate.parse, texts) if t.task_kind is kind]
    return sorted(templates, key=lambda t: t.stage)


def check_template_set(templates: Sequence[PromptTemplate]) -> dict[Stage, PromptTemplate]:
    if len({t.task_kind for t in templates}) > 1:
        raise TemplateError("inconsistent task_kind")
    by_stage: dict[Stage, PromptTemplate] = {}
    for t in templates:
        if t.stage in by_stage:
            raise TemplateError(f"duplicate stage: {t.stage.name.title().replace('_', '')}")
        by_stage[t.stage] = t
    for stage in Stage:
        if stage not in by_stage:
            raise TemplateError(f"missing stage: {stage.name.title().replace('_', '')}")
    return by_stage


def render_stage_prompt(template: PromptTemplate, context: Mapping[str, str]) -> str:
    needed = placeholders(template.body)
    for name in needed:
        if name not in context or context[name] is None:
            raise TemplateError(f"missing placeholder: {name}")
    if "query" in needed and not str(context["query"]).strip():
        raise TemplateError("empty query")
    # single pass, so substituted text is never re-expanded
    return _PLACEHOLDER_RE.sub(lambda m: str(context[m.group(1)]), template.body)


def example_context(example: RelevanceExample, use_offline_translation: bool = False) -> dict[str, str]:
    q = example.query
    ctx = {
        "query": q.raw_text,
        "language": q.language.name or q.language.code,
        "category_path": example.category.render(),
    }
    if use_offline_translation:
        if q.english_text is None:
            raise ValueError(f"example {example.id!r} has no offline translation")
        ctx["translation"] = q.english_text
    return ctx


# stand-ins for intermediate outputs the model produces itself in a fused pass
_FUSED_REFERENCES = {
    "translation": "<output of Step 1>",
    "intent": "<output of Step 2>",
    "matching_analysis": "<output of Step 3>",
}

FUSED_PREAMBLE = (
    "Judge the relevance between an e-commerce search query and a candidate. "
    "Reason step by step and write the output of every step under its heading."
)
FUSED_CLOSING = (
    "Write your answer as the four step headings above, each followed by that step's output. "
    'The last line must be "Final answer: 1" (relevant) or "Final answer: 0" (irrelevant).'
)


def render_fused_prompt(
    templates: Sequence[PromptTemplate],
    example: RelevanceExample,
    use_offline_translation: bool = False,
) -> str:
    """One prompt holding all four stage instructions under ``Step N`` headings."""
    by_stage = check_template_set(templates)
    ctx = {**_FUSED_REFERENCES, **example_context(example, use_offline_translation)}
    parts = [FUSED_PREAMBLE]
    for stage in Stage:
        parts.append(f"{stage.heading}\n{render_stage_prompt(by_stage[stage], ctx)}")
    parts.append(FUSED_CLOSING)
    return "\n\n".join(parts)


def render_judgment_response(label: Label, rationale: str | None = None) -> str:
    tail = f"Final answer: {label.render()}"
    return f"{rationale}\n{tail}" if rationale else tail


def render_fused_response(translation: str, intent: str, matching: str, judgment: str) -> str:
    outputs = (translation, intent, matching, judgment)
    return "\n".join(f"{stage.heading}\n{text.strip()}" for stage, text in zip(Stage, outputs))


# --- parsing -------------------------------------------------------------


def parse_judgment(response: str) -> Label:
    """Label from the last non-empty line: one standalone ``0`` or ``1`` token."""
    lines = [ln for ln in response.splitlines() if ln.strip()]
    if not lines:
        raise TraceParseError("no label found")
    found = set(_LABEL_TOKEN_RE.findall(lines[-1]))
    if not found:
        raise TraceParseError("no label found")
    if len(found) > 1:
        raise TraceParseError("ambiguous label")
    return Label(int(found.pop()))


def split_fused_response(response: str) -> dict[Stage, str]:
    lines = response.splitlines()
    positions: dict[Stage, int] = {}
    for i, line in enumerate(lines):
        for stage in Stage:
            if line.strip() == stage.heading and stage not in positions:
                positions[stage] = i
    for stage in Stage:
        if stage not in positions:
            raise TraceParseError(f"missing heading for stage {stage.title}")
    order = [positions[s] for s in Stage]
    if order != sorted(order):
        raise TraceParseError("stage headings out of order")
    bounds = order + [len(lines)]
    return {stage: "\n".join(lines[bounds[i] + 1 : bounds[i + 1]]).strip() for i, stage in enumerate(Stage)}


def parse_trace(
    response: str | Sequence[str],
    mode: PromptMode | str = PromptMode.FUSED,
    prompts: Sequence[str] = (),
) -> CoTTrace:
    mode = PromptMode(mode)
    if mode is PromptMode.FUSED:
        if not isinstance(response, str):
            raise TypeError("fused mode expects a single response text")
        sections = split_fused_response(response)
        responses = (response,)
    else:
        if isinstance(response, str) or len(response) != len(Stage):
            raise TraceParseError("staged mode expects exactly four responses")
        sections = {stage: text.strip() for stage, text in zip(Stage, response)}
        responses = tuple(response)
    return CoTTrace(
        translation=sections[Stage.TRANSLATION],
        intent=sections[Stage.INTENT_UNDERSTANDING],
        matching_analysis=sections[Stage.CATEGORY_MATCHING],
        judgment=parse_judgment(sections[Stage.RELEVANCE_JUDGMENT]),
        prompts=tuple(prompts),
        responses=responses,
    )


# --- instruction dataset -------------------------------------------------


class StageOracle(Protocol):
    """Supplies gold intermediate outputs for supervision."""

    def translate(self, example: RelevanceExample) -> str: ...

    def intent(self, example: RelevanceExample, translation: str) -> str: ...

    def match(self, example: RelevanceExample, translation: str, intent: str) -> str: ...


@dataclass(frozen=True)
class InstructionRecord:
    instruction: str
    input: str
    response: str
    stage: Stage | None  # None for a fused record covering all four stages
    source_example_id: str

    def __post_init__(self):
        if not self.instruction.strip():
            raise ValueError("empty instruction")
        if not self.response.strip():
            raise ValueError("empty response")
        if self.stage in (Stage.RELEVANCE_JUDGMENT, None):
            parse_judgment(self.response)

    def to_dict(self) -> dict:
        return {
            "instruction": self.instruction,
            "input": self.input,
            "response": self.response,
            "stage": "Fused" if self.stage is None else self.stage.title,
            "source_example_id": self.source_example_id,
        }

    @classmethod
    def from_dict(cls, row: Mapping) -> "InstructionRecord":
        stage = None if row["stage"] == "Fused" else Stage.parse(row["stage"])
        return cls(row["instruction"], row.get("input", ""), row["response"], stage, row["source_example_id"])


def write_instruction_jsonl(records: Iterable[InstructionRecord]) -> str:
    return "".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n" for r in records)


def read_instruction_jsonl(text: str) -> list[InstructionRecord]:
    return [InstructionRecord.from_dict(json.loads(line)) for line in text.split("\n") if line.strip()]


def build_instruction_dataset(
    examples: Sequence[RelevanceExample],
    templates: Sequence[PromptTemplate],
    mode: PromptMode | str,
    oracle: StageOracle,
    use_offline_translation: bool = False,
) -> list[InstructionRecord]:
    """Staged mode: four records per example. Fused mode: one record per example.

    Intermediate responses come from ``oracle``; the judgment response always
    carries the example's gold label.
    """
    mode = PromptMode(mode)
    by_stage = check_template_set(templates)
    records: list[InstructionRecord] = []
    for ex in examples:
        if ex.label is None:
            raise ValueError(f"example {ex.id!r} has no label")
        try:
            translation = oracle.translate(ex)
            intent = oracle.intent(ex, translation)
            matching = oracle.match(ex, translation, intent)
        except Exception as exc:
            raise RuntimeError(f"oracle failed on example {ex.id!r}: {exc}") from exc
        judgment = render_judgment_response(ex.label)
        if mode is PromptMode.FUSED:
            records.append(
                InstructionRecord(
                    render_fused_prompt(templates, ex, use_offline_translation),
                    "",
                    render_fused_response(translation, intent, matching, judgment),
                    None,
                    ex.id,
                )
            )
            continue
        ctx = example_context(ex)
        ctx.update(translation=translation, intent=intent, matching_analysis=matching)
        outputs = (translation, intent, matching, judgment)
        for stage, output in zip(Stage, outputs):
            prompt = render_stage_prompt(by_stage[stage], ctx)
            records.append(InstructionRecord(prompt, "", output, stage, ex.id))
    return records
