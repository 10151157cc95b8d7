"""Domain types shared by every pipeline stage, plus JSONL/CSV (de)serialization."""

from __future__ import annotations

import csv
import enum
import io
import json
import re
import unicodedata
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

CATEGORY_SEPARATOR = " > "
CSV_COLUMNS = ("id", "query", "language", "category", "label")
# written only when some row needs them, so plain files keep the 5-column header
CSV_OPTIONAL_COLUMNS = ("task_kind", "language_name", "translated_text")

_CODE_RE = re.compile(r"^[a-z]+(-[a-z]+)*$")


class ParseError(ValueError):
    """A malformed input row. ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"{message} at line {line}" if line is not None else message)


class Label(enum.IntEnum):
    IRRELEVANT = 0
    RELEVANT = 1

    @classmethod
    def parse(cls, value: object) -> "Label":
        if isinstance(value, Label):
            return value
        if isinstance(value, bool):
            raise ValueError(f"invalid label {value!r}")
        if isinstance(value, str):
            value = value.strip()
            if value not in ("0", "1"):
                raise ValueError(f"invalid label {value!r}")
            return cls(int(value))
        if isinstance(value, int) and value in (0, 1):
            return cls(value)
        if isinstance(value, float) and value in (0.0, 1.0):
            return cls(int(value))
        raise ValueError(f"invalid label {value!r}")

    def render(self) -> str:
        return str(int(self))


class TaskKind(str, enum.Enum):
    QI = "QI"  # query-item
    QC = "QC"  # query-category


@dataclass(frozen=True)
class LanguageTag:
    """``name`` stays None until the code is completed against a language table."""

    code: str
    name: str | None = None

    def __post_init__(self):
        if not self.code or not _CODE_RE.match(self.code):
            raise ValueError(f"invalid language code {self.code!r}")
        if self.name is not None and not self.name.strip():
            raise ValueError("language name must be non-empty")

    @property
    def completed(self) -> bool:
        return self.name is not None


@dataclass(frozen=True)
class QueryRecord:
    id: str
    raw_text: str
    language: LanguageTag
    translated_text: str | None = None

    def __post_init__(self):
        if not self.id or any(unicodedata.category(c) == "Cc" for c in self.id):
            raise ValueError(f"invalid record id {self.id!r}")
        if not self.raw_text.strip():
            raise ValueError(f"empty query for record {self.id!r}")
        if (
            self.language.code == "en"
            and self.translated_text is not None
            and self.translated_text != self.raw_text
        ):
            raise ValueError(f"English record {self.id!r} has a translation differing from its text")

    @property
    def english_text(self) -> str | None:
        if self.translated_text is not None:
            return self.translated_text
        return self.raw_text if self.language.code == "en" else None


@dataclass(frozen=True)
class CategoryPath:
    levels: tuple[str, ...]

    def __post_init__(self):
        levels = tuple(self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise ValueError("category path needs at least one level")
        for level in levels:
            if not level.strip():
                raise ValueError("empty category level")
            if CATEGORY_SEPARATOR in level:
                raise ValueError(f"category level {level!r} contains the separator {CATEGORY_SEPARATOR!r}")

    @classmethod
    def parse(cls, text: str) -> "CategoryPath":
        return cls(tuple(part.strip() for part in text.split(CATEGORY_SEPARATOR)))

    def render(self) -> str:
        return CATEGORY_SEPARATOR.join(self.levels)

    @property
    def leaf(self) -> str:
        return self.levels[-1]

    def __str__(self) -> str:
        return self.render()


@dataclass(frozen=True)
class RelevanceExample:
    query: QueryRecord
    category: CategoryPath
    label: Label | None = None
    task_kind: TaskKind = TaskKind.QC

    @property
    def id(self) -> str:
        return self.query.id


@dataclass(frozen=True)
class CoTTrace:
    """Per-stage outputs of one reasoning pass, in fixed stage order."""

    translation: str
    intent: str
    matching_analysis: str
    judgment: Label
    prompts: tuple[str, ...] = field(default=(), compare=False)
    responses: tuple[str, ...] = field(default=(), compare=False)

    def to_dict(self) -> dict:
        return {
            "translation": self.translation,
            "intent": self.intent,
            "matching_analysis": self.matching_analysis,
            "judgment": int(self.judgment),
        }


def require_labeled(examples: Iterable[RelevanceExample]) -> None:
    for ex in examples:
        if ex.label is None:
            raise ValueError(f"example {ex.id!r} has no label")


# --- serialization -------------------------------------------------------


def _example_from_fields(row: dict, line: int) -> RelevanceExample:
    for key in ("id", "query", "language", "category"):
        if key not in row or row[key] is None:
            raise ParseError(f"missing field {key!r}", line)
    query = row["query"]
    if not isinstance(query, str) or not query.strip():
        raise ParseError("empty query", line)
    raw_label = row.get("label")
    label = None
    if raw_label is not None and raw_label != "":
        try:
            label = Label.parse(raw_label)
        except ValueError:
            raise ParseError("invalid label", line) from None
    category = row["category"]
    translated = row.get("translated_text") or None
    language_name = row.get("language_name") or None
    task_kind = row.get("task_kind") or TaskKind.QC.value
    try:
        if isinstance(category, list):
            path = CategoryPath(tuple(category))
        else:
            path = CategoryPath.parse(str(category))
        tag = LanguageTag(str(row["language"]), language_name)
        record = QueryRecord(str(row["id"]), query, tag, translated)
        kind = TaskKind(task_kind)
    except ValueError as exc:
        raise ParseError(str(exc), line) from None
    return RelevanceExample(record, path, label, kind)


def _example_to_fields(ex: RelevanceExample) -> dict:
    row: dict = {
        "id": ex.query.id,
        "query": ex.query.raw_text,
        "language": ex.query.language.code,
        "category": ex.category.render(),
        "label": None if ex.label is None else int(ex.label),
    }
    if ex.task_kind is not TaskKind.QC:
        row["task_kind"] = ex.task_kind.value
    if ex.query.language.name is not None:
        row["language_name"] = ex.query.language.name
    if ex.query.translated_text is not None:
        row["translated_text"] = ex.query.translated_text
    return row


def _as_text(stream: IO | str | bytes) -> str:
    if isinstance(stream, bytes):
        return stream.decode("utf-8")
    if isinstance(stream, str):
        return stream
    data = stream.read()
    return data.decode("utf-8") if isinstance(data, bytes) else data


def parse_examples(stream: IO | str | bytes, format: str = "jsonl") -> list[RelevanceExample]:
    """Parse a JSONL or CSV stream into examples, preserving input order.

    Errors carry the 1-based line number of the offending row (for CSV the
    header is line 1).
    """
    text = _as_text(stream)
    if format == "jsonl":
        out = []
        # split on "\n" only: str.splitlines also breaks on U+0085/U+2028 inside values
        for lineno, line in enumerate(text.split("\n"), start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError:
                raise ParseError("malformed JSON row", lineno) from None
            if not isinstance(row, dict):
                raise ParseError("row is not a JSON object", lineno)
            out.append(_example_from_fields(row, lineno))
        return out
    if format == "csv":
        if not text.strip():
            return []
        reader = csv.DictReader(io.StringIO(text, newline=""))
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ParseError(f"CSV header missing columns {missing}", 1)
        out = []
        for row in reader:
            lineno = reader.line_num
            if None in row or any(v is None for v in row.values()):
                raise ParseError("wrong number of CSV fields", lineno)
            out.append(_example_from_fields(row, lineno))
        return out
    raise ValueError(f"unknown format {format!r}")


def write_examples(examples: Sequence[RelevanceExample], format: str = "jsonl") -> str:
    """Serialize examples; ``parse_examples`` inverts this exactly."""
    if format == "jsonl":
        lines = [json.dumps(_example_to_fields(ex), ensure_ascii=False) for ex in examples]
        text = "\n".join(lines)
        text = text + "\n" if lines else ""
    elif format == "csv":
        if not examples:
            return ""
        rows = [_example_to_fields(ex) for ex in examples]
        extra = [c for c in CSV_OPTIONAL_COLUMNS if any(c in r for r in rows)]
        buf = io.StringIO(newline="")
        writer = csv.DictWriter(buf, fieldnames=[*CSV_COLUMNS, *extra], lineterminator="\r\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in r.items()})
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown format {format!r}")
    try:
        text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise ValueError(f"unencodable text: {exc}") from None
    return text
