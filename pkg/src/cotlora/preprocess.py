"""Language completion, translation to English and text normalization."""

from __future__ import annotations

import csv
import json
import re
import threading
import unicodedata
from dataclasses import replace
from pathlib import Path
from typing import Callable, Mapping, Protocol

from .core import LanguageTag, QueryRecord, RelevanceExample

DEFAULT_LANGUAGES: dict[str, str] = {
    "en": "English",
    "es": "Spanish",
    "fr": "French",
    "ar": "Arabic",
    "de": "German",
    "it": "Italian",
    "pt": "Portuguese",
    "ja": "Japanese",
    "ko": "Korean",
    "zh": "Chinese",
}

_WS_RE = re.compile(r"\s+")


class UnknownLanguageError(KeyError):
    def __init__(self, code: str):
        self.code = code
        super().__init__(f"unknown language code {code!r}")

    def __str__(self) -> str:
        return self.args[0]


class TranslationError(RuntimeError):
    pass


class LanguageTable:
    """Code -> full language name. Unknown codes raise; nothing passes through."""

    def __init__(self, mapping: Mapping[str, str] | None = None):
        self._names = {k.lower(): v for k, v in (mapping or DEFAULT_LANGUAGES).items()}

    @classmethod
    def from_csv(cls, path: str | Path) -> "LanguageTable":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        mapping = {}
        for row in rows:
            if not row.get("code") or not row.get("name"):
                raise ValueError(f"{path}: language rows need 'code' and 'name'")
            mapping[row["code"].strip()] = row["name"].strip()
        return cls(mapping)

    def __contains__(self, code: str) -> bool:
        return code.lower() in self._names

    def __getitem__(self, code: str) -> str:
        try:
            return self._names[code.lower()]
        except KeyError:
            raise UnknownLanguageError(code) from None

    def codes(self) -> list[str]:
        return sorted(self._names)


class Translator(Protocol):
    """Deterministic ``(text, source language) -> English text``."""

    name: str
    thread_safe: bool

    def __call__(self, text: str, source: LanguageTag) -> str: ...


class DictionaryTranslator:
    """Phrase-dictionary stub translator.

    Looks the whole (casefolded) phrase up first, then falls back to
    word-by-word lookup; words without an entry are kept as-is. Strict mode
    raises instead of keeping unknown words.
    """

    name = "dictionary"
    thread_safe = True

    def __init__(self, table: Mapping[str, Mapping[str, str]], strict: bool = False):
        # table: language code -> {source phrase -> english}
        self.table = {
            lang.lower(): {k.casefold(): v for k, v in phrases.items()}
            for lang, phrases in table.items()
        }
        self.strict = strict

    @classmethod
    def from_json(cls, path: str | Path, strict: bool = False) -> "DictionaryTranslator":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh), strict=strict)

    def __call__(self, text: str, source: LanguageTag) -> str:
        if source.code == "en":
            return text
        phrases = self.table.get(source.code)
        if phrases is None:
            raise TranslationError(f"no dictionary for language {source.code!r}")
        hit = phrases.get(text.casefold())
        if hit is not None:
            return hit
        words = []
        for word in text.split():
            english = phrases.get(word.casefold())
            if english is None:
                if self.strict:
                    raise TranslationError(f"no translation for {word!r} ({source.code})")
                english = word
            words.append(english)
        return " ".join(words)


class _Serialized:
    """Wraps a translator that declares itself unsafe for concurrent calls."""

    def __init__(self, inner: Translator):
        self.inner = inner
        self.name = getattr(inner, "name", type(inner).__name__)
        self.thread_safe = True
        self._lock = threading.Lock()

    def __call__(self, text: str, source: LanguageTag) -> str:
        with self._lock:
            return self.inner(text, source)


def serialized(translator: Translator | Callable) -> Translator:
    if getattr(translator, "thread_safe", False):
        return translator
    return _Serialized(translator)


def complete_language(code: str, table: LanguageTable | None = None) -> LanguageTag:
    if not code or not code.strip():
        raise ValueError("empty language code")
    table = table or LanguageTable()
    code = code.strip().lower()
    return LanguageTag(code, table[code])


def translate_query(record: QueryRecord, translator: Translator | Callable) -> QueryRecord:
    if not record.language.completed:
        raise ValueError(
            f"record {record.id!r}: language {record.language.code!r} was never completed"
        )
    if record.language.code == "en":
        return replace(record, translated_text=record.raw_text)
    try:
        english = translator(record.raw_text, record.language)
    except Exception as exc:
        raise TranslationError(f"translation failed for record {record.id!r}: {exc}") from exc
    if not isinstance(english, str) or not english.strip():
        raise TranslationError(f"translation failed for record {record.id!r}: empty output")
    return replace(record, translated_text=english)


def normalize_text(text: str) -> str:
    text = unicodedata.normalize("NFC", text)
    return _WS_RE.sub(" ", text).strip()


def normalize(record: QueryRecord) -> QueryRecord:
    """NFC-normalize and collapse whitespace in ``raw_text``; casing is kept."""
    text = normalize_text(record.raw_text)
    if not text:
        raise ValueError(f"empty query after normalization (record {record.id!r})")
    translated = record.translated_text
    if translated is not None:
        translated = normalize_text(translated) or None
        if record.language.code == "en":
            translated = text
    return replace(record, raw_text=text, translated_text=translated)


def preprocess_example(
    example: RelevanceExample,
    table: LanguageTable,
    translator: Translator | Callable | None,
) -> RelevanceExample:
    """complete_language -> normalize -> translate_query for one example."""
    q = example.query
    q = replace(q, language=complete_language(q.language.code, table), translated_text=None)
    q = normalize(q)
    if translator is not None:
        q = translate_query(q, translator)
    return replace(example, query=q)
