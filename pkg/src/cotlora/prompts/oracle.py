"""Keyword/attribute rule system that produces gold intermediate outputs.

Used both as the ``StageOracle`` for building supervision and as the logic
behind the rule-oracle generation backend. The rules are deliberately small
and easy to apply by hand:

* product type: last word of the English query that is not an attribute or a
  stopword, looking only before the first "for"/"with";
* type consistency: the type (or a listed synonym) appears in some category
  level; the deepest such level is the hierarchical alignment;
* attribute compatibility: a gender or material attribute of the query
  conflicts with a different member of the same group named in the category;
* relevant iff the type is consistent and the attributes are compatible.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

from ..core import Label, LanguageTag, RelevanceExample
from ..preprocess import DictionaryTranslator

ATTRIBUTE_GROUPS: dict[str, frozenset[str]] = {
    "gender": frozenset({"men", "women", "kids", "boys", "girls", "baby", "unisex"}),
    "color": frozenset(
        {"red", "blue", "black", "white", "green", "yellow", "pink", "purple", "grey", "gray", "brown", "orange"}
    ),
    "material": frozenset({"leather", "cotton", "wool", "silk", "steel", "wooden", "plastic", "glass", "ceramic"}),
    "size": frozenset({"small", "large", "mini", "big", "xl", "medium"}),
}
CONFLICT_GROUPS = ("gender", "material")
_ALIASES = {
    "man": "men", "mens": "men", "woman": "women", "womens": "women", "ladies": "women",
    "kid": "kids", "child": "kids", "children": "kids", "boy": "boys", "girl": "girls",
}
STOPWORDS = frozenset({"for", "with", "and", "the", "a", "an", "of", "in", "on", "to", "by", "cheap", "best", "new"})
_CUT_WORDS = ("for", "with")
SYNONYMS: dict[str, frozenset[str]] = {
    "shoe": frozenset({"footwear"}),
    "sneaker": frozenset({"shoe", "footwear"}),
    "boot": frozenset({"shoe", "footwear"}),
    "sandal": frozenset({"shoe", "footwear"}),
    "pan": frozenset({"cookware", "skillet"}),
    "skillet": frozenset({"cookware", "pan"}),
    "pot": frozenset({"cookware"}),
    "laptop": frozenset({"computer", "notebook"}),
    "smartphone": frozenset({"phone", "mobile"}),
    "phone": frozenset({"smartphone", "mobile"}),
    "headphone": frozenset({"audio", "earphone"}),
    "earbud": frozenset({"audio", "headphone"}),
    "handbag": frozenset({"bag"}),
    "tee": frozenset({"t-shirt"}),
    "mug": frozenset({"drinkware", "cup"}),
}
_WORD_RE = re.compile(r"[a-z0-9]+(?:['’-][a-z0-9]+)*")

_INTENT_RE = re.compile(r"product type:\s*([^;]+);\s*attributes:\s*(.+)$")
_TYPE_RE = re.compile(r"type consistency:\s*(consistent|inconsistent)")
_ATTR_RE = re.compile(r"attribute compatibility:\s*(compatible|incompatible)")


def attribute_group(word: str) -> str | None:
    for group, members in ATTRIBUTE_GROUPS.items():
        if word in members:
            return group
    return None


def singular(word: str) -> str:
    if len(word) <= 3:
        return word
    if word.endswith("ies"):
        return word[:-3] + "y"
    if word.endswith(("sses", "xes", "ches", "shes")):
        return word[:-2]
    if word.endswith("s") and not word.endswith(("ss", "us")):
        return word[:-1]
    return word


def canonical(word: str) -> str:
    w = word.lower().replace("’", "'")
    if w.endswith("'s"):
        w = w[:-2]
    w = _ALIASES.get(w, w)
    if attribute_group(w) is not None:
        return w
    return singular(w)


def words(text: str) -> list[str]:
    return [canonical(w) for w in _WORD_RE.findall(text.lower())]


@dataclass(frozen=True)
class Intent:
    product_type: str
    attributes: tuple[str, ...]

    def render(self) -> str:
        attrs = ", ".join(self.attributes) or "none"
        return f"intent: find {self.product_type}; product type: {self.product_type}; attributes: {attrs}"

    @classmethod
    def parse(cls, text: str) -> "Intent":
        m = _INTENT_RE.search(text.strip())
        if not m:
            raise ValueError(f"unparseable intent {text!r}")
        attrs = m.group(2).strip()
        return cls(m.group(1).strip(), () if attrs == "none" else tuple(a.strip() for a in attrs.split(",")))


def extract_intent(english: str) -> Intent:
    toks = words(english)
    head = toks
    for cut in _CUT_WORDS:
        if cut in head:
            head = head[: head.index(cut)]
    candidates = [t for t in head if t not in STOPWORDS and attribute_group(t) is None]
    product_type = candidates[-1] if candidates else "unknown"
    attrs: list[str] = []
    for t in toks:
        if attribute_group(t) is not None and t not in attrs:
            attrs.append(t)
    return Intent(product_type, tuple(attrs))


def match_analysis(intent: Intent, levels: Sequence[str]) -> str:
    level_words = [set(words(level)) for level in levels]
    targets = {intent.product_type} | SYNONYMS.get(intent.product_type, frozenset())
    hits = [i for i, ws in enumerate(level_words) if intent.product_type != "unknown" and ws & targets]
    if hits:
        deepest = hits[-1]
        type_part = f"type consistency: consistent ({intent.product_type} ~ {levels[deepest]})"
        align = f"hierarchical alignment: level {deepest + 1} of {len(levels)}"
    else:
        type_part = f"type consistency: inconsistent ({intent.product_type} not in path)"
        align = "hierarchical alignment: no level matches"
    category_words = set().union(*level_words)
    conflicts = []
    for group in CONFLICT_GROUPS:
        mine = {a for a in intent.attributes if a in ATTRIBUTE_GROUPS[group]}
        theirs = category_words & ATTRIBUTE_GROUPS[group]
        if mine and theirs and not (mine & theirs):
            conflicts.append(f"{'/'.join(sorted(mine))} vs {'/'.join(sorted(theirs))}")
    if conflicts:
        attr_part = f"attribute compatibility: incompatible ({'; '.join(conflicts)})"
    else:
        attr_part = "attribute compatibility: compatible"
    return f"{type_part}; {align}; {attr_part}"


def judge(matching: str) -> Label:
    t = _TYPE_RE.search(matching)
    a = _ATTR_RE.search(matching)
    if not t or not a:
        raise ValueError(f"unparseable matching analysis {matching!r}")
    ok = t.group(1) == "consistent" and a.group(1) == "compatible"
    return Label.RELEVANT if ok else Label.IRRELEVANT


def judgment_rationale(label: Label) -> str:
    if label is Label.RELEVANT:
        return "The product type is consistent and the attributes are compatible."
    return "The product type is inconsistent or the attributes conflict."


@lru_cache(maxsize=1)
def default_translator() -> DictionaryTranslator:
    text = (resources.files("cotlora") / "data" / "dictionary.json").read_text(encoding="utf-8")
    return DictionaryTranslator(json.loads(text))


class RuleOracle:
    """Deterministic ``StageOracle`` built from the rules above."""

    def __init__(self, translator=None):
        self.translator = translator or default_translator()

    def translate_text(self, text: str, language: LanguageTag) -> str:
        return text if language.code == "en" else self.translator(text, language)

    def translate(self, example: RelevanceExample) -> str:
        english = example.query.english_text
        if english is not None:
            return english
        return self.translate_text(example.query.raw_text, example.query.language)

    def intent(self, example: RelevanceExample, translation: str) -> str:
        return extract_intent(translation).render()

    def match(self, example: RelevanceExample, translation: str, intent: str) -> str:
        return match_analysis(Intent.parse(intent), example.category.levels)

    def label(self, example: RelevanceExample) -> Label:
        translation = self.translate(example)
        intent = self.intent(example, translation)
        return judge(self.match(example, translation, intent))
