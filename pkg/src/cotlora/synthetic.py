"""Rule-oracle-labelled synthetic relevance corpora for tests and the toy SFT run."""

from __future__ import annotations

import numpy as np

from .core import CategoryPath, Label, LanguageTag, QueryRecord, RelevanceExample, TaskKind
from .prompts.oracle import RuleOracle

CATALOG: tuple[tuple[str, str], ...] = (
    ("shoes", "Shoes > Running Shoes"),
    ("watch", "Jewelry > Watches"),
    ("dress", "Clothing > Women > Dresses"),
    ("backpack", "Bags > Backpacks"),
    ("laptop", "Electronics > Computers > Laptops"),
    ("headphones", "Electronics > Audio > Headphones"),
    ("frying pan", "Home > Kitchen > Cookware"),
    ("t-shirt", "Clothing > Men > T-Shirts"),
    ("toys", "Toys > Kids"),
    ("handbag", "Bags > Handbags"),
    ("mug", "Home > Kitchen > Drinkware"),
    ("smartphone", "Electronics > Mobile Phones"),
)
COLORS = ("red", "blue", "black", "white", "green")
MATERIALS = ("leather", "cotton", "steel")
GENDERS = ("men", "women", "kids")


def synthetic_examples(n: int, seed: int = 0, balanced: bool = True) -> list[RelevanceExample]:
    """English query-category pairs labelled by ``RuleOracle``.

    Half the candidates use the product's own category, half a random other
    one; with ``balanced`` the result holds ``n // 2`` of each label.
    """
    rng = np.random.default_rng(seed)
    oracle = RuleOracle()
    want = {Label.RELEVANT: n // 2, Label.IRRELEVANT: n - n // 2} if balanced else None
    out: list[RelevanceExample] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 100 * n + 1000:
            raise RuntimeError("could not draw a balanced corpus")
        ptype, home = CATALOG[rng.integers(len(CATALOG))]
        words = []
        if rng.random() < 0.5:
            words.append(COLORS[rng.integers(len(COLORS))])
        if rng.random() < 0.3:
            words.append(MATERIALS[rng.integers(len(MATERIALS))])
        words.append(ptype)
        if rng.random() < 0.4:
            words += ["for", GENDERS[rng.integers(len(GENDERS))]]
        if rng.random() < 0.5:
            category = home
        else:
            category = CATALOG[rng.integers(len(CATALOG))][1]
        ex = RelevanceExample(
            QueryRecord(f"syn{len(out):05d}", " ".join(words), LanguageTag("en", "English")),
            CategoryPath.parse(category),
            None,
            TaskKind.QC,
        )
        label = oracle.label(ex)
        if want is not None:
            if want[label] == 0:
                continue
            want[label] -= 1
        out.append(RelevanceExample(ex.query, ex.category, label, ex.task_kind))
    return out
