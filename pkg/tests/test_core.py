import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cotlora.core import (
    CATEGORY_SEPARATOR,
    CategoryPath,
    Label,
    LanguageTag,
    ParseError,
    QueryRecord,
    RelevanceExample,
    TaskKind,
    parse_examples,
    write_examples,
)


def test_jsonl_row_maps_fields():
    row = '{"id":"q1","query":"zapatos rojos","language":"es","category":"Shoes > Women","label":1}'
    (ex,) = parse_examples(row)
    assert ex.id == "q1"
    assert ex.query.raw_text == "zapatos rojos"
    assert ex.query.language.code == "es"
    assert ex.label is Label.RELEVANT
    assert ex.category.levels == ("Shoes", "Women")
    assert ex.task_kind is TaskKind.QC


def test_invalid_label_reports_line():
    text = (
        '{"id":"a","query":"x","language":"en","category":"A","label":0}\n'
        '{"id":"b","query":"y","language":"en","category":"A","label":2}\n'
    )
    with pytest.raises(ParseError, match="invalid label at line 2") as err:
        parse_examples(text)
    assert err.value.line == 2


def test_empty_stream():
    assert parse_examples("") == []
    assert parse_examples("", "csv") == []


@pytest.mark.parametrize(
    "row, message",
    [
        ('{"id":"a","query":"   ","language":"en","category":"A"}', "empty query"),
        ('{"id":"a","query":"x","language":"en"}', "missing field"),
        ("{not json", "malformed"),
        ('{"id":"a","query":"x","language":"en","category":"A","label":true}', "invalid label"),
    ],
)
def test_bad_rows(row, message):
    with pytest.raises(ParseError, match=message):
        parse_examples(row)


def test_csv_header_and_rows():
    text = 'id,query,language,category,label\nq1,"red, shoes",en,Shoes > Women,1\nq2,blue hat,en,Hats,\n'
    a, b = parse_examples(text, "csv")
    assert a.query.raw_text == "red, shoes"
    assert a.label is Label.RELEVANT
    assert b.label is None


def test_csv_bad_label_line_number():
    text = "id,query,language,category,label\nq1,a,en,A,1\nq2,b,en,B,7\n"
    with pytest.raises(ParseError, match="line 3"):
        parse_examples(text, "csv")


def test_write_empty_and_single():
    assert write_examples([]) == ""
    ex = RelevanceExample(QueryRecord("q", "red shoes", LanguageTag("en")), CategoryPath(("Shoes",)), Label.RELEVANT)
    out = write_examples([ex])
    assert out.count("\n") == 1
    assert json.loads(out)["label"] == 1


def test_label_bijection():
    for label in Label:
        assert Label.parse(label.render()) is label
        assert Label.parse(int(label)) is label
    assert {int(l) for l in Label} == {0, 1}


def test_category_separator_rejected():
    with pytest.raises(ValueError):
        CategoryPath(("a > b",))
    with pytest.raises(ValueError):
        CategoryPath(())
    with pytest.raises(ValueError):
        CategoryPath(("A", "  "))


def test_english_translation_invariant():
    with pytest.raises(ValueError):
        QueryRecord("q", "red shoes", LanguageTag("en", "English"), "other")
    QueryRecord("q", "red shoes", LanguageTag("en", "English"), "red shoes")


# --- properties ---

_level = st.text(
    alphabet=st.characters(blacklist_categories=("Cs", "Cc", "Zl", "Zp")), min_size=1, max_size=12
).map(str.strip).filter(lambda s: s and CATEGORY_SEPARATOR not in s and ">" not in s)
_text = st.text(alphabet=st.characters(blacklist_categories=("Cs", "Cc", "Zl", "Zp")), min_size=1, max_size=30).filter(
    lambda s: s.strip()
)


@st.composite
def examples(draw):
    code = draw(st.sampled_from(["en", "es", "fr", "ar", "pt-br"]))
    name = draw(st.one_of(st.none(), st.sampled_from(["English", "Spanish", "French"])))
    raw = draw(_text)
    translated = None
    if draw(st.booleans()):
        translated = raw if code == "en" else draw(_text)
    return RelevanceExample(
        QueryRecord(draw(st.text(alphabet=st.characters(blacklist_categories=("Cs", "Cc")), min_size=1, max_size=8)), raw, LanguageTag(code, name), translated),
        CategoryPath(tuple(draw(st.lists(_level, min_size=1, max_size=4)))),
        draw(st.sampled_from([None, Label.RELEVANT, Label.IRRELEVANT])),
        draw(st.sampled_from(list(TaskKind))),
    )


@settings(max_examples=100, deadline=None)
@given(st.lists(examples(), max_size=8), st.sampled_from(["jsonl", "csv"]))
def test_round_trip(batch, fmt):
    assert parse_examples(write_examples(batch, fmt), fmt) == batch


@settings(max_examples=100, deadline=None)
@given(st.lists(_level, min_size=1, max_size=5))
def test_category_render_reparses(levels):
    path = CategoryPath(tuple(levels))
    assert CategoryPath.parse(path.render()) == path


def test_round_trip_100_random_examples():
    import random

    rnd = random.Random(7)
    words = ["red", "zapatos", "montre", "حذاء", "laptop", "cuir", "bag"]
    batch = []
    for i in range(100):
        code = rnd.choice(["en", "es", "fr", "ar"])
        batch.append(
            RelevanceExample(
                QueryRecord(f"id{i}", " ".join(rnd.sample(words, 2)), LanguageTag(code)),
                CategoryPath(tuple(rnd.sample(["Home", "Shoes", "Kitchen", "Women"], rnd.randint(1, 3)))),
                rnd.choice([Label.RELEVANT, Label.IRRELEVANT]),
                rnd.choice(list(TaskKind)),
            )
        )
    for fmt in ("jsonl", "csv"):
        assert parse_examples(write_examples(batch, fmt), fmt) == batch
