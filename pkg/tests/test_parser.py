from __future__ import annotations

import datetime as dt
import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialogmem.parser import (
    COMPLETE,
    ENTITY_TYPES,
    ParseReport,
    RawEntity,
    RawRelation,
    normalize_time,
    parse_extraction,
    serialize_report,
)

GRAMMAR = Path(__file__).parent / "fixtures" / "grammar"
EXPECTED = json.loads((GRAMMAR / "expected.json").read_text())


def check_fixture(name: str) -> None:
    raw = (GRAMMAR / f"{name}.txt").read_bytes()
    want = EXPECTED[name]
    rep = parse_extraction(raw)
    got_entities = [[e.name, e.etype, e.description, e.implicit] for e in rep.entities]
    got_relations = [[r.source, r.target, r.description, r.strength] for r in rep.relations]
    assert got_entities == want["entities"], name
    assert got_relations == want["relations"], name
    assert rep.complete_marker_seen is want["complete"], name
    assert len(rep.warnings) == len(want["warnings"]), (name, rep.warnings)
    for fragment, warning in zip(want["warnings"], rep.warnings):
        assert fragment in warning, (name, fragment, warning)
    unresolved = [e.name for e in rep.entities if e.unresolved_time]
    assert unresolved == want.get("unresolved", []), name


@pytest.mark.parametrize("name", sorted(EXPECTED))
def test_grammar_fixture(name):
    check_fixture(name)


def test_every_fixture_has_an_expectation():
    assert {p.stem for p in GRAMMAR.glob("*.txt")} == set(EXPECTED)


def test_parser_accepts_str_and_bytes():
    text = (GRAMMAR / "single_entity.txt").read_text()
    assert parse_extraction(text).same_content(parse_extraction(text.encode()))


@given(st.binary(max_size=300))
@settings(max_examples=300)
def test_random_bytes_never_raise(blob):
    rep = parse_extraction(blob)
    assert isinstance(rep, ParseReport)


names = st.text(alphabet="ABCDEFGHIJ XYZ", min_size=1, max_size=12).map(lambda s: " ".join(s.split())).filter(bool)
descs = st.text(alphabet="abcdefghij ,.'-0123456789", max_size=30).map(str.strip)


@st.composite
def reports(draw):
    ents = draw(st.lists(st.tuples(names, st.sampled_from(ENTITY_TYPES), descs), max_size=6, unique_by=lambda t: t[0]))
    entities = [RawEntity(n, "Time" if t == "Time" else t, d, unresolved_time=(t == "Time")) for n, t, d in ents]
    rels = []
    if len(entities) >= 2:
        for _ in range(draw(st.integers(0, 5))):
            a, b = draw(st.sampled_from(entities)), draw(st.sampled_from(entities))
            rels.append(RawRelation(a.name, b.name, draw(descs), draw(st.integers(1, 10))))
    return ParseReport(entities, rels, [], draw(st.booleans()))


@given(reports())
@settings(max_examples=200)
def test_serialize_then_parse_round_trips(report):
    again = parse_extraction(serialize_report(report))
    assert again.same_content(report)


@given(reports())
@settings(max_examples=200)
def test_record_count_conservation(report):
    text = serialize_report(report)
    body = text.replace(COMPLETE, "")
    well_formed = sum(1 for chunk in body.split("##") if chunk.strip())
    again = parse_extraction(text)
    assert well_formed == len(again.entities) + len(again.relations)


# --- time normalization -----------------------------------------------------------

REF = dt.date(2023, 6, 11)  # a Sunday


@pytest.mark.parametrize(
    "phrase, expected",
    [
        ("March 2nd", dt.date(2023, 3, 2)),
        ("yesterday", dt.date(2023, 6, 10)),
        ("every morning", None),
        ("three times a week", None),
        ("2023/01/05", dt.date(2023, 1, 5)),
        ("2023-1-5", dt.date(2023, 1, 5)),
        ("December 25th", dt.date(2022, 12, 25)),
        ("June 11", dt.date(2023, 6, 11)),
        ("June 12", dt.date(2022, 6, 12)),
        ("5th of May, 2021", dt.date(2021, 5, 5)),
        ("last week", dt.date(2023, 6, 4)),
        ("3 days ago", dt.date(2023, 6, 8)),
        ("two weeks ago", dt.date(2023, 5, 28)),
        ("last month", dt.date(2023, 5, 11)),
        ("last weekend", dt.date(2023, 6, 3)),
        ("today", REF),
        ("on March 3rd.", dt.date(2023, 3, 3)),
        ("February 30", None),
        ("2023/13/01", None),
    ],
)
def test_normalize_time(phrase, expected):
    assert normalize_time(phrase, REF) == expected


def test_last_month_clamps_day():
    assert normalize_time("last month", dt.date(2023, 3, 31)) == dt.date(2023, 2, 28)


def test_leap_day_nearest_past():
    assert normalize_time("February 29", dt.date(2023, 6, 11)) == dt.date(2020, 2, 29)


@given(st.dates(min_value=dt.date(1990, 1, 1), max_value=dt.date(2090, 1, 1)), st.integers(0, 400))
def test_days_ago_matches_calendar_arithmetic(ref, n):
    assert normalize_time(f"{n} days ago", ref) == ref - dt.timedelta(days=n)


@given(st.dates(min_value=dt.date(1990, 1, 1), max_value=dt.date(2090, 1, 1)), st.integers(1, 12), st.integers(1, 28))
def test_yearless_dates_never_after_reference(ref, month, day):
    got = normalize_time(f"{dt.date(2000, month, 1):%B} {day}", ref)
    assert got is not None and got <= ref and (got.month, got.day) == (month, day)
    assert (ref - got).days < 366
