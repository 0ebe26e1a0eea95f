"""Parser for the entity/relationship record stream emitted by graph extraction.

Grammar::

    record  := "(" tag "<|>" field { "<|>" field } ")"
    stream  := record { "##" record } [ "##" ] "<|COMPLETE|>"

Fields may or may not be wrapped in double quotes. Parsing never raises; problems
are reported as warnings on the returned :class:`ParseReport`.
"""

from __future__ import annotations

import calendar
import datetime as dt
import logging
import re
from dataclasses import dataclass, field

from .textutil import normalize_ws

logger = logging.getLogger(__name__)

FIELD_SEP = "<|>"
RECORD_SEP = "##"
COMPLETE = "<|COMPLETE|>"

ENTITY_TYPES = (
    "User",
    "Person",
    "Object",
    "Resource",
    "Event",
    "Goal/Intention",
    "Time",
    "Statistic",
    "Duration",
    "Place",
    "Organization",
    "Interest/Skill",
    "Sentiment",
    "Health",
    "Behavior",
    "Other",
)
_TYPE_LOOKUP = {t.lower(): t for t in ENTITY_TYPES}

_DATE_NAME_RE = re.compile(r"^\d{4}/\d{2}/\d{2}$")


def canonical_name(name: str) -> str:
    return normalize_ws(name).upper()


@dataclass(frozen=True)
class RawEntity:
    name: str
    etype: str
    description: str
    unresolved_time: bool = False
    implicit: bool = False


@dataclass(frozen=True)
class RawRelation:
    source: str
    target: str
    description: str
    strength: int


@dataclass
class ParseReport:
    entities: list[RawEntity] = field(default_factory=list)
    relations: list[RawRelation] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    complete_marker_seen: bool = False

    def same_content(self, other: "ParseReport") -> bool:
        return (
            self.entities == other.entities
            and self.relations == other.relations
            and self.complete_marker_seen == other.complete_marker_seen
        )


def _unquote(value: str) -> str:
    value = value.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        value = value[1:-1]
    return value.strip()


def _parse_strength(raw: str) -> int | None:
    try:
        value = float(_unquote(raw))
    except ValueError:
        return None
    if value != value:  # NaN
        return None
    return int(round(value))


def parse_extraction(raw: str | bytes) -> ParseReport:
    """Recover every well-formed entity/relationship record from ``raw``."""
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    report = ParseReport()
    marker = raw.find(COMPLETE)
    report.complete_marker_seen = marker >= 0
    body = raw[:marker] if marker >= 0 else raw

    for pos, chunk in enumerate(body.split(RECORD_SEP)):
        chunk = chunk.strip()
        if not chunk:
            continue
        start = chunk.find("(")
        if start > 0 and chunk.endswith(")"):
            report.warnings.append(f"record {pos}: leading text ignored")
            chunk = chunk[start:]
        if not (chunk.startswith("(") and chunk.endswith(")")):
            report.warnings.append(f"record {pos}: not a parenthesized record")
            continue
        parts = [_unquote(p) for p in chunk[1:-1].split(FIELD_SEP)]
        tag = parts[0].lower()
        if tag == "entity":
            _parse_entity(pos, parts, report)
        elif tag in ("relationship", "relation"):
            _parse_relation(pos, parts, report)
        else:
            report.warnings.append(f"record {pos}: unknown tag {parts[0]!r}")

    declared = {e.name for e in report.entities}
    for rel in report.relations:
        for endpoint in (rel.source, rel.target):
            if endpoint not in declared:
                report.warnings.append(f"relation endpoint {endpoint!r} not declared; added as implicit entity")
                report.entities.append(RawEntity(endpoint, "Other", "", implicit=True))
                declared.add(endpoint)
    if not report.complete_marker_seen:
        report.warnings.append("completion marker missing")
    return report


def _parse_entity(pos: int, parts: list[str], report: ParseReport) -> None:
    if len(parts) != 4:
        report.warnings.append(f"record {pos}: record has {len(parts)} fields, expected 4")
        return
    _, name, etype, description = parts
    name = canonical_name(name)
    if not name:
        report.warnings.append(f"record {pos}: empty entity name")
        return
    canon_type = _TYPE_LOOKUP.get(normalize_ws(etype).lower())
    if canon_type is None:
        report.warnings.append(f"record {pos}: unknown entity type {etype!r}, using Other")
        canon_type = "Other"
    unresolved = canon_type == "Time" and not _valid_date_name(name)
    report.entities.append(RawEntity(name, canon_type, description, unresolved_time=unresolved))


def _valid_date_name(name: str) -> bool:
    if not _DATE_NAME_RE.match(name):
        return False
    try:
        dt.date(*map(int, name.split("/")))
    except ValueError:
        return False
    return True


def _parse_relation(pos: int, parts: list[str], report: ParseReport) -> None:
    if len(parts) < 5:
        report.warnings.append(f"record {pos}: record has {len(parts)} fields, expected 5")
        return
    if len(parts) > 5:
        report.warnings.append(f"record {pos}: {len(parts)} fields; joining middle fields into the description")
    source, target = canonical_name(parts[1]), canonical_name(parts[2])
    description = FIELD_SEP.join(parts[3:-1])
    strength = _parse_strength(parts[-1])
    if not source or not target:
        report.warnings.append(f"record {pos}: empty relation endpoint")
        return
    if strength is None:
        report.warnings.append(f"record {pos}: strength {parts[-1]!r} is not numeric")
        return
    if not 1 <= strength <= 10:
        clamped = min(10, max(1, strength))
        report.warnings.append(f"record {pos}: strength {strength} clamped to {clamped}")
        strength = clamped
    report.relations.append(RawRelation(source, target, description, strength))


def serialize_report(report: ParseReport) -> str:
    """Canonical, fully quoted form; implicit entities are left for the parser to recreate."""
    records = [
        f'("entity"{FIELD_SEP}"{e.name}"{FIELD_SEP}"{e.etype}"{FIELD_SEP}"{e.description}")'
        for e in report.entities
        if not e.implicit
    ]
    records += [
        f'("relationship"{FIELD_SEP}"{r.source}"{FIELD_SEP}"{r.target}"{FIELD_SEP}"{r.description}"{FIELD_SEP}{r.strength})'
        for r in report.relations
    ]
    out = RECORD_SEP.join(records)
    if report.complete_marker_seen:
        out = f"{out}{RECORD_SEP}{COMPLETE}" if out else COMPLETE
    return out


# ---------------------------------------------------------------------------
# Time normalization
# ---------------------------------------------------------------------------

_MONTHS = {name.lower(): i for i, name in enumerate(calendar.month_name) if name}
_MONTHS.update({name.lower(): i for i, name in enumerate(calendar.month_abbr) if name})
_MONTHS["sept"] = 9
_NUMBER_WORDS = {
    "a": 1, "an": 1, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5, "six": 6,
    "seven": 7, "eight": 8, "nine": 9, "ten": 10, "a couple of": 2, "couple of": 2,
}
_MONTH_ALT = "|".join(sorted(_MONTHS, key=len, reverse=True))
_NUM_ALT = r"\d+|" + "|".join(sorted((re.escape(k) for k in _NUMBER_WORDS), key=len, reverse=True))

_ISO_RE = re.compile(r"^(\d{4})[/-](\d{1,2})[/-](\d{1,2})$")
_MONTH_DAY_RE = re.compile(rf"^({_MONTH_ALT})\.? (\d{{1,2}})(?:st|nd|rd|th)?(?:,? (\d{{4}}))?$")
_DAY_MONTH_RE = re.compile(rf"^(\d{{1,2}})(?:st|nd|rd|th)? (?:of )?({_MONTH_ALT})(?:,? (\d{{4}}))?$")
_AGO_RE = re.compile(rf"^({_NUM_ALT}) (day|week|month)s? ago$")

# Phrases the mock extractor looks for inside free text.
TIME_PHRASE_RE = re.compile(
    rf"\b(?:\d{{4}}[/-]\d{{1,2}}[/-]\d{{1,2}}"
    rf"|(?:{_MONTH_ALT})\.? \d{{1,2}}(?:st|nd|rd|th)?(?:,? \d{{4}})?"
    rf"|\d{{1,2}}(?:st|nd|rd|th)? (?:of )?(?:{_MONTH_ALT})(?:,? \d{{4}})?"
    rf"|(?:{_NUM_ALT}) (?:day|week|month)s? ago"
    rf"|the day before yesterday|yesterday|today|last weekend|last week|last month|last year)\b",
    re.IGNORECASE,
)


def _shift_months(day: dt.date, months: int) -> dt.date:
    idx = day.year * 12 + (day.month - 1) - months
    year, month = divmod(idx, 12)
    month += 1
    return dt.date(year, month, min(day.day, calendar.monthrange(year, month)[1]))


def _nearest_past(month: int, day: int, ref: dt.date) -> dt.date | None:
    for year in range(ref.year, ref.year - 9, -1):
        try:
            candidate = dt.date(year, month, day)
        except ValueError:
            continue
        if candidate <= ref:
            return candidate
    return None


def _explicit(month: int, day: int, year: str | None, ref: dt.date) -> dt.date | None:
    if year:
        try:
            return dt.date(int(year), month, day)
        except ValueError:
            return None
    return _nearest_past(month, day, ref)


def normalize_time(raw_phrase: str, dialogue_time: dt.date) -> dt.date | None:
    """Resolve a date phrase against the conversation date; ``None`` means unresolved.

    Year-less dates resolve to the nearest such date not after ``dialogue_time``.
    """
    phrase = normalize_ws(raw_phrase).lower().rstrip(".,;!?")
    for prefix in ("on ", "in ", "since "):
        if phrase.startswith(prefix):
            phrase = phrase[len(prefix):]
    ref = dialogue_time

    if m := _ISO_RE.match(phrase):
        try:
            return dt.date(int(m[1]), int(m[2]), int(m[3]))
        except ValueError:
            return None
    if m := _MONTH_DAY_RE.match(phrase):
        return _explicit(_MONTHS[m[1]], int(m[2]), m[3], ref)
    if m := _DAY_MONTH_RE.match(phrase):
        return _explicit(_MONTHS[m[2]], int(m[1]), m[3], ref)

    fixed = {
        "today": 0,
        "yesterday": 1,
        "the day before yesterday": 2,
        "day before yesterday": 2,
        "last week": 7,
    }
    if phrase in fixed:
        return ref - dt.timedelta(days=fixed[phrase])
    if phrase == "last weekend":
        wd = ref.weekday()
        back = wd - 5 + 7 if wd >= 5 else wd + 2
        return ref - dt.timedelta(days=back)
    if phrase == "last month":
        return _shift_months(ref, 1)
    if phrase == "last year":
        return _shift_months(ref, 12)
    if m := _AGO_RE.match(phrase):
        n = int(m[1]) if m[1].isdigit() else _NUMBER_WORDS[m[1]]
        unit = m[2]
        if unit == "day":
            return ref - dt.timedelta(days=n)
        if unit == "week":
            return ref - dt.timedelta(weeks=n)
        return _shift_months(ref, n)
    return None
