"""Small text helpers shared by the mock backends, the index and the harness."""

from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")
_WS_RE = re.compile(r"\s+")

STOPWORDS = frozenset(
    """
    a an and are as at be been being but by can could did do does doing for from had has
    have having he her here hers him his how i i'm if in into is it its itself just me
    more most my myself no nor not of off on once only or other our ours out over own
    same she should so some such than that the their theirs them then there these they
    this those through to too under until up very was we were what when where which
    while who whom why will with would you your yours yourself also am hi hello hey
    thanks thank ok okay yes well really please oh
    """.split()
)

COPULAS = frozenset("is am are was were be been being".split())


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric tokens."""
    return _TOKEN_RE.findall(text.lower())


def normalize_ws(text: str) -> str:
    return _WS_RE.sub(" ", text).strip()


def split_sentences(text: str) -> list[str]:
    out = []
    for line in text.splitlines():
        for piece in _SENTENCE_RE.split(line):
            piece = piece.strip()
            if piece:
                out.append(piece)
    return out


def content_words(text: str) -> list[str]:
    """Distinct non-stopword tokens in first-seen order."""
    seen: dict[str, None] = {}
    for tok in tokenize(text):
        if tok not in STOPWORDS:
            seen.setdefault(tok, None)
    return list(seen)


def norm_key(text: str) -> str:
    """Normalization used for exact-duplicate checks (case, spacing, trailing punctuation)."""
    return normalize_ws(text).lower().rstrip(".!?;,: ")
