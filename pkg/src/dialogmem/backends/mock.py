"""Deterministic rule-based backend for offline runs and tests.

The rules are deliberately simple. They make the indexing and retrieval layers
testable; they do not try to approximate LLM quality.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import re

import numpy as np

from ..core import Query, Session, format_date, reserved_vector
from ..parser import COMPLETE, FIELD_SEP, RECORD_SEP, TIME_PHRASE_RE, normalize_time
from ..textutil import COPULAS, STOPWORDS, content_words, norm_key, split_sentences, tokenize
from .base import (
    AnswerMode,
    Backend,
    EmbedderKind,
    EmbedderSpec,
    FlatExtraction,
    MemOp,
    MemOpDecision,
    counted,
)

SIM_JUDGE_THRESHOLD = 0.5
PREJUDGE_MIN_TOKENS = 4
USER_NODE = "USER"

_QUESTION_WORDS = frozenset("much many long often kind type know remember tell".split())
_PLACE_CUES = frozenset("in to at from visited visit visiting near around into through".split())
_PERSON_CUES = frozenset(
    "with friend sister brother mom dad mother father wife husband colleague named met called "
    "son daughter cousin aunt uncle boss neighbor coworker".split()
)
_CAP_RUN_RE = re.compile(r"[A-Z][A-Za-z'\-]*(?: [A-Z][A-Za-z'\-]*)*")
_NUMBER_RE = re.compile(r"\b(\d+(?:\.\d+)?)(?: ([A-Za-z]+))?")
_UNSAFE_RE = re.compile(r"#{2,}|<\|>|<\|COMPLETE\|>|[()]")


def hash_token(token: str, dim: int) -> tuple[int, float]:
    """Bucket and sign for one token under signed feature hashing."""
    h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    return h % dim, (1.0 if (h >> 63) & 1 == 0 else -1.0)


def hash_embed(text: str, dim: int) -> np.ndarray:
    vec = np.zeros(dim, dtype=np.float64)
    for tok in tokenize(text):
        bucket, sign = hash_token(tok, dim)
        vec[bucket] += sign
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        return reserved_vector(dim)
    return vec / norm


def _safe(text: str) -> str:
    return _UNSAFE_RE.sub(" ", text).replace('"', "'").strip()


class MockBackend(Backend):
    name = "mock"

    def __init__(self, dimension: int = 256, model: str = "rules-v1"):
        super().__init__()
        self.model = model
        self.embedder = EmbedderSpec("hash-mock", dimension, EmbedderKind.HASH_MOCK)

    @counted("embed")
    def _embed(self, texts: list[str]) -> np.ndarray:
        return np.stack([hash_embed(t, self.dimension) for t in texts])

    @counted("extract_flat")
    def _extract_flat(self, session: Session) -> FlatExtraction:
        sentences = split_sentences(session.user_text)
        summary = sentences[0] if sentences else ""
        facts = []
        for sent in sentences:
            toks = tokenize(sent)
            if any(t.isdigit() or any(c.isdigit() for c in t) for t in toks) or COPULAS.intersection(toks):
                facts.append(sent)
        return FlatExtraction(summary, tuple(facts), tuple(content_words(session.user_text)))

    @counted("extract_graph")
    def _extract_graph(self, session: Session, dialogue_time: dt.date) -> str:
        entities: list[tuple[str, str, str]] = []
        relations: list[tuple[str, str, str, int]] = []
        for sent in split_sentences(session.user_text):
            desc = _safe(sent)
            found: list[tuple[str, str]] = []
            masked = sent
            for m in TIME_PHRASE_RE.finditer(sent):
                when = normalize_time(m.group(0), dialogue_time)
                masked = masked.replace(m.group(0), " " * len(m.group(0)), 1)
                if when is not None:
                    found.append((format_date(when), "Time"))
            for m in _NUMBER_RE.finditer(masked):
                unit = m.group(2)
                name = m.group(1) if not unit or unit.lower() in STOPWORDS else f"{m.group(1)} {unit}"
                found.append((name.upper(), "Statistic"))
            for m in _CAP_RUN_RE.finditer(masked):
                words = [w for w in m.group(0).split() if w.lower().strip("'") not in STOPWORDS]
                if not words:
                    continue
                prev = masked[: m.start()].split()
                cue = prev[-1].lower().strip(",.") if prev else ""
                etype = "Place" if cue in _PLACE_CUES else "Person" if cue in _PERSON_CUES else "Other"
                found.append((" ".join(words).upper(), etype))
            for name, etype in found:
                entities.append((name, etype, desc))
                relations.append((USER_NODE, name, desc, 5))
        if not entities:
            return COMPLETE
        records = [f'("entity"{FIELD_SEP}"{USER_NODE}"{FIELD_SEP}"User"{FIELD_SEP}"The user.")']
        records += [f'("entity"{FIELD_SEP}"{n}"{FIELD_SEP}"{t}"{FIELD_SEP}"{d}")' for n, t, d in entities]
        records += [
            f'("relationship"{FIELD_SEP}"{s}"{FIELD_SEP}"{t}"{FIELD_SEP}"{d}"{FIELD_SEP}{w})'
            for s, t, d, w in relations
        ]
        return RECORD_SEP.join(records) + RECORD_SEP + COMPLETE

    @counted("prejudge")
    def _prejudge(self, chunk: str) -> bool:
        return any(len(tokenize(s)) >= PREJUDGE_MIN_TOKENS for s in split_sentences(chunk))

    @counted("decide_mem_op")
    def _decide_mem_op(self, new_fact: str, candidates: list[tuple[str, str]]) -> MemOpDecision:
        target = norm_key(new_fact)
        for key_id, text in candidates:
            if norm_key(text) == target:
                return MemOpDecision(MemOp.NOOP, rationale=f"duplicate of {key_id}")
        new_toks = tokenize(new_fact)
        for key_id, text in candidates:
            old_toks = tokenize(text)
            if len(new_toks) >= 3 and old_toks[:3] == new_toks[:3] and old_toks[3:] != new_toks[3:]:
                return MemOpDecision(MemOp.UPDATE, key_id, new_fact, rationale="same subject and predicate")
        return MemOpDecision(MemOp.ADD, rationale="novel")

    @counted("generate_answer")
    def _generate_answer(self, question: Query, contexts: list[str], mode: AnswerMode) -> str:
        needed = set(content_words(question.text)) - _QUESTION_WORDS
        if needed:
            for ctx in contexts:
                for line in ctx.splitlines():
                    if needed <= set(tokenize(line)):
                        return line.strip()
        return "I don't know"

    @counted("summarize")
    def _summarize(self, texts: list[str], limit: int) -> str:
        return " ".join(t.strip() for t in texts)[:limit].strip()

    @counted("judge_link")
    def _judge_link(self, text_a: str, text_b: str) -> bool:
        a = hash_embed(text_a, self.dimension)
        b = hash_embed(text_b, self.dimension)
        return float(a @ b) >= SIM_JUDGE_THRESHOLD
