"""Backend interface shared by the mock, remote and cached implementations."""

from __future__ import annotations

import functools
import logging
import threading
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import datetime as dt
import numpy as np

from ..core import Query, Session
from ..textutil import normalize_ws

logger = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """A backend call failed for good (after retries)."""

    def __init__(self, message: str, status: int | None = None, attempts: int = 0):
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class RetryableError(BackendError):
    """Transport failure or 429/5xx; the caller may try again."""


class ExtractionError(BackendError):
    """The model reply could not be parsed."""

    def __init__(self, message: str, raw_reply: str):
        super().__init__(message)
        self.raw_reply = raw_reply


class EmbedderKind(str, Enum):
    REMOTE = "remote"
    HASH_MOCK = "hash_mock"


@dataclass(frozen=True)
class EmbedderSpec:
    name: str
    dimension: int
    kind: EmbedderKind = EmbedderKind.HASH_MOCK

    def __post_init__(self):
        object.__setattr__(self, "kind", EmbedderKind(self.kind))
        if self.dimension <= 0:
            raise ValueError("embedding dimension must be positive")

    def to_dict(self) -> dict:
        return {"name": self.name, "dimension": self.dimension, "kind": self.kind.value}


@dataclass(frozen=True)
class FlatExtraction:
    summary: str = ""
    facts: tuple[str, ...] = ()
    keywords: tuple[str, ...] = ()

    def __post_init__(self):
        seen: dict[str, str] = {}
        for fact in self.facts:
            fact = normalize_ws(fact)
            if fact:
                seen.setdefault(fact, fact)
        object.__setattr__(self, "facts", tuple(seen.values()))
        kws: dict[str, None] = {}
        for kw in self.keywords:
            kw = normalize_ws(kw)
            if kw:
                kws.setdefault(kw, None)
        object.__setattr__(self, "keywords", tuple(kws))
        object.__setattr__(self, "summary", (self.summary or "").strip())

    @property
    def empty(self) -> bool:
        return not (self.summary or self.facts or self.keywords)

    def to_dict(self) -> dict:
        return {"summary": self.summary, "facts": list(self.facts), "keywords": list(self.keywords)}

    @classmethod
    def from_dict(cls, d: dict) -> "FlatExtraction":
        missing = {"summary", "facts", "keywords"} - set(d)
        if missing:
            raise ValueError(f"extraction missing fields {sorted(missing)}")
        kws = d["keywords"]
        if isinstance(kws, str):
            kws = [k.strip() for k in kws.replace(";", ",").split(",")]
        return cls(str(d["summary"] or ""), tuple(map(str, d["facts"] or ())), tuple(map(str, kws or ())))


class MemOp(str, Enum):
    ADD = "add"
    UPDATE = "update"
    NOOP = "noop"
    DELETE = "delete"


@dataclass(frozen=True)
class MemOpDecision:
    op: MemOp
    target_key_id: str | None = None
    revised_text: str | None = None
    rationale: str = ""

    def __post_init__(self):
        object.__setattr__(self, "op", MemOp(self.op))
        if self.op in (MemOp.UPDATE, MemOp.DELETE) and not self.target_key_id:
            raise ValueError(f"{self.op.value} decision needs a target")
        if self.op is MemOp.UPDATE and not (self.revised_text or "").strip():
            raise ValueError("update decision needs revised text")
        if self.op in (MemOp.ADD, MemOp.NOOP) and self.target_key_id is not None:
            raise ValueError(f"{self.op.value} decision must not carry a target")

    def to_dict(self) -> dict:
        return {
            "op": self.op.value,
            "target_key_id": self.target_key_id,
            "revised_text": self.revised_text,
            "rationale": self.rationale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemOpDecision":
        return cls(d["op"], d.get("target_key_id"), d.get("revised_text"), d.get("rationale", ""))


class AnswerMode(str, Enum):
    DIRECT = "direct"
    CHAIN_OF_NOTE = "chain_of_note"


def counted(op: str):
    """Count real (non-cached) invocations of a backend primitive in ``self.calls``."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(self, *args, **kwargs):
            with self._lock:
                self.calls[op] += 1
            return fn(self, *args, **kwargs)

        return wrapper

    return deco


class Backend(ABC):
    """Embedder, extractor and decider behind one interface.

    Public methods enforce the contracts (fail-open prejudge, decision validation,
    single retry on unparseable extraction); subclasses implement the ``_``-prefixed
    primitives.
    """

    name: str = "backend"
    model: str = ""
    embedder: EmbedderSpec

    def __init__(self):
        self.calls: Counter[str] = Counter()
        self._lock = threading.Lock()

    # primitives -----------------------------------------------------------

    @abstractmethod
    def _embed(self, texts: list[str]) -> np.ndarray: ...

    @abstractmethod
    def _extract_flat(self, session: Session) -> FlatExtraction: ...

    @abstractmethod
    def _extract_graph(self, session: Session, dialogue_time: dt.date) -> str: ...

    @abstractmethod
    def _prejudge(self, chunk: str) -> bool: ...

    @abstractmethod
    def _decide_mem_op(self, new_fact: str, candidates: list[tuple[str, str]]) -> MemOpDecision: ...

    @abstractmethod
    def _generate_answer(self, question: Query, contexts: list[str], mode: AnswerMode) -> str: ...

    @abstractmethod
    def _summarize(self, texts: list[str], limit: int) -> str: ...

    @abstractmethod
    def _judge_link(self, text_a: str, text_b: str) -> bool: ...

    # contract layer -------------------------------------------------------

    @property
    def dimension(self) -> int:
        return self.embedder.dimension

    def embed_texts(self, texts) -> np.ndarray:
        texts = list(texts)
        if not texts:
            raise ValueError("embed_texts needs at least one text")
        return self._embed(texts)

    def embed_one(self, text: str) -> np.ndarray:
        return self.embed_texts([text])[0]

    def extract_flat(self, session: Session) -> FlatExtraction:
        try:
            return self._extract_flat(session)
        except ExtractionError as exc:
            logger.warning("flat extraction unparseable for %s, retrying once", session.session_id)
            try:
                return self._extract_flat(session)
            except ExtractionError:
                raise exc

    def extract_graph(self, session: Session, dialogue_time: dt.date | None = None) -> str:
        return self._extract_graph(session, dialogue_time or session.date)

    def prejudge(self, chunk: str) -> bool:
        if not chunk.strip():
            return False
        try:
            return self._prejudge(chunk)
        except BackendError as exc:
            logger.warning("prejudge failed (%s); keeping chunk", exc)
            return True

    def decide_mem_op(self, new_fact: str, candidates: list[tuple[str, str]]) -> MemOpDecision:
        if not candidates:
            return MemOpDecision(MemOp.ADD, rationale="no candidates")
        try:
            decision = self._decide_mem_op(new_fact, candidates)
        except (ValueError, KeyError) as exc:
            logger.warning("invalid memory decision (%s); falling back to add", exc)
            return MemOpDecision(MemOp.ADD, rationale=f"protocol error: {exc}")
        if decision.target_key_id is not None and decision.target_key_id not in {k for k, _ in candidates}:
            logger.warning("decision targets unknown key %s; falling back to add", decision.target_key_id)
            return MemOpDecision(MemOp.ADD, rationale="protocol error: unknown target")
        return decision

    def generate_answer(self, question: Query, contexts: list[str], mode: AnswerMode = AnswerMode.DIRECT) -> str:
        return self._generate_answer(question, list(contexts), AnswerMode(mode))

    def summarize(self, texts: list[str], limit: int) -> str:
        return self._summarize(list(texts), limit)

    def judge_link(self, text_a: str, text_b: str) -> bool:
        return self._judge_link(text_a, text_b)

    def template_version(self, op: str) -> str:
        """Identifies the prompt/rule version behind ``op``; part of every cache key."""
        return self.model

    def stats(self) -> dict:
        return {"calls": dict(sorted(self.calls.items()))}
