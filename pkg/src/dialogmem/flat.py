"""Flat memory index: key organizations, exact search and key-to-value mapping."""

from __future__ import annotations

import datetime as dt
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .backends.base import Backend, EmbedderSpec, FlatExtraction
from .core import (
    InputError,
    KeyKind,
    KeyStrategy,
    KeyUnit,
    Query,
    Role,
    Session,
    Turn,
    ValueKind,
    ValueRef,
    is_degenerate_text,
)
from .textutil import norm_key
from .vectors import VectorTable, load_matrix

logger = logging.getLogger(__name__)

FACT_DELIM = "\n"
KEYWORD_DELIM = "; "
FORMAT_VERSION = 1

# Strategies whose session ranking averages per-type scores.
TYPE_AVERAGED = (KeyStrategy.MERGE_BY_TYPE, KeyStrategy.SESSION_PLUS_TYPES)
# Strategies that hold facts inside larger keys (facts are tracked as shadow units).
MERGED = (
    KeyStrategy.MERGE_BY_TYPE,
    KeyStrategy.MERGE_ALL,
    KeyStrategy.SESSION_PLUS_MERGED,
    KeyStrategy.SESSION_PLUS_TYPES,
    KeyStrategy.MERGE_ALL_WITH_SESSION,
)


def _join(parts: Iterable[str]) -> str:
    return "\n".join(p for p in parts if p)


def key_texts(session: Session, extraction: FlatExtraction, strategy: KeyStrategy) -> list[tuple[KeyKind, str, str]]:
    """(kind, facet, text) for every key a session contributes under ``strategy``."""
    strategy = KeyStrategy(strategy)
    s = session.user_text
    summ = extraction.summary
    facts = FACT_DELIM.join(extraction.facts)
    kws = KEYWORD_DELIM.join(extraction.keywords)
    merged = _join([summ, facts, kws])
    session_key = [(KeyKind.SESSION_TEXT, "session", s)] if s else []
    by_type = [
        (kind, facet, text)
        for kind, facet, text in (
            (KeyKind.SUMMARY, "summary", summ),
            (KeyKind.MERGED_TYPE_GROUP, "facts", facts),
            (KeyKind.MERGED_TYPE_GROUP, "keywords", kws),
        )
        if text
    ]

    if strategy is KeyStrategy.SESSION_ONLY:
        out = session_key
    elif strategy is KeyStrategy.SEPARATE_SFK:
        out = [(KeyKind.SUMMARY, "summary", summ)] if summ else []
        out += [(KeyKind.FACT, "fact", f) for f in extraction.facts]
        out += [(KeyKind.KEYWORD, "keyword", k) for k in extraction.keywords]
    elif strategy is KeyStrategy.MERGE_BY_TYPE:
        out = by_type
    elif strategy is KeyStrategy.MERGE_ALL:
        out = [(KeyKind.MERGED_ALL, "merged", merged)] if merged else []
    elif strategy is KeyStrategy.SESSION_PLUS_MERGED:
        out = session_key + ([(KeyKind.MERGED_ALL, "merged", merged)] if merged else [])
    elif strategy is KeyStrategy.SESSION_PLUS_TYPES:
        out = session_key + by_type
    elif strategy is KeyStrategy.MERGE_ALL_WITH_SESSION:
        text = _join([s, merged])
        out = [(KeyKind.MERGED_ALL, "merged", text)] if text else []
    else:
        raise InputError(f"{strategy.value} is not a flat key strategy")
    if not out:
        logger.warning("session %s yields no keys under %s", session.session_id, strategy.value)
    return out


def build_keys(
    session: Session,
    extraction: FlatExtraction,
    strategy: KeyStrategy,
    backend: Backend,
    start_seq: int = 0,
) -> list[KeyUnit]:
    specs = key_texts(session, extraction, strategy)
    if not specs:
        return []
    vecs = backend.embed_texts([t for _, _, t in specs])
    return [
        KeyUnit(
            key_id=f"k{start_seq + i:07d}",
            kind=kind,
            text=text,
            embedding=np.asarray(vec, dtype=np.float32),
            provenance_session_ids=(session.session_id,),
            created_at=start_seq + i,
            facet=facet,
            degenerate=is_degenerate_text(text),
        )
        for i, ((kind, facet, text), vec) in enumerate(zip(specs, vecs))
    ]


@dataclass
class SessionScore:
    session_id: str
    per_type_scores: dict[str, float]
    final_score: float


@dataclass
class FactUnit:
    """One factual statement under maintenance; ``key_id`` is set when it is its own key."""

    fact_id: str
    text: str
    session_id: str
    created_at: int
    key_id: str | None = None


class FlatIndex:
    def __init__(self, backend: Backend, key_strategy: KeyStrategy, value_kind: ValueKind = ValueKind.SESSION):
        self.backend = backend
        self.key_strategy = KeyStrategy(key_strategy)
        if self.key_strategy is KeyStrategy.GRAPH_ENTITIES:
            raise InputError("graph_entities is not a flat key strategy")
        self.value_kind = ValueKind(value_kind)
        self.dimension = backend.dimension
        self.embedder: EmbedderSpec = backend.embedder
        self.keys: dict[str, KeyUnit] = {}
        self.facts: dict[str, FactUnit] = {}
        self.extractions: dict[str, FlatExtraction] = {}
        self.host_keys: dict[str, dict[str, str]] = {}  # session -> facet -> key_id
        self._table = VectorTable(self.dimension)
        self._fact_table = VectorTable(self.dimension)
        self.session_texts: dict[str, str] = {}
        self._seq = 0
        self._fact_seq = 0

    def __len__(self) -> int:
        return len(self.keys)

    # mutation -------------------------------------------------------------

    def _store(self, key: KeyUnit) -> None:
        self.keys[key.key_id] = key
        self._table.upsert(key.key_id, key.embedding, key.created_at, searchable=not key.degenerate)

    def add_key(self, kind: KeyKind, text: str, provenance: Iterable[str], facet: str = "", embedding=None) -> KeyUnit:
        vec = self.backend.embed_one(text) if embedding is None else embedding
        seq = self._seq
        self._seq += 1
        key = KeyUnit(
            key_id=f"k{seq:07d}",
            kind=kind,
            text=text,
            embedding=np.asarray(vec, dtype=np.float32),
            provenance_session_ids=tuple(provenance),
            created_at=seq,
            facet=facet or KeyKind(kind).value,
            degenerate=is_degenerate_text(text),
        )
        self._store(key)
        return key

    def update_key(self, key_id: str, text: str, session_id: str | None = None) -> KeyUnit:
        old = self.keys[key_id]
        prov = old.provenance_session_ids
        if session_id and session_id not in prov:
            prov = prov + (session_id,)
        if text == old.text:
            new = replace(old, provenance_session_ids=prov)
        else:
            vec = np.asarray(self.backend.embed_one(text), dtype=np.float32)
            new = replace(old, text=text, embedding=vec, provenance_session_ids=prov, degenerate=is_degenerate_text(text))
        self._store(new)
        return new

    def remove_key(self, key_id: str) -> None:
        del self.keys[key_id]
        self._table.remove(key_id)

    def _register_fact(self, text: str, session_id: str, key_id: str | None, vec=None) -> FactUnit:
        unit = FactUnit(f"f{self._fact_seq:07d}" if key_id is None else key_id, text, session_id, self._fact_seq, key_id)
        self._fact_seq += 1
        if vec is None:
            vec = self.keys[key_id].embedding if key_id else self.backend.embed_one(text)
        self.facts[unit.fact_id] = unit
        self._fact_table.upsert(unit.fact_id, vec, unit.created_at, searchable=not is_degenerate_text(text))
        return unit

    def add_session(self, session: Session, extraction: FlatExtraction) -> list[KeyUnit]:
        """Add-only ingestion: every key and fact is appended."""
        keys = build_keys(session, extraction, self.key_strategy, self.backend, self._seq)
        self._seq += len(keys)
        hosts = self.host_keys.setdefault(session.session_id, {})
        for key in keys:
            self._store(key)
            if self.key_strategy in MERGED:
                hosts.setdefault(key.facet, key.key_id)
        self.extractions.setdefault(session.session_id, extraction)
        self.session_texts.setdefault(session.session_id, session.user_text)
        if self.key_strategy is KeyStrategy.SEPARATE_SFK:
            for key in keys:
                if key.kind is KeyKind.FACT:
                    self._register_fact(key.text, session.session_id, key.key_id)
        elif self.key_strategy in MERGED and extraction.facts:
            vecs = self.backend.embed_texts(list(extraction.facts))
            for fact, vec in zip(extraction.facts, vecs):
                self._register_fact(fact, session.session_id, None, vec)
        return keys

    # fact-level maintenance primitives -----------------------------------

    def add_fact(self, text: str, session_id: str) -> FactUnit:
        if self.key_strategy is KeyStrategy.SEPARATE_SFK:
            key = self.add_key(KeyKind.FACT, text, (session_id,), facet="fact")
            return self._register_fact(text, session_id, key.key_id)
        return self._register_fact(text, session_id, None)

    def update_fact(self, fact_id: str, text: str, session_id: str) -> FactUnit:
        unit = self.facts[fact_id]
        old_text = unit.text
        if unit.key_id is not None:
            key = self.update_key(unit.key_id, text, session_id)
            vec = key.embedding
        else:
            vec = self.backend.embed_one(text)
            ext = self.extractions.get(unit.session_id)
            if ext is not None:
                facts = tuple(text if f == old_text else f for f in ext.facts)
                # A summary that is just the old fact is replaced along with it.
                summary = text if norm_key(ext.summary) == norm_key(old_text) else ext.summary
                self.extractions[unit.session_id] = FlatExtraction(summary, facts, ext.keywords)
                self.rebuild_session_keys(unit.session_id, session_id)
        unit.text = text
        self._fact_table.upsert(fact_id, vec, unit.created_at, searchable=not is_degenerate_text(text))
        return unit

    def delete_fact(self, fact_id: str) -> None:
        unit = self.facts.pop(fact_id)
        self._fact_table.remove(fact_id)
        if unit.key_id is not None:
            self.remove_key(unit.key_id)
            return
        ext = self.extractions.get(unit.session_id)
        if ext is not None:
            facts = tuple(f for f in ext.facts if f != unit.text)
            self.extractions[unit.session_id] = FlatExtraction(ext.summary, facts, ext.keywords)
            self.rebuild_session_keys(unit.session_id)

    def rebuild_session_keys(self, host_session_id: str, extra_session: str | None = None) -> None:
        """Regenerate a session's merged keys from its stored extraction."""
        session = self._session_stub(host_session_id)
        hosts = self.host_keys.setdefault(host_session_id, {})
        wanted = {facet: (kind, text) for kind, facet, text in key_texts(session, self.extractions[host_session_id], self.key_strategy)}
        for facet, key_id in list(hosts.items()):
            if facet not in wanted:
                self.remove_key(key_id)
                del hosts[facet]
        for facet, (kind, text) in wanted.items():
            if facet in hosts:
                self.update_key(hosts[facet], text, extra_session)
            else:
                prov = [host_session_id] + ([extra_session] if extra_session and extra_session != host_session_id else [])
                hosts[facet] = self.add_key(kind, text, prov, facet=facet).key_id

    def _session_stub(self, session_id: str) -> Session:
        text = self.session_texts.get(session_id, "")
        turns = (Turn(Role.USER, text, 0),) if text else ()
        return Session(session_id, dt.date(1970, 1, 1), turns)

    # retrieval ------------------------------------------------------------

    def _qvec(self, query) -> np.ndarray:
        if isinstance(query, Query):
            return self.backend.embed_one(query.text)
        if isinstance(query, str):
            return self.backend.embed_one(query)
        return np.asarray(query, dtype=np.float64)

    def _allowed_keys(self, allowed_sessions: set[str] | None, kinds=None) -> set[str] | None:
        if allowed_sessions is None and kinds is None:
            return None
        out = set()
        for key_id, key in self.keys.items():
            if kinds is not None and key.kind not in kinds:
                continue
            if allowed_sessions is not None and not allowed_sessions.intersection(key.provenance_session_ids):
                continue
            out.add(key_id)
        return out

    def search(self, query, k: int, allowed_sessions: set[str] | None = None, kinds=None) -> list[tuple[str, float]]:
        """Exact cosine top-k as (key_id, score); ties go to the older key."""
        if k <= 0:
            raise InputError("k must be positive")
        if not self.keys:
            return []
        return self._table.top_k(self._qvec(query), k, self._allowed_keys(allowed_sessions, kinds))

    def search_facts(self, text: str, m: int) -> list[tuple[str, str]]:
        if not self.facts:
            return []
        hits = self._fact_table.top_k(self.backend.embed_one(text), m)
        return [(fact_id, self.facts[fact_id].text) for fact_id, _ in hits]

    def value_ids(self, key_id: str) -> list[str]:
        if self.value_kind is ValueKind.KEY:
            return [key_id]
        return list(self.keys[key_id].provenance_session_ids)

    @property
    def value_map(self) -> dict[str, list[str]]:
        return {key_id: self.value_ids(key_id) for key_id in self.keys}

    def map_to_values(
        self,
        ranked_keys: list[tuple[str, float]],
        n_values: int,
        value_kind: ValueKind | None = None,
        allowed_sessions: set[str] | None = None,
    ) -> list[tuple[ValueRef, float]]:
        """Collapse ranked keys onto values, keeping each value's best key score."""
        value_kind = ValueKind(value_kind or self.value_kind)
        if value_kind is ValueKind.KEY:
            return [(ValueRef.key(key_id), score) for key_id, score in ranked_keys[:n_values]]
        best: dict[str, float] = {}
        for key_id, score in ranked_keys:
            for sid in self.keys[key_id].provenance_session_ids:
                if allowed_sessions is not None and sid not in allowed_sessions:
                    continue
                if sid not in best:
                    best[sid] = score
        order = sorted(best, key=lambda sid: -best[sid])  # stable: first-seen wins ties
        return [(ValueRef.session(sid), best[sid]) for sid in order[:n_values]]

    def score_sessions_merge_by_type(
        self, query, k_sessions: int, allowed_sessions: set[str] | None = None
    ) -> list[SessionScore]:
        """Average the query's cosine with each of a session's type keys."""
        if k_sessions <= 0:
            raise InputError("k_sessions must be positive")
        scores = self._table.scores(self._qvec(query))
        per_session: dict[str, dict[str, float]] = {}
        for key_id, key in self.keys.items():
            if key.degenerate:
                continue
            owner = key.provenance_session_ids[0]
            if allowed_sessions is not None and owner not in allowed_sessions:
                continue
            types = per_session.setdefault(owner, {})
            types[key.facet] = max(types.get(key.facet, -np.inf), scores[key_id])
        rows = [SessionScore(sid, types, float(np.mean(list(types.values())))) for sid, types in per_session.items()]
        rows.sort(key=lambda r: -r.final_score)
        return rows[:k_sessions]

    def retrieve(
        self, query, k_keys: int, n_values: int, allowed_sessions: set[str] | None = None
    ) -> list[tuple[ValueRef, float]]:
        if self.value_kind is ValueKind.SESSION and self.key_strategy in TYPE_AVERAGED:
            rows = self.score_sessions_merge_by_type(query, n_values, allowed_sessions)
            return [(ValueRef.session(r.session_id), r.final_score) for r in rows]
        ranked = self.search(query, k_keys, allowed_sessions)
        return self.map_to_values(ranked, n_values, allowed_sessions=allowed_sessions)

    def value_text(self, value: ValueRef) -> str:
        return self.keys[value.payload].text

    # persistence ----------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "format": FORMAT_VERSION,
            "index": "flat",
            "key_strategy": self.key_strategy.value,
            "value_kind": self.value_kind.value,
            "dimension": self.dimension,
            "embedder": self.embedder.to_dict(),
            "delimiters": {"facts": FACT_DELIM, "keywords": KEYWORD_DELIM},
            "next_seq": self._seq,
            "next_fact_seq": self._fact_seq,
            "num_keys": len(self.keys),
            "num_facts": len(self.facts),
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        key_ids = list(self.keys)
        with open(d / "keys.jsonl", "w", encoding="utf-8") as fh:
            for key_id in key_ids:
                k = self.keys[key_id]
                rec = {
                    "key_id": k.key_id,
                    "kind": k.kind.value,
                    "facet": k.facet,
                    "text": k.text,
                    "provenance": list(k.provenance_session_ids),
                    "created_at": k.created_at,
                    "degenerate": k.degenerate,
                }
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
        self._table.save_matrix(d / "embeddings.f32", key_ids)
        fact_ids = list(self.facts)
        with open(d / "facts.jsonl", "w", encoding="utf-8") as fh:
            for fact_id in fact_ids:
                u = self.facts[fact_id]
                rec = {"fact_id": u.fact_id, "text": u.text, "session_id": u.session_id, "created_at": u.created_at, "key_id": u.key_id}
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
        self._fact_table.save_matrix(d / "facts.f32", fact_ids)
        with open(d / "sessions.jsonl", "w", encoding="utf-8") as fh:
            for sid, ext in self.extractions.items():
                rec = {
                    "session_id": sid,
                    "extraction": ext.to_dict(),
                    "hosts": self.host_keys.get(sid, {}),
                    "user_text": self.session_texts.get(sid, ""),
                }
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path, backend: Backend) -> "FlatIndex":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
        if meta.get("index") != "flat":
            raise InputError(f"{d} does not hold a flat index")
        if meta["dimension"] != backend.dimension:
            raise InputError(f"index dimension {meta['dimension']} != backend dimension {backend.dimension}")
        idx = cls(backend, meta["key_strategy"], meta["value_kind"])
        records = [json.loads(line) for line in (d / "keys.jsonl").read_text(encoding="utf-8").splitlines()]
        mat = load_matrix(d / "embeddings.f32", idx.dimension)
        for rec, vec in zip(records, mat):
            idx._store(
                KeyUnit(
                    key_id=rec["key_id"],
                    kind=rec["kind"],
                    text=rec["text"],
                    embedding=vec.astype(np.float32),
                    provenance_session_ids=tuple(rec["provenance"]),
                    created_at=rec["created_at"],
                    facet=rec["facet"],
                    degenerate=rec["degenerate"],
                )
            )
        fact_recs = [json.loads(line) for line in (d / "facts.jsonl").read_text(encoding="utf-8").splitlines()]
        fmat = load_matrix(d / "facts.f32", idx.dimension)
        for rec, vec in zip(fact_recs, fmat):
            unit = FactUnit(rec["fact_id"], rec["text"], rec["session_id"], rec["created_at"], rec["key_id"])
            idx.facts[unit.fact_id] = unit
            idx._fact_table.upsert(unit.fact_id, vec, unit.created_at, searchable=not is_degenerate_text(unit.text))
        for line in (d / "sessions.jsonl").read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            idx.extractions[rec["session_id"]] = FlatExtraction.from_dict(rec["extraction"])
            idx.host_keys[rec["session_id"]] = dict(rec["hosts"])
            idx.session_texts[rec["session_id"]] = rec["user_text"]
        idx._seq = meta["next_seq"]
        idx._fact_seq = meta["next_fact_seq"]
        return idx
