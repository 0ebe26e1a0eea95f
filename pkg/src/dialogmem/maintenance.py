"""Fact-level memory reconciliation: add, update, noop and delete."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from .backends.base import Backend, FlatExtraction, MemOp, MemOpDecision
from .core import InputError, KeyKind, KeyStrategy, Session
from .flat import MERGED, FlatIndex

logger = logging.getLogger(__name__)

DEFAULT_CANDIDATES = 5


@dataclass
class Decision:
    fact: str
    proposed: MemOp
    applied: MemOp | None  # None when forced to a noop
    target: str | None
    rationale: str

    def to_dict(self) -> dict:
        return {
            "fact": self.fact,
            "proposed": self.proposed.value,
            "applied": self.applied.value if self.applied else None,
            "target": self.target,
            "rationale": self.rationale,
        }


@dataclass
class ReconcileLog:
    session_id: str
    decisions: list[Decision] = field(default_factory=list)
    adds: int = 0
    updates: int = 0
    noops: int = 0
    deletes: int = 0
    forced_noops: int = 0

    def count(self, op: MemOp | None) -> None:
        if op is None:
            self.forced_noops += 1
        else:
            name = {"add": "adds", "update": "updates", "noop": "noops", "delete": "deletes"}[op.value]
            setattr(self, name, getattr(self, name) + 1)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "adds": self.adds,
            "updates": self.updates,
            "noops": self.noops,
            "deletes": self.deletes,
            "forced_noops": self.forced_noops,
            "decisions": [d.to_dict() for d in self.decisions],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)


def normalize_op_set(op_set) -> frozenset[MemOp]:
    ops = frozenset(MemOp(o) for o in op_set)
    if not ops:
        raise InputError("op_set must not be empty")
    return ops


def resolve_op(proposed: MemOp, allowed: frozenset[MemOp]) -> MemOp | None:
    """Map a proposed operation onto the allowed set; None means a forced noop."""
    if proposed in allowed:
        return proposed
    if proposed is not MemOp.ADD and MemOp.ADD in allowed:
        return MemOp.ADD
    return None


def candidate_memories(index: FlatIndex, fact: str, m: int = DEFAULT_CANDIDATES) -> list[tuple[str, str]]:
    """The ``m`` stored facts most similar to ``fact``."""
    if m <= 0:
        raise InputError("m must be positive")
    return index.search_facts(fact, m)


def collapse_session_facts(
    facts: tuple[str, ...], backend: Backend, m: int = DEFAULT_CANDIDATES
) -> tuple[list[str], list[tuple[str, str]]]:
    """Reconcile a session's facts against each other before touching the index.

    A later statement in the same session wins over an earlier one it updates, so
    re-reconciling a session cannot flip a fact back and forth. Returns the surviving
    facts in order and the (fact, reason) pairs that were dropped.
    """
    kept: list[str] = []
    dropped: list[tuple[str, str]] = []
    for fact in facts:
        candidates = [(f"local{i}", text) for i, text in enumerate(kept)][-m:]
        decision = backend.decide_mem_op(fact, candidates)
        if decision.op is MemOp.NOOP:
            dropped.append((fact, "repeated within session"))
        elif decision.op is MemOp.UPDATE:
            i = int(decision.target_key_id[len("local"):])
            dropped.append((kept[i], "superseded within session"))
            kept[i] = decision.revised_text
        else:
            kept.append(fact)
    return kept, dropped


def _add_non_fact_keys(index: FlatIndex, session: Session, extraction: FlatExtraction) -> None:
    # Skip keys this session already contributed so a repeated reconcile adds nothing.
    present = {
        (k.kind, k.text)
        for k in index.keys.values()
        if session.session_id in k.provenance_session_ids
    }
    strategy = index.key_strategy
    wanted: list[tuple[KeyKind, str, str]] = []
    if strategy is KeyStrategy.SESSION_ONLY:
        if session.user_text:
            wanted.append((KeyKind.SESSION_TEXT, "session", session.user_text))
    elif strategy is KeyStrategy.SEPARATE_SFK:
        if extraction.summary:
            wanted.append((KeyKind.SUMMARY, "summary", extraction.summary))
        wanted += [(KeyKind.KEYWORD, "keyword", kw) for kw in extraction.keywords]
    for kind, facet, text in wanted:
        if (kind, text) not in present:
            index.add_key(kind, text, (session.session_id,), facet=facet)
    index.session_texts.setdefault(session.session_id, session.user_text)


def reconcile_session(
    index: FlatIndex,
    session: Session,
    extraction: FlatExtraction,
    op_set,
    backend: Backend | None = None,
    m: int = DEFAULT_CANDIDATES,
) -> ReconcileLog:
    """Fold one session's facts into ``index``, deciding each fact against its neighbours.

    Facts are decided one at a time and applied immediately, so a later fact of the
    same session sees the earlier ones.
    """
    allowed = normalize_op_set(op_set)
    backend = backend or index.backend
    log = ReconcileLog(session.session_id)
    sid = session.session_id

    if allowed == {MemOp.ADD}:
        index.add_session(session, extraction)
        log.adds = len(extraction.facts)
        log.decisions = [Decision(f, MemOp.ADD, MemOp.ADD, None, "add-only") for f in extraction.facts]
        return log

    merged = index.key_strategy in MERGED
    hosting = MemOp.ADD in allowed and sid not in index.extractions
    if merged and hosting:
        index.extractions[sid] = FlatExtraction(extraction.summary, (), extraction.keywords)
        index.session_texts.setdefault(sid, session.user_text)

    facts, superseded = collapse_session_facts(extraction.facts, backend, m)
    for fact, rationale in superseded:
        log.decisions.append(Decision(fact, MemOp.NOOP, MemOp.NOOP, None, rationale))
        log.count(MemOp.NOOP)

    for fact in facts:
        candidates = candidate_memories(index, fact, m)
        decision: MemOpDecision = backend.decide_mem_op(fact, candidates)
        applied = resolve_op(decision.op, allowed)
        target = decision.target_key_id
        if applied is MemOp.ADD:
            if merged:
                if hosting:
                    ext = index.extractions[sid]
                    index.extractions[sid] = FlatExtraction(ext.summary, ext.facts + (fact,), ext.keywords)
                    index.add_fact(fact, sid)
                else:
                    applied = None  # session already hosted; nothing new to place
            else:
                index.add_fact(fact, sid)
            target = None
        elif applied is MemOp.UPDATE:
            index.update_fact(target, decision.revised_text, sid)
        elif applied is MemOp.DELETE:
            index.delete_fact(target)
        elif applied is None:
            logger.info("%s: %s not allowed, forced noop", sid, decision.op.value)
        log.decisions.append(Decision(fact, decision.op, applied, target, decision.rationale))
        log.count(applied)

    if MemOp.ADD in allowed:
        if merged:
            if hosting:
                index.rebuild_session_keys(sid)
        else:
            _add_non_fact_keys(index, session, extraction)
    return log


def reconcile_corpus(
    index: FlatIndex,
    sessions: list[Session],
    extractions: dict[str, FlatExtraction],
    op_set,
    m: int = DEFAULT_CANDIDATES,
) -> list[ReconcileLog]:
    return [reconcile_session(index, s, extractions[s.session_id], op_set, m=m) for s in sessions]


def ablation_without_add(
    index: FlatIndex, sessions: list[Session], extractions: dict[str, FlatExtraction], m: int = DEFAULT_CANDIDATES
) -> list[ReconcileLog]:
    """Reconcile with add disabled: facts can only revise what is already stored."""
    return reconcile_corpus(index, sessions, extractions, ("update", "noop"), m)


def op_totals(logs: list[ReconcileLog]) -> dict[str, int]:
    out = {"add": 0, "update": 0, "noop": 0, "delete": 0, "forced_noop": 0}
    for log in logs:
        out["add"] += log.adds
        out["update"] += log.updates
        out["noop"] += log.noops
        out["delete"] += log.deletes
        out["forced_noop"] += log.forced_noops
    return out

