"""Benchmark loading, retrieval metrics and QA evaluation."""

from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .backends.base import AnswerMode, BackendError
from .core import InputError, Query, Session, SessionIdRegistry, ValueKind, ValueRef, parse_date
from .engine import MemorySystem
from .textutil import tokenize

logger = logging.getLogger(__name__)

K_VALUES = (5, 10)
QA_N_SESSION = 5
QA_N_KEY = 20
LME_FIELDS = ("question_id", "question", "answer", "haystack_sessions", "haystack_session_ids", "haystack_dates", "answer_session_ids")


@dataclass(frozen=True)
class BenchmarkQuestion:
    question_id: str
    question_text: str
    answer_text: str
    evidence_session_ids: tuple[str, ...]
    question_type: str = "default"
    question_date: object = None
    haystack_session_ids: tuple[str, ...] = ()
    flagged: bool = False  # evidence could not be resolved

    def query(self) -> Query:
        return Query(self.question_text, self.question_date)


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------


def _read_json(path: str | Path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from exc


def _session_content(messages) -> str:
    return json.dumps([[m.get("role"), m.get("content", m.get("text", ""))] for m in messages], ensure_ascii=False)


def load_longmemeval(path: str | Path, corpus_name: str = "lme") -> tuple[list[Session], list[BenchmarkQuestion]]:
    """Read a LongMemEval-style question file.

    Haystack sessions are shared across questions; ids are canonicalized so that a
    raw id reused for different content gets a distinct id.
    """
    data = _read_json(path)
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise InputError("expected a list of question records")
    registry = SessionIdRegistry(corpus_name)
    sessions: dict[str, Session] = {}
    questions: list[BenchmarkQuestion] = []
    for qi, rec in enumerate(data):
        if not isinstance(rec, dict):
            raise InputError(f"record {qi} is not an object")
        for name in LME_FIELDS:
            if name not in rec:
                raise InputError(f"record {qi} is missing field {name!r}")
        raw_ids, dates, hay = rec["haystack_session_ids"], rec["haystack_dates"], rec["haystack_sessions"]
        if not (len(raw_ids) == len(dates) == len(hay)):
            raise InputError(f"record {qi}: haystack lists have different lengths")
        local: dict[str, str] = {}
        for raw_id, date, messages in zip(raw_ids, dates, hay):
            try:
                sid = registry.canonical(str(raw_id), _session_content(messages))
                if sid not in sessions:
                    sessions[sid] = Session.from_messages(sid, date, messages)
            except (InputError, KeyError, ValueError, TypeError) as exc:
                logger.warning("question %s: skipping session %s (%s)", rec["question_id"], raw_id, exc)
                continue
            local.setdefault(str(raw_id), sid)
        evidence = tuple(local[str(e)] for e in rec["answer_session_ids"] if str(e) in local)
        dangling = [e for e in rec["answer_session_ids"] if str(e) not in local]
        if dangling:
            logger.warning("question %s: evidence %s not in haystack", rec["question_id"], dangling)
        qdate = None
        if rec.get("question_date"):
            try:
                qdate = parse_date(rec["question_date"])
            except InputError:
                logger.warning("question %s: unreadable question_date", rec["question_id"])
        questions.append(
            BenchmarkQuestion(
                question_id=str(rec["question_id"]),
                question_text=str(rec["question"]),
                answer_text=str(rec["answer"]),
                evidence_session_ids=evidence,
                question_type=str(rec.get("question_type", "default")),
                question_date=qdate,
                haystack_session_ids=tuple(dict.fromkeys(local.values())),
                flagged=bool(dangling) or not evidence,
            )
        )
    return list(sessions.values()), questions


def load_halumem(path: str | Path, corpus_name: str = "halumem") -> tuple[list[Session], list[BenchmarkQuestion], list[dict]]:
    """Read a HaluMem-style user document.

    Expected shape: ``{"users": [{"user_id", "sessions": [{"session_id", "date",
    "dialogue": [{"role", "content"}], "memory_points": [...]}], "questions":
    [{"question_id", "question", "answer", "evidence_session_ids", "question_type"}]}]}``.
    Returns sessions, questions and the memory points (tagged with their session).
    """
    data = _read_json(path)
    users = data.get("users") if isinstance(data, dict) else data
    if not isinstance(users, list):
        raise InputError("expected a 'users' list")
    registry = SessionIdRegistry(corpus_name)
    sessions: list[Session] = []
    questions: list[BenchmarkQuestion] = []
    points: list[dict] = []
    for ui, user in enumerate(users):
        for name in ("user_id", "sessions"):
            if name not in user:
                raise InputError(f"user {ui} is missing field {name!r}")
        local: dict[str, str] = {}
        for rec in user["sessions"]:
            for name in ("session_id", "dialogue"):
                if name not in rec:
                    raise InputError(f"user {user['user_id']}: session is missing field {name!r}")
            raw = f"{user['user_id']}/{rec['session_id']}"
            sid = registry.canonical(raw, _session_content(rec["dialogue"]))
            try:
                sessions.append(Session.from_messages(sid, rec.get("date") or rec.get("start_time"), rec["dialogue"]))
            except (InputError, KeyError, ValueError, TypeError) as exc:
                logger.warning("skipping session %s (%s)", raw, exc)
                continue
            local[str(rec["session_id"])] = sid
            for mp in rec.get("memory_points", []):
                points.append({"session_id": sid, **(mp if isinstance(mp, dict) else {"text": mp})})
        for q in user.get("questions", []):
            ev = [str(e) for e in q.get("evidence_session_ids", [])]
            evidence = tuple(local[e] for e in ev if e in local)
            questions.append(
                BenchmarkQuestion(
                    question_id=str(q.get("question_id", f"{user['user_id']}/q{len(questions)}")),
                    question_text=str(q["question"]),
                    answer_text=str(q.get("answer", "")),
                    evidence_session_ids=evidence,
                    question_type=str(q.get("question_type", "default")),
                    haystack_session_ids=tuple(local.values()),
                    flagged=len(evidence) != len(ev) or not evidence,
                )
            )
    return sessions, questions, points


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _check(gt, k: int) -> set:
    gt = set(gt)
    if not gt:
        raise ValueError("ground truth is empty; metric undefined")
    if k <= 0:
        raise ValueError("k must be positive")
    return gt


def recall_at_k(retrieved: list[str], gt: Iterable[str], k: int) -> float:
    """Fraction of ground-truth items found in the first ``k`` retrieved."""
    gt = _check(gt, k)
    return len(gt.intersection(retrieved[:k])) / len(gt)


def ndcg_at_k(retrieved: list[str], gt: Iterable[str], k: int) -> float:
    """Binary-relevance NDCG with a 1/log2(rank+1) discount."""
    gt = _check(gt, k)
    seen: set[str] = set()
    dcg = 0.0
    for rank, item in enumerate(retrieved[:k], 1):
        if item in gt and item not in seen:
            dcg += 1.0 / math.log2(rank + 1)
        seen.add(item)
    ideal = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(len(gt), k) + 1))
    return dcg / ideal


# ---------------------------------------------------------------------------
# Judges
# ---------------------------------------------------------------------------


def _norm_answer(text: str) -> str:
    return " ".join(tokenize(text))


def containment_judge(question: str, gold: str, answer: str) -> bool:
    """Correct iff the normalized gold answer occurs in the normalized answer."""
    g = _norm_answer(gold)
    if not g:
        return False
    return re.search(rf"(?:^| ){re.escape(g)}(?: |$)", _norm_answer(answer)) is not None


def remote_judge(backend) -> Callable[[str, str, str], bool]:
    return backend.judge_answer


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    config: dict
    records: dict[str, dict] = field(default_factory=dict)
    k_values: tuple[int, ...] = K_VALUES
    label: str = ""

    def scored(self) -> list[dict]:
        return [r for r in self.records.values() if not r["flagged"] and "error" not in r]

    @property
    def aggregates(self) -> dict:
        rows = self.scored()
        out: dict = {"questions": len(self.records), "scored": len(rows)}
        out["flagged"] = sum(1 for r in self.records.values() if r["flagged"])
        out["errors"] = sum(1 for r in self.records.values() if "error" in r)
        for k in self.k_values:
            for metric in ("recall", "ndcg"):
                name = f"{metric}@{k}"
                vals = [r[name] for r in rows]
                out[name] = sum(vals) / len(vals) if vals else None
        judged = [r for r in self.records.values() if r.get("correct") is not None]
        if any("answer" in r for r in self.records.values()):
            out["accuracy"] = sum(r["correct"] for r in judged) / len(judged) if judged else None
            out["judged"] = len(judged)
            out["unjudged"] = sum(1 for r in self.records.values() if "answer" in r and r.get("correct") is None)
        by_type: dict[str, int] = {}
        for r in self.records.values():
            by_type[r["question_type"]] = by_type.get(r["question_type"], 0) + 1
        out["by_type"] = dict(sorted(by_type.items()))
        return out

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "config": self.config,
            "metadata": {"recall": "set-recall averaged over questions", "ndcg": "binary relevance"},
            "aggregates": self.aggregates,
            "questions": [self.records[q] for q in sorted(self.records)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def table_row(self) -> dict:
        agg = self.aggregates
        return {
            "config": self.label or "run",
            "value": self.config.get("value_kind", ""),
            "R@5": agg.get("recall@5"),
            "R@10": agg.get("recall@10"),
            "N@5": agg.get("ndcg@5"),
            "N@10": agg.get("ndcg@10"),
            "Acc": agg.get("accuracy"),
        }


TABLE_COLUMNS = ("config", "value", "R@5", "R@10", "N@5", "N@10", "Acc")


def format_table(reports: list[EvalReport]) -> str:
    def cell(v):
        if v is None:
            return "-"
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    lines = ["| " + " | ".join(TABLE_COLUMNS) + " |", "|" + "---|" * len(TABLE_COLUMNS)]
    for rep in reports:
        row = rep.table_row()
        lines.append("| " + " | ".join(cell(row[c]) for c in TABLE_COLUMNS) + " |")
    return "\n".join(lines) + "\n"


def table_tsv(reports: list[EvalReport]) -> str:
    rows = ["\t".join(TABLE_COLUMNS)]
    for rep in reports:
        row = rep.table_row()
        rows.append("\t".join("" if row[c] is None else str(row[c]) for c in TABLE_COLUMNS))
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


def value_sessions(system: MemorySystem, refs: list[ValueRef]) -> list[str]:
    """Session ids behind a ranked value list, in rank order without repeats."""
    out: dict[str, None] = {}
    for ref in refs:
        if ref.kind is ValueKind.SESSION:
            out.setdefault(ref.payload, None)
        elif system.flat is not None:
            for sid in system.flat.keys[ref.payload].provenance_session_ids:
                out.setdefault(sid, None)
        else:
            for sid in system.graph.nodes[ref.payload].sessions:
                out.setdefault(sid, None)
    return list(out)


def _restrict(q: BenchmarkQuestion, per_question_haystack: bool) -> set[str] | None:
    return set(q.haystack_session_ids) if per_question_haystack and q.haystack_session_ids else None


def _base_record(q: BenchmarkQuestion) -> dict:
    return {
        "question_id": q.question_id,
        "question_type": q.question_type,
        "evidence": list(q.evidence_session_ids),
        "flagged": q.flagged,
    }


def _score(record: dict, retrieved: list[str], evidence, k_values) -> None:
    record["retrieved"] = retrieved
    record["ranks"] = [retrieved.index(e) + 1 if e in retrieved else None for e in evidence]
    if evidence:
        for k in k_values:
            record[f"recall@{k}"] = recall_at_k(retrieved, evidence, k)
            record[f"ndcg@{k}"] = ndcg_at_k(retrieved, evidence, k)


def run_retrieval_eval(
    system: MemorySystem,
    questions: list[BenchmarkQuestion],
    n_values: int | None = None,
    per_question_haystack: bool = True,
    k_values: tuple[int, ...] = K_VALUES,
    max_parallel: int = 1,
    label: str = "",
) -> EvalReport:
    """Retrieve for every question and score against its evidence sessions."""
    n = n_values or system.config.n_values
    k = max(system.config.k_keys, n)

    def one(q: BenchmarkQuestion) -> dict:
        rec = _base_record(q)
        try:
            hits = system.retrieve(q.query(), k, n, _restrict(q, per_question_haystack))
            rec["values"] = [h.value.value_id for h in hits]
            _score(rec, value_sessions(system, [h.value for h in hits]), q.evidence_session_ids, k_values)
        except (InputError, BackendError, KeyError, ValueError) as exc:
            rec["error"] = f"{type(exc).__name__}: {exc}"
        return rec

    report = EvalReport(system.config.to_dict(), k_values=k_values, label=label)
    for rec in _map(one, questions, max_parallel):
        report.records[rec["question_id"]] = rec
    return report


def run_qa_eval(
    system: MemorySystem,
    questions: list[BenchmarkQuestion],
    judge: Callable[[str, str, str], bool] = containment_judge,
    n_values: int | None = None,
    mode: AnswerMode = AnswerMode.DIRECT,
    per_question_haystack: bool = True,
    k_values: tuple[int, ...] = K_VALUES,
    max_parallel: int = 1,
    label: str = "",
) -> EvalReport:
    """Retrieve, answer from the top values, and judge each answer."""
    default_n = QA_N_SESSION if system.config.value_kind is ValueKind.SESSION else QA_N_KEY
    n = n_values or default_n
    k = max(system.config.k_keys, n)

    def one(q: BenchmarkQuestion) -> dict:
        rec = _base_record(q)
        try:
            hits = system.retrieve(q.query(), k, n, _restrict(q, per_question_haystack))
            rec["values"] = [h.value.value_id for h in hits]
            _score(rec, value_sessions(system, [h.value for h in hits]), q.evidence_session_ids, k_values)
            contexts = [system.value_text(h.value) for h in hits]
            rec["answer"] = system.backend.generate_answer(q.query(), contexts, mode)
        except (InputError, BackendError, KeyError, ValueError) as exc:
            rec["error"] = f"{type(exc).__name__}: {exc}"
            return rec
        try:
            rec["correct"] = bool(judge(q.question_text, q.answer_text, rec["answer"]))
        except Exception as exc:  # judge is pluggable; any failure leaves the question unjudged
            logger.warning("judge failed on %s: %s", q.question_id, exc)
            rec["correct"] = None
        return rec

    report = EvalReport(system.config.to_dict(), k_values=k_values, label=label)
    for rec in _map(one, questions, max_parallel):
        report.records[rec["question_id"]] = rec
    return report


def _map(fn, items: list, max_parallel: int) -> list:
    if max_parallel <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(max_parallel, len(items))) as pool:
        return list(pool.map(fn, items))
