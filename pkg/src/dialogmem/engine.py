"""One configurable memory system: build from sessions, retrieve for queries, persist."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .backends.base import Backend, FlatExtraction
from .core import (
    GraphSchema,
    IndexKind,
    InputError,
    KeyStrategy,
    PipelineConfig,
    Query,
    Session,
    ValueKind,
    ValueRef,
    validate_config,
)
from .flat import FlatIndex
from .graph import MemoryGraph
from .graph_retrieval import retrieve as graph_retrieve
from .maintenance import ReconcileLog, reconcile_session
from .parser import ParseReport, parse_extraction

logger = logging.getLogger(__name__)

DEFAULT_PARALLEL = 16


@dataclass
class BuildStats:
    sessions: int = 0
    prejudge_skipped: int = 0
    extracted: int = 0
    parse_warnings: int = 0
    extraction_seconds: float = 0.0
    ops: dict[str, int] = field(default_factory=lambda: {"add": 0, "update": 0, "noop": 0, "delete": 0, "forced_noop": 0})

    def to_dict(self) -> dict:
        return {
            "sessions": self.sessions,
            "prejudge_skipped": self.prejudge_skipped,
            "extracted": self.extracted,
            "parse_warnings": self.parse_warnings,
            "extraction_seconds": round(self.extraction_seconds, 3),
            "ops": dict(self.ops),
        }


@dataclass
class Hit:
    value: ValueRef
    score: float
    details: dict = field(default_factory=dict)


class MemorySystem:
    def __init__(self, config: PipelineConfig, backend: Backend, max_parallel: int = DEFAULT_PARALLEL):
        result = validate_config(config)
        if not result.ok:
            raise InputError("; ".join(result.errors))
        for warning in result.warnings:
            logger.warning("config: %s", warning)
        if max_parallel < 1:
            raise InputError("max_parallel must be at least 1")
        self.config = config
        self.backend = backend
        self.max_parallel = max_parallel
        self.sessions: dict[str, Session] = {}
        self.reconcile_logs: list[ReconcileLog] = []
        self.stats = BuildStats()
        self.flat: FlatIndex | None = None
        self.graph: MemoryGraph | None = None
        if config.index_kind is IndexKind.FLAT:
            self.flat = FlatIndex(backend, config.key_strategy, config.value_kind)
        else:
            self.graph = MemoryGraph(backend, config.graph_schema, config.description_mode)

    @property
    def uses_graph_extraction(self) -> bool:
        return self.graph is not None and self.graph.schema is not GraphSchema.SIM

    # build ----------------------------------------------------------------

    def _select(self, sessions: list[Session]) -> list[Session]:
        todo = [s for s in sessions if s.has_user_turn and s.user_text.strip()]
        if not self.config.prejudge_enabled:
            return todo
        keep = self._parallel(lambda s: self.backend.prejudge(s.user_text), todo)
        self.stats.prejudge_skipped += sum(1 for k in keep if not k)
        return [s for s, k in zip(todo, keep) if k]

    def _parallel(self, fn, items: list) -> list:
        if not items:
            return []
        if self.max_parallel == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=min(self.max_parallel, len(items))) as pool:
            return list(pool.map(fn, items))

    def _extract(self, sessions: list[Session]) -> dict[str, FlatExtraction | ParseReport]:
        if self.flat is not None and self.config.key_strategy is KeyStrategy.SESSION_ONLY:
            return {s.session_id: FlatExtraction() for s in sessions}
        start = time.perf_counter()
        if self.uses_graph_extraction:
            raw = self._parallel(lambda s: self.backend.extract_graph(s, s.date), sessions)
            out = {}
            for s, r in zip(sessions, raw):
                report = parse_extraction(r)
                self.stats.parse_warnings += len(report.warnings)
                out[s.session_id] = report
        else:
            out = dict(zip((s.session_id for s in sessions), self._parallel(self.backend.extract_flat, sessions)))
        self.stats.extraction_seconds += time.perf_counter() - start
        self.stats.extracted += len(sessions)
        return out

    def build(self, sessions: list[Session]) -> BuildStats:
        """Extract concurrently, then apply every mutation in corpus order."""
        fresh = []
        for s in sessions:
            if s.session_id in self.sessions:
                if self.sessions[s.session_id] != s:
                    raise InputError(f"session id {s.session_id} reused with different content")
                continue
            self.sessions[s.session_id] = s
            fresh.append(s)
        self.stats.sessions = len(self.sessions)
        selected = self._select(fresh)
        extracted = self._extract(selected)

        if self.flat is not None:
            for s in selected:
                log = reconcile_session(self.flat, s, extracted[s.session_id], self.config.op_set, self.backend, self.config.candidate_m)
                self.reconcile_logs.append(log)
                for op, n in (("add", log.adds), ("update", log.updates), ("noop", log.noops), ("delete", log.deletes), ("forced_noop", log.forced_noops)):
                    self.stats.ops[op] += n
        elif self.uses_graph_extraction:
            for s in selected:
                self.graph.ingest_extraction(extracted[s.session_id], s.session_id, s)
        else:
            groups = FlatIndex(self.backend, KeyStrategy.MERGE_ALL, ValueKind.SESSION)
            for s in selected:
                groups.add_session(s, extracted[s.session_id])
                self.graph.register_session(s)
            self.graph.add_key_groups(list(groups.keys.values()), self.backend)
        return self.stats

    # retrieval ------------------------------------------------------------

    def retrieve(
        self,
        query: Query | str,
        k_keys: int | None = None,
        n_values: int | None = None,
        allowed_sessions: set[str] | None = None,
        trace: list | None = None,
    ) -> list[Hit]:
        k = self.config.k_keys if k_keys is None else k_keys
        n = self.config.n_values if n_values is None else n_values
        if k <= 0 or n <= 0:
            raise InputError("k and n must be positive")
        if k < n:
            raise InputError("k_keys < n_values")
        if self.flat is not None:
            hits = [Hit(ref, score) for ref, score in self.flat.retrieve(query, k, n, allowed_sessions)]
            if trace is not None:
                for rank, h in enumerate(hits, 1):
                    trace.append({"stage": "value", "rank": rank, "value_id": h.value.value_id, "score": h.score})
            return hits
        cfg = self.config.replace(k_keys=k, n_values=n)
        ranked = graph_retrieve(self.graph, query, cfg, allowed_sessions, trace)
        return [Hit(ref, rs.score_e, rs.to_dict()) for ref, rs in ranked]

    def value_text(self, value: ValueRef) -> str:
        if value.kind is ValueKind.SESSION:
            s = self.sessions[value.payload]
            return f"[{s.date.isoformat()}] {s.full_text}"
        if self.flat is not None:
            return self.flat.value_text(value)
        return self.graph.value_text(value.payload)

    def counts(self) -> dict:
        if self.flat is not None:
            return {"sessions": len(self.sessions), "keys": len(self.flat.keys), "facts": len(self.flat.facts)}
        return {"sessions": len(self.sessions), "nodes": len(self.graph.nodes), "edges": len(self.graph.edges)}

    # persistence ----------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        with open(d / "corpus.jsonl", "w", encoding="utf-8") as fh:
            for s in self.sessions.values():
                fh.write(json.dumps(s.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
        if self.flat is not None:
            self.flat.save(d / "index")
            with open(d / "reconcile.jsonl", "w", encoding="utf-8") as fh:
                for log in self.reconcile_logs:
                    fh.write(log.to_json() + "\n")
        else:
            self.graph.save(d / "index")

    @classmethod
    def load(cls, directory: str | Path, backend: Backend, max_parallel: int = DEFAULT_PARALLEL) -> "MemorySystem":
        d = Path(directory)
        if not (d / "config.json").exists():
            raise InputError(f"no index at {d}")
        config = PipelineConfig.from_dict(json.loads((d / "config.json").read_text(encoding="utf-8")))
        system = cls(config, backend, max_parallel)
        for line in (d / "corpus.jsonl").read_text(encoding="utf-8").splitlines():
            if line.strip():
                s = Session.from_dict(json.loads(line))
                system.sessions[s.session_id] = s
        if system.flat is not None:
            system.flat = FlatIndex.load(d / "index", backend)
        else:
            system.graph = MemoryGraph.load(d / "index", backend)
        system.stats.sessions = len(system.sessions)
        return system
