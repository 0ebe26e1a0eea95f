"""Entity graph memory: node alignment, edge merging and description upkeep.

Three schemas share one container. ``know`` embeds nodes by name, ``desc`` embeds
them by their accumulated descriptions, and ``sim`` holds whole key groups as nodes
joined by judged similarity edges.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .backends.base import Backend, BackendError, EmbedderSpec
from .core import DescriptionMode, GraphSchema, InputError, KeyUnit, Session
from .parser import ParseReport, canonical_name
from .textutil import norm_key
from .vectors import VectorTable, load_matrix

logger = logging.getLogger(__name__)

SUMMARIZE_THRESHOLD = 1024
SIM_NEIGHBORS = 5
FORMAT_VERSION = 1


@dataclass
class GraphNode:
    node_id: str
    canonical_name: str
    etype: str
    descriptions: list[tuple[str, str]] = field(default_factory=list)
    sessions: list[str] = field(default_factory=list)
    created_at: int = 0
    embedding: np.ndarray | None = field(default=None, repr=False, compare=False)
    # Normalized texts already folded in, including ones absorbed by a summary.
    seen: set[str] = field(default_factory=set, repr=False)

    @property
    def description_text(self) -> str:
        return "\n".join(text for _, text in self.descriptions)

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "name": self.canonical_name,
            "etype": self.etype,
            "descriptions": [list(d) for d in self.descriptions],
            "sessions": self.sessions,
            "created_at": self.created_at,
            "seen": sorted(self.seen),
        }


@dataclass
class GraphEdge:
    edge_id: str
    src: str
    dst: str
    descriptions: list[tuple[str, str]] = field(default_factory=list)
    strength: int = 1
    contributions: list[tuple[str, int]] = field(default_factory=list)
    sessions: list[str] = field(default_factory=list)
    created_at: int = 0
    embedding: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "edge_id": self.edge_id,
            "src": self.src,
            "dst": self.dst,
            "descriptions": [list(d) for d in self.descriptions],
            "strength": self.strength,
            "contributions": [list(c) for c in self.contributions],
            "sessions": self.sessions,
            "created_at": self.created_at,
        }


@dataclass(frozen=True)
class SimEdge:
    src: str
    dst: str
    judged: bool = True


@dataclass
class IngestSummary:
    nodes_added: int = 0
    nodes_merged: int = 0
    edges_added: int = 0
    edges_merged: int = 0
    skipped_relations: int = 0


def _append_unique(items: list, item) -> bool:
    if item in items:
        return False
    items.append(item)
    return True


class MemoryGraph:
    def __init__(
        self,
        backend: Backend,
        schema: GraphSchema = GraphSchema.DESC,
        description_mode: DescriptionMode = DescriptionMode.APPEND,
        summarize_threshold: int = SUMMARIZE_THRESHOLD,
    ):
        self.backend = backend
        self.schema = GraphSchema(schema)
        self.description_mode = DescriptionMode(description_mode)
        self.summarize_threshold = summarize_threshold
        self.dimension = backend.dimension
        self.embedder: EmbedderSpec = backend.embedder
        self.nodes: dict[str, GraphNode] = {}
        self.edges: dict[str, GraphEdge] = {}
        self.by_name: dict[str, str] = {}
        self.pairs: dict[tuple[str, str], str] = {}
        self.adjacency: dict[str, dict[str, str]] = {}  # node -> neighbour -> edge
        self.session_texts: dict[str, str] = {}
        self.provenance: list[dict] = []
        self._node_table = VectorTable(self.dimension)
        self._edge_table = VectorTable(self.dimension)
        self._session_table = VectorTable(self.dimension)
        self._node_seq = 0
        self._edge_seq = 0

    def __len__(self) -> int:
        return len(self.nodes)

    # embedding text -------------------------------------------------------

    def node_text(self, node: GraphNode) -> str:
        if self.schema is GraphSchema.KNOW:
            return node.canonical_name
        return node.description_text or node.canonical_name

    def triple_text(self, edge: GraphEdge) -> str:
        desc = "; ".join(text for _, text in edge.descriptions)
        return f"{self.nodes[edge.src].canonical_name} | {desc} | {self.nodes[edge.dst].canonical_name}"

    def _refresh(self, node_ids: Iterable[str], edge_ids: Iterable[str]) -> None:
        node_ids = [n for n in dict.fromkeys(node_ids) if n in self.nodes]
        edge_ids = [e for e in dict.fromkeys(edge_ids) if e in self.edges]
        if node_ids:
            vecs = self.backend.embed_texts([self.node_text(self.nodes[n]) for n in node_ids])
            for nid, vec in zip(node_ids, vecs):
                node = self.nodes[nid]
                node.embedding = np.asarray(vec, dtype=np.float32)
                self._node_table.upsert(nid, node.embedding, node.created_at)
        if edge_ids:
            vecs = self.backend.embed_texts([self.triple_text(self.edges[e]) for e in edge_ids])
            for eid, vec in zip(edge_ids, vecs):
                edge = self.edges[eid]
                edge.embedding = np.asarray(vec, dtype=np.float32)
                self._edge_table.upsert(eid, edge.embedding, edge.created_at)

    # sessions -------------------------------------------------------------

    def register_session(self, session: Session) -> None:
        """Keep a session's user text and embedding for session-level scoring."""
        if session.session_id in self.session_texts or not session.user_text:
            return
        self.session_texts[session.session_id] = session.user_text
        vec = self.backend.embed_one(session.user_text)
        self._session_table.upsert(session.session_id, vec, len(self.session_texts))

    def session_scores(self, qvec, session_ids: Iterable[str]) -> dict[str, float]:
        q = np.asarray(qvec, dtype=np.float64)
        return {
            sid: float(self._session_table.vector(sid) @ q) if sid in self._session_table else float("-inf")
            for sid in session_ids
        }

    # nodes ----------------------------------------------------------------

    def _new_node(self, name: str, etype: str, session_id: str) -> GraphNode:
        node = GraphNode(f"n{self._node_seq:06d}", name, etype, created_at=self._node_seq)
        self._node_seq += 1
        node.sessions.append(session_id)
        self.nodes[node.node_id] = node
        self.by_name[name] = node.node_id
        self.adjacency[node.node_id] = {}
        self.provenance.append({"session_id": session_id, "event": "node_add", "id": node.node_id})
        return node

    def update_description(
        self, node: GraphNode, new_text: str, session_id: str, mode: DescriptionMode | None = None, refresh: bool = True
    ) -> bool:
        """Fold ``new_text`` into ``node``; returns whether anything changed."""
        mode = DescriptionMode(mode or self.description_mode)
        text = new_text.strip()
        key = norm_key(text)
        if not key or key in node.seen:
            return False
        node.seen.add(key)
        node.descriptions.append((session_id, text))
        if mode is DescriptionMode.SUMMARIZE:
            total = len(node.description_text)
            if total > self.summarize_threshold and len(node.descriptions) > 1:
                try:
                    summary = self.backend.summarize([t for _, t in node.descriptions], self.summarize_threshold).strip()
                except BackendError as exc:
                    logger.warning("summarize failed for %s (%s); keeping appended descriptions", node.node_id, exc)
                    summary = ""
                if summary:
                    node.descriptions = [(session_id, summary[: self.summarize_threshold])]
        self.provenance.append({"session_id": session_id, "event": "node_description", "id": node.node_id})
        if refresh:
            self._refresh([node.node_id], [])
        return True

    def node_session_values(self, node_id: str) -> list[str]:
        try:
            return list(self.nodes[node_id].sessions)
        except KeyError:
            raise LookupError(f"unknown node {node_id}") from None

    def neighbors(self, node_id: str) -> dict[str, str]:
        """neighbour node id -> connecting edge id."""
        return self.adjacency[node_id]

    # ingest ---------------------------------------------------------------

    def ingest_extraction(self, report: ParseReport, session_id: str, session: Session | None = None) -> IngestSummary:
        """Align ``report``'s entities and relations into the graph."""
        if self.schema is GraphSchema.SIM:
            raise InputError("sim graphs are built from key groups, not extraction reports")
        if session is not None:
            self.register_session(session)
        summary = IngestSummary()
        dirty_nodes: list[str] = []
        dirty_edges: list[str] = []

        for ent in report.entities:
            name = canonical_name(ent.name)
            if not name:
                continue
            nid = self.by_name.get(name)
            if nid is None:
                node = self._new_node(name, ent.etype, session_id)
                summary.nodes_added += 1
                changed = True
            else:
                node = self.nodes[nid]
                changed = _append_unique(node.sessions, session_id)
                if changed:
                    self.provenance.append({"session_id": session_id, "event": "node_merge", "id": nid})
                    summary.nodes_merged += 1
                if node.etype == "Other" and ent.etype != "Other":
                    node.etype = ent.etype
                    changed = True
            if self.update_description(node, ent.description, session_id, refresh=False):
                changed = True
            if changed:
                dirty_nodes.append(node.node_id)

        for rel in report.relations:
            src = self.by_name.get(canonical_name(rel.source))
            dst = self.by_name.get(canonical_name(rel.target))
            if src is None or dst is None:
                logger.warning("relation %s -> %s has a missing endpoint; skipped", rel.source, rel.target)
                summary.skipped_relations += 1
                continue
            if src == dst:
                logger.warning("self-loop on %s skipped", rel.source)
                summary.skipped_relations += 1
                continue
            pair = (min(src, dst), max(src, dst))
            eid = self.pairs.get(pair)
            if eid is None:
                edge = GraphEdge(f"e{self._edge_seq:06d}", src, dst, created_at=self._edge_seq)
                self._edge_seq += 1
                self.edges[edge.edge_id] = edge
                self.pairs[pair] = edge.edge_id
                self.adjacency[src][dst] = edge.edge_id
                self.adjacency[dst][src] = edge.edge_id
                self.provenance.append({"session_id": session_id, "event": "edge_add", "id": edge.edge_id})
                summary.edges_added += 1
                changed = True
            else:
                edge = self.edges[eid]
                changed = False
            contribution = (session_id, rel.strength)
            if contribution not in edge.contributions:
                if eid is not None:
                    summary.edges_merged += 1
                    self.provenance.append({"session_id": session_id, "event": "edge_merge", "id": edge.edge_id})
                edge.contributions.append(contribution)
                edge.strength = max(s for _, s in edge.contributions)
                changed = True
            changed |= _append_unique(edge.sessions, session_id)
            desc = rel.description.strip()
            if desc and norm_key(desc) not in {norm_key(t) for _, t in edge.descriptions}:
                edge.descriptions.append((session_id, desc))
                changed = True
            if changed:
                dirty_edges.append(edge.edge_id)

        self._refresh(dirty_nodes, dirty_edges)
        return summary

    # sim graph ------------------------------------------------------------

    def add_key_groups(self, keys: list[KeyUnit], judge, neighbors: int = SIM_NEIGHBORS) -> list[SimEdge]:
        """Make each key group a node and connect judged-similar pairs."""
        if self.schema is not GraphSchema.SIM:
            raise InputError("key groups belong in a sim graph")
        id_of: dict[str, str] = {}
        for key in keys:
            name = key.key_id
            nid = self.by_name.get(name)
            if nid is None:
                node = self._new_node(name, "KeyGroup", key.provenance_session_ids[0])
                for sid in key.provenance_session_ids[1:]:
                    _append_unique(node.sessions, sid)
                node.descriptions = [(key.provenance_session_ids[0], key.text)]
                node.seen = {norm_key(key.text)}
                node.embedding = np.asarray(key.embedding, dtype=np.float32)
                self._node_table.upsert(node.node_id, node.embedding, node.created_at)
                nid = node.node_id
            id_of[key.key_id] = nid
        sim_edges = build_simgraph(keys, judge, neighbors)
        for se in sim_edges:
            src, dst = id_of[se.src], id_of[se.dst]
            pair = (min(src, dst), max(src, dst))
            if pair in self.pairs:
                continue
            edge = GraphEdge(f"e{self._edge_seq:06d}", src, dst, created_at=self._edge_seq)
            self._edge_seq += 1
            edge.contributions.append(("judge", 1))
            self.edges[edge.edge_id] = edge
            self.pairs[pair] = edge.edge_id
            self.adjacency[src][dst] = edge.edge_id
            self.adjacency[dst][src] = edge.edge_id
            self._refresh([], [edge.edge_id])
        return sim_edges

    # search ---------------------------------------------------------------

    def search_nodes(self, qvec, k: int, allowed: set[str] | None = None) -> list[tuple[str, float]]:
        if k <= 0 or not self.nodes:
            return []
        return self._node_table.top_k(qvec, k, allowed)

    def search_edges(self, qvec, k: int, allowed: set[str] | None = None) -> list[tuple[str, float]]:
        if k <= 0 or not self.edges:
            return []
        return self._edge_table.top_k(qvec, k, allowed)

    def node_scores(self, qvec, node_ids: Iterable[str]) -> dict[str, float]:
        q = np.asarray(qvec, dtype=np.float64)
        return {nid: float(self._node_table.vector(nid) @ q) for nid in node_ids}

    def value_text(self, node_id: str) -> str:
        node = self.nodes[node_id]
        if self.schema is GraphSchema.SIM:
            return node.description_text
        return f"{node.canonical_name}: {node.description_text}" if node.description_text else node.canonical_name

    # persistence ----------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "format": FORMAT_VERSION,
            "index": "graph",
            "schema": self.schema.value,
            "description_mode": self.description_mode.value,
            "summarize_threshold": self.summarize_threshold,
            "dimension": self.dimension,
            "embedder": self.embedder.to_dict(),
            "next_node": self._node_seq,
            "next_edge": self._edge_seq,
            "num_nodes": len(self.nodes),
            "num_edges": len(self.edges),
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        _write_jsonl(d / "nodes.jsonl", (n.to_dict() for n in self.nodes.values()))
        _write_jsonl(d / "edges.jsonl", (e.to_dict() for e in self.edges.values()))
        _write_jsonl(d / "provenance.jsonl", self.provenance)
        _write_jsonl(d / "sessions.jsonl", ({"session_id": s, "text": t} for s, t in self.session_texts.items()))
        self._node_table.save_matrix(d / "nodes.f32", list(self.nodes))
        self._edge_table.save_matrix(d / "edges.f32", list(self.edges))
        self._session_table.save_matrix(d / "sessions.f32", list(self.session_texts))

    @classmethod
    def load(cls, directory: str | Path, backend: Backend) -> "MemoryGraph":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
        if meta.get("index") != "graph":
            raise InputError(f"{d} does not hold a graph index")
        if meta["dimension"] != backend.dimension:
            raise InputError(f"index dimension {meta['dimension']} != backend dimension {backend.dimension}")
        g = cls(backend, meta["schema"], meta["description_mode"], meta["summarize_threshold"])
        for rec, vec in zip(_read_jsonl(d / "nodes.jsonl"), load_matrix(d / "nodes.f32", g.dimension)):
            node = GraphNode(
                rec["node_id"],
                rec["name"],
                rec["etype"],
                [tuple(x) for x in rec["descriptions"]],
                list(rec["sessions"]),
                rec["created_at"],
                vec.astype(np.float32),
                set(rec["seen"]),
            )
            g.nodes[node.node_id] = node
            g.by_name[node.canonical_name] = node.node_id
            g.adjacency[node.node_id] = {}
            g._node_table.upsert(node.node_id, vec, node.created_at)
        for rec, vec in zip(_read_jsonl(d / "edges.jsonl"), load_matrix(d / "edges.f32", g.dimension)):
            edge = GraphEdge(
                rec["edge_id"],
                rec["src"],
                rec["dst"],
                [tuple(x) for x in rec["descriptions"]],
                rec["strength"],
                [tuple(x) for x in rec["contributions"]],
                list(rec["sessions"]),
                rec["created_at"],
                vec.astype(np.float32),
            )
            g.edges[edge.edge_id] = edge
            g.pairs[(min(edge.src, edge.dst), max(edge.src, edge.dst))] = edge.edge_id
            g.adjacency[edge.src][edge.dst] = edge.edge_id
            g.adjacency[edge.dst][edge.src] = edge.edge_id
            g._edge_table.upsert(edge.edge_id, vec, edge.created_at)
        g.provenance = list(_read_jsonl(d / "provenance.jsonl"))
        sess = list(_read_jsonl(d / "sessions.jsonl"))
        for i, (rec, vec) in enumerate(zip(sess, load_matrix(d / "sessions.f32", g.dimension))):
            g.session_texts[rec["session_id"]] = rec["text"]
            g._session_table.upsert(rec["session_id"], vec, i + 1)
        g._node_seq = meta["next_node"]
        g._edge_seq = meta["next_edge"]
        return g


def build_simgraph(key_groups: list[KeyUnit], judge, neighbors: int = SIM_NEIGHBORS) -> list[SimEdge]:
    """Judge each group against its nearest groups; keep pairs the judge accepts.

    ``judge`` is a Backend (its ``judge_link`` is used) or a callable on two texts.
    Every unordered pair is judged at most once.
    """
    if len(key_groups) < 2:
        return []
    decide: Callable[[str, str], bool] = judge.judge_link if isinstance(judge, Backend) else judge
    dim = key_groups[0].embedding.shape[0]
    table = VectorTable(dim)
    for i, key in enumerate(key_groups):
        table.upsert(key.key_id, key.embedding, i)
    by_id = {k.key_id: k for k in key_groups}
    judged: set[tuple[str, str]] = set()
    edges: list[SimEdge] = []
    for key in key_groups:
        hits = table.top_k(key.embedding, neighbors + 1)
        for other_id, _ in [h for h in hits if h[0] != key.key_id][:neighbors]:
            pair = (min(key.key_id, other_id), max(key.key_id, other_id))
            if pair in judged:
                continue
            judged.add(pair)
            if decide(by_id[pair[0]].text, by_id[pair[1]].text):
                edges.append(SimEdge(*pair))
    return edges


def _write_jsonl(path: Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> Iterable[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
