"""Query-time graph traversal: activation, one-hop expansion and value ranking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Activation, Expansion, PipelineConfig, Query, Rerank, ValueKind, ValueRef
from .graph import MemoryGraph


@dataclass
class ActivationSet:
    seed_ids: list[str] = field(default_factory=list)
    seed_scores: dict[str, float] = field(default_factory=dict)
    expanded_ids: list[str] = field(default_factory=list)
    # Query cosine of every candidate node; ranking reads scores from here.
    node_scores: dict[str, float] = field(default_factory=dict)

    @property
    def candidates(self) -> list[str]:
        return self.seed_ids + self.expanded_ids

    def __bool__(self) -> bool:
        return bool(self.seed_ids)


@dataclass(frozen=True)
class RankScore:
    score_e: float
    score_g: int
    score_s: float | None = None

    def to_dict(self) -> dict:
        return {"score_e": self.score_e, "score_g": self.score_g, "score_s": self.score_s}


def query_vector(graph: MemoryGraph, query) -> np.ndarray:
    if isinstance(query, Query):
        return graph.backend.embed_one(query.text)
    if isinstance(query, str):
        return graph.backend.embed_one(query)
    return np.asarray(query, dtype=np.float64)


def _allowed_nodes(graph: MemoryGraph, allowed_sessions: set[str] | None) -> set[str] | None:
    if allowed_sessions is None:
        return None
    return {nid for nid, node in graph.nodes.items() if allowed_sessions.intersection(node.sessions)}


def activate(
    graph: MemoryGraph,
    query,
    k: int,
    mode: Activation = Activation.ENTITY,
    allowed_sessions: set[str] | None = None,
) -> ActivationSet:
    """Pick seed nodes by cosine to the query, directly or through their edges."""
    mode = Activation(mode)
    act = ActivationSet()
    if k <= 0 or not graph.nodes:
        return act
    qvec = query_vector(graph, query)
    allowed = _allowed_nodes(graph, allowed_sessions)
    if mode is Activation.ENTITY:
        hits = graph.search_nodes(qvec, k, allowed)
        for nid, score in hits:
            act.seed_ids.append(nid)
            act.seed_scores[nid] = score
            act.node_scores[nid] = score
        return act
    if not graph.edges:
        return act
    allowed_edges = None
    if allowed is not None:
        allowed_edges = {eid for eid, e in graph.edges.items() if e.src in allowed and e.dst in allowed}
    for eid, score in graph.search_edges(qvec, k, allowed_edges):
        edge = graph.edges[eid]
        for nid in (edge.src, edge.dst):
            if nid not in act.seed_scores:
                act.seed_ids.append(nid)
                act.seed_scores[nid] = score
    # Values are scored by their endpoint nodes, not by the edge that selected them.
    act.node_scores.update(graph.node_scores(qvec, act.seed_ids))
    return act


def expand_one_hop(graph: MemoryGraph, activation: ActivationSet, query, budget: int) -> ActivationSet:
    """Add direct neighbours of the seeds, strongest links first, at most ``budget``."""
    if budget < 0:
        raise ValueError("budget must be non-negative")
    out = ActivationSet(
        list(activation.seed_ids), dict(activation.seed_scores), [], dict(activation.node_scores)
    )
    if budget == 0 or not activation.seed_ids:
        return out
    seeds = set(activation.seed_ids)
    strength: dict[str, int] = {}
    for nid in activation.seed_ids:
        for other, eid in graph.neighbors(nid).items():
            if other in seeds:
                continue
            strength[other] = max(strength.get(other, 0), graph.edges[eid].strength)
    if not strength:
        return out
    cos = graph.node_scores(query_vector(graph, query), strength)
    order = sorted(strength, key=lambda n: (-strength[n], -cos[n], n))[:budget]
    out.expanded_ids = order
    for nid in order:
        out.node_scores.setdefault(nid, cos[nid])
    return out


def rank_values(
    graph: MemoryGraph,
    activation: ActivationSet,
    query,
    n_values: int,
    rerank: Rerank = Rerank.SCORE_E_G,
    value_kind: ValueKind = ValueKind.SESSION,
    allowed_sessions: set[str] | None = None,
) -> list[tuple[ValueRef, RankScore]]:
    """Lift candidate node scores to values and order them under ``rerank``."""
    rerank, value_kind = Rerank(rerank), ValueKind(value_kind)
    score_e: dict[str, float] = {}
    score_g: dict[str, int] = {}
    for nid in activation.candidates:
        s = activation.node_scores[nid]
        targets = graph.nodes[nid].sessions if value_kind is ValueKind.SESSION else [nid]
        for vid in targets:
            if allowed_sessions is not None and value_kind is ValueKind.SESSION and vid not in allowed_sessions:
                continue
            score_e[vid] = max(score_e.get(vid, -math.inf), s)
            score_g[vid] = score_g.get(vid, 0) + 1
    order = list(score_e)  # first-seen
    score_s: dict[str, float] = {}
    if rerank is Rerank.SCORE_S:
        if value_kind is ValueKind.SESSION:
            score_s = graph.session_scores(query_vector(graph, query), order)
        else:
            score_s = dict(score_e)
        key = lambda v: -score_s[v]  # noqa: E731
    elif rerank is Rerank.SCORE_E:
        key = lambda v: -score_e[v]  # noqa: E731
    else:
        key = lambda v: (-score_e[v], -score_g[v])  # noqa: E731
    ranked = sorted(order, key=key)[: max(n_values, 0)]  # stable: ties stay in first-seen order
    make = ValueRef.session if value_kind is ValueKind.SESSION else ValueRef.key
    return [(make(v), RankScore(score_e[v], score_g[v], score_s.get(v))) for v in ranked]


def retrieve(
    graph: MemoryGraph,
    query,
    config: PipelineConfig,
    allowed_sessions: set[str] | None = None,
    trace: list | None = None,
) -> list[tuple[ValueRef, RankScore]]:
    """Activate, optionally expand, then rank values; appends trace records when given a list."""
    if not graph.nodes:
        return []
    qvec = query_vector(graph, query)
    act = activate(graph, qvec, config.k_keys, config.activation, allowed_sessions)
    if config.expansion is Expansion.ONE_HOP:
        act = expand_one_hop(graph, act, qvec, config.expansion_budget)
    ranked = rank_values(graph, act, qvec, config.n_values, config.rerank, config.value_kind, allowed_sessions)
    if trace is not None:
        for nid in act.seed_ids:
            trace.append({"stage": "seed", "node_id": nid, "name": graph.nodes[nid].canonical_name, "score": act.seed_scores[nid]})
        for nid in act.expanded_ids:
            trace.append({"stage": "expanded", "node_id": nid, "name": graph.nodes[nid].canonical_name, "score": act.node_scores[nid]})
        for rank, (ref, score) in enumerate(ranked, 1):
            trace.append({"stage": "value", "rank": rank, "value_id": ref.value_id, **score.to_dict()})
    return ranked
