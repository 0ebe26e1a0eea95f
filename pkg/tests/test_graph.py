from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialogmem.backends import MockBackend
from dialogmem.backends.base import BackendError
from dialogmem.core import DescriptionMode, GraphSchema, InputError, KeyKind, KeyUnit
from dialogmem.graph import MemoryGraph, build_simgraph
from dialogmem.parser import ParseReport, RawEntity, RawRelation, parse_extraction

from factories import make_session
from oracles import token_hash_cosine


def report(entities=(), relations=()):
    return ParseReport(
        [RawEntity(n, t, d) for n, t, d in entities],
        [RawRelation(s, t, d, k) for s, t, d, k in relations],
        [],
        True,
    )


def key_group(mock, key_id, text, sid=None):
    return KeyUnit(key_id, KeyKind.MERGED_ALL, text, mock.embed_one(text), (sid or key_id,), 0)


def graph_state(g: MemoryGraph):
    nodes = {n.canonical_name: (n.etype, n.descriptions, n.sessions) for n in g.nodes.values()}
    edges = {
        (g.nodes[e.src].canonical_name, g.nodes[e.dst].canonical_name): (e.descriptions, e.strength, e.sessions)
        for e in g.edges.values()
    }
    return nodes, edges


# --- ingest -------------------------------------------------------------------------


def test_same_name_from_two_sessions_aligns(mock):
    g = MemoryGraph(mock)
    g.ingest_extraction(report([("London", "Location", "capital city")]), "s1")
    g.ingest_extraction(report([("  london ", "Location", "rainy in June")]), "s2")
    assert len(g) == 1
    node = next(iter(g.nodes.values()))
    assert node.canonical_name == "LONDON"
    assert [t for _, t in node.descriptions] == ["capital city", "rainy in June"]
    assert node.sessions == ["s1", "s2"]


def test_duplicate_description_kept_once(mock):
    g = MemoryGraph(mock)
    g.ingest_extraction(report([("London", "Location", "capital city")]), "s1")
    summary = g.ingest_extraction(report([("LONDON", "Location", "Capital  city")]), "s2")
    (node,) = g.nodes.values()
    assert len(node.descriptions) == 1
    assert summary.nodes_merged == 1 and summary.nodes_added == 0


def test_edge_strength_is_max_of_merged_relations(mock):
    g = MemoryGraph(mock)
    ents = [("USER", "Person", "the user"), ("London", "Location", "city")]
    g.ingest_extraction(report(ents, [("USER", "London", "visited", 4)]), "s1")
    g.ingest_extraction(report(ents, [("London", "USER", "lives near", 7)]), "s2")
    (edge,) = g.edges.values()
    assert edge.strength == 7
    assert edge.contributions == [("s1", 4), ("s2", 7)]
    assert [t for _, t in edge.descriptions] == ["visited", "lives near"]


def test_dangling_and_self_relations_skipped(mock):
    g = MemoryGraph(mock)
    rep = report([("Ann", "Person", "a friend")], [("Ann", "Bob", "knows", 5), ("Ann", "ann", "self", 5)])
    summary = g.ingest_extraction(rep, "s1")
    assert summary.skipped_relations == 2 and not g.edges


def test_other_type_upgraded_on_merge(mock):
    g = MemoryGraph(mock)
    g.ingest_extraction(report([("Kyoto", "Other", "somewhere")]), "s1")
    g.ingest_extraction(report([("Kyoto", "Location", "city in Japan")]), "s2")
    assert next(iter(g.nodes.values())).etype == "Location"


def test_sim_graph_rejects_reports(mock):
    with pytest.raises(InputError):
        MemoryGraph(mock, GraphSchema.SIM).ingest_extraction(report(), "s1")


def test_ingest_mock_extraction_end_to_end(mock):
    g = MemoryGraph(mock)
    s = make_session("s1", "I visited Paris with Marta last week.")
    g.ingest_extraction(parse_extraction(mock.extract_graph(s)), "s1", s)
    assert {"PARIS", "MARTA", "USER"} <= set(g.by_name)
    assert g.session_texts["s1"] == s.user_text


# --- descriptions -------------------------------------------------------------------


def test_append_mode_grows_and_reembeds(mock):
    g = MemoryGraph(mock)
    g.ingest_extraction(report([("Oslo", "Location", "cold")]), "s1")
    node = g.nodes[g.by_name["OSLO"]]
    assert g.update_description(node, "home of the user's sister", "s2")
    assert len(node.descriptions) == 2
    assert not g.update_description(node, "Cold", "s3")
    assert len(node.descriptions) == 2
    np.testing.assert_array_equal(node.embedding, mock.embed_one(node.description_text).astype(np.float32))


def long_texts(n=5, width=250):
    return [(f"fact {i} " + "abcdefghij" * width)[:width] for i in range(n)]


def test_summarize_mode_collapses_past_threshold(mock):
    g = MemoryGraph(mock, description_mode=DescriptionMode.SUMMARIZE)
    g.ingest_extraction(report([("Oslo", "Location", "x")]), "s0")
    node = g.nodes[g.by_name["OSLO"]]
    node.descriptions, node.seen = [], set()
    texts = long_texts()
    for i, t in enumerate(texts[:4]):
        g.update_description(node, t, f"s{i}")
    assert len(node.descriptions) == 4  # 4*250 + 3 separators stays under 1024
    g.update_description(node, texts[4], "s4")
    assert len(node.descriptions) == 1
    (_, summary), = node.descriptions
    assert len(summary) <= 1024
    # the mock concatenates and truncates
    assert summary == " ".join(texts)[:1024].strip()
    np.testing.assert_array_equal(node.embedding, mock.embed_one(summary).astype(np.float32))
    # absorbed texts still dedupe
    assert not g.update_description(node, texts[0], "s9")


def test_summarize_failure_falls_back_to_append():
    class Broken(MockBackend):
        def _summarize(self, texts, limit):
            raise BackendError("down")

    be = Broken(64)
    g = MemoryGraph(be, description_mode=DescriptionMode.SUMMARIZE)
    g.ingest_extraction(report([("Oslo", "Location", long_texts(1)[0])]), "s0")
    node = g.nodes[g.by_name["OSLO"]]
    for i, t in enumerate(long_texts()[1:]):
        g.update_description(node, t, f"s{i + 1}")
    assert len(node.descriptions) == 5
    np.testing.assert_array_equal(node.embedding, be.embed_one(node.description_text).astype(np.float32))


# --- session values -------------------------------------------------------------------


def test_node_session_values_first_seen_dedup(mock):
    g = MemoryGraph(mock)
    for sid, desc in [("s1", "a"), ("s2", "b"), ("s1", "c")]:
        g.ingest_extraction(report([("Rome", "Location", desc)]), sid)
    g.ingest_extraction(report([("Nina", "Person", "new")]), "s3")
    assert g.node_session_values(g.by_name["ROME"]) == ["s1", "s2"]
    assert g.node_session_values(g.by_name["NINA"]) == ["s3"]


def test_node_session_values_interleaved_union(mock):
    g = MemoryGraph(mock)
    order = ["s4", "s2", "s4", "s9", "s1", "s2"]
    for i, sid in enumerate(order):
        g.ingest_extraction(report([("Rome", "Location", f"note {i}")]), sid)
    assert g.node_session_values(g.by_name["ROME"]) == list(dict.fromkeys(order))


def test_node_session_values_unknown_node(mock):
    with pytest.raises(LookupError):
        MemoryGraph(mock).node_session_values("n999999")


# --- sim graph -------------------------------------------------------------------------


def test_identical_groups_get_one_edge(mock):
    groups = [key_group(mock, "k1", "I adopted a cat named Miso"), key_group(mock, "k2", "I adopted a cat named Miso")]
    (edge,) = build_simgraph(groups, mock)
    assert (edge.src, edge.dst) == ("k1", "k2") and edge.judged


def test_near_orthogonal_groups_get_no_edges():
    dim = 256
    texts = [
        "violin lessons every tuesday",
        "kayak trip down the river",
        "sourdough starter smells sour",
        "chess club tournament results",
        "tomato seedlings need sunlight",
        "quarterly taxes filed early",
    ]
    cos = [token_hash_cosine(a, b, dim) for a, b in itertools.combinations(texts, 2)]
    assert max(cos) < 0.5
    be = MockBackend(dim)
    groups = [key_group(be, f"k{i}", t) for i, t in enumerate(texts)]
    assert build_simgraph(groups, be) == []
    assert be.calls["judge_link"] == 15


def test_each_pair_judged_once(mock):
    groups = [key_group(mock, f"k{i}", f"trip to lake number {i}") for i in range(4)]
    seen = []

    def judge(a, b):
        seen.append(frozenset((a, b)))
        return True

    edges = build_simgraph(groups, judge)
    assert len(seen) == len(set(seen)) == 6
    assert len(edges) == 6


def test_single_group_has_no_edges(mock):
    assert build_simgraph([key_group(mock, "k1", "alone")], mock) == []


def test_add_key_groups_symmetric_without_self_loops(mock):
    g = MemoryGraph(mock, GraphSchema.SIM)
    texts = ["my cat Miso likes tuna", "my cat Miso likes salmon", "I repaired the bike chain", "bike chain repaired again"]
    g.add_key_groups([key_group(mock, f"k{i}", t, f"s{i}") for i, t in enumerate(texts)], mock)
    assert g.edges
    for nid, nbrs in g.adjacency.items():
        assert nid not in nbrs
        for other, eid in nbrs.items():
            assert g.adjacency[other][nid] == eid
    assert g.node_session_values(g.by_name["k0"]) == ["s0"]


def test_flat_schema_rejects_key_groups(mock):
    with pytest.raises(InputError):
        MemoryGraph(mock).add_key_groups([], mock)


# --- persistence -------------------------------------------------------------------------


def sample_graph(be, schema=GraphSchema.DESC):
    g = MemoryGraph(be, schema)
    for i, line in enumerate(["I visited Paris with Marta.", "Marta moved to Lyon in 2021.", "I met Omar in Paris."]):
        s = make_session(f"s{i}", line)
        g.ingest_extraction(parse_extraction(be.extract_graph(s)), s.session_id, s)
    return g


@pytest.mark.parametrize("schema", [GraphSchema.DESC, GraphSchema.KNOW])
def test_save_load_save_is_byte_identical(mock, tmp_path, schema):
    g = sample_graph(mock, schema)
    g.save(tmp_path / "a")
    MemoryGraph.load(tmp_path / "a", mock).save(tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_rebuild_is_byte_identical(tmp_path):
    sample_graph(MockBackend(64)).save(tmp_path / "a")
    sample_graph(MockBackend(64)).save(tmp_path / "b")
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes(), p.name


def test_loaded_graph_answers_like_original(mock, tmp_path):
    g = sample_graph(mock)
    g.save(tmp_path)
    h = MemoryGraph.load(tmp_path, mock)
    q = mock.embed_one("Paris trip")
    assert h.search_nodes(q, 3) == g.search_nodes(q, 3)
    assert h.search_edges(q, 3) == g.search_edges(q, 3)
    assert graph_state(h) == graph_state(g)


def test_load_rejects_dimension_mismatch(tmp_path):
    sample_graph(MockBackend(64)).save(tmp_path)
    with pytest.raises(InputError):
        MemoryGraph.load(tmp_path, MockBackend(32))


# --- properties ------------------------------------------------------------------------

NAMES = ["Ann", "Bob", "Cleo", "Dev", "ann", "BOB "]


@st.composite
def reports(draw):
    ents = draw(st.lists(st.tuples(st.sampled_from(NAMES), st.sampled_from(["Person", "Other"]), st.sampled_from(["x", "y", "z", ""])), max_size=6))
    rels = draw(st.lists(st.tuples(st.sampled_from(NAMES), st.sampled_from(NAMES), st.sampled_from(["r", "q"]), st.integers(1, 10)), max_size=6))
    return report(ents, rels)


@given(st.lists(st.tuples(reports(), st.sampled_from(["s1", "s2", "s3"])), min_size=1, max_size=5))
@settings(max_examples=60, deadline=None)
def test_graph_invariants(batches):
    be = MockBackend(32)
    g = MemoryGraph(be, GraphSchema.DESC)
    strongest: dict[frozenset, int] = {}
    for rep, sid in batches:
        g.ingest_extraction(rep, sid)
        present = {e.name.strip().upper() for e in rep.entities}
        for r in rep.relations:
            a, b = " ".join(r.source.split()).upper(), " ".join(r.target.split()).upper()
            if a != b and a in g.by_name and b in g.by_name:
                pair = frozenset((a, b))
                strongest[pair] = max(strongest.get(pair, 0), r.strength)
        assert present <= set(g.by_name)

    names = [n.canonical_name for n in g.nodes.values()]
    assert len(names) == len(set(names))
    pairs = set()
    for e in g.edges.values():
        assert e.src != e.dst
        pair = frozenset((g.nodes[e.src].canonical_name, g.nodes[e.dst].canonical_name))
        assert pair not in pairs
        pairs.add(pair)
        assert e.strength == max(s for _, s in e.contributions) == strongest[pair]
    assert pairs == set(strongest)
    for n in g.nodes.values():
        np.testing.assert_array_equal(n.embedding, be.embed_one(g.node_text(n)).astype(np.float32))


@given(reports(), st.sampled_from([GraphSchema.DESC, GraphSchema.KNOW]))
@settings(max_examples=60, deadline=None)
def test_ingest_twice_is_idempotent(rep, schema):
    g = MemoryGraph(MockBackend(32), schema)
    g.ingest_extraction(rep, "s1")
    first = graph_state(g)
    summary = g.ingest_extraction(rep, "s1")
    assert graph_state(g) == first
    assert (summary.nodes_added, summary.edges_added, summary.nodes_merged, summary.edges_merged) == (0, 0, 0, 0)
