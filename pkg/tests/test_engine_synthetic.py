from __future__ import annotations

import json

import pytest

from dialogmem import presets
from dialogmem.backends import MockBackend
from dialogmem.cli import load_config
from dialogmem.core import InputError, PipelineConfig
from dialogmem.engine import MemorySystem
from dialogmem.evaluation import load_longmemeval
from dialogmem.synthetic import chatter_corpus, graph_corpus, maintenance_corpus, planted_benchmark, to_longmemeval

from factories import make_session


@pytest.mark.parametrize("name", presets.names())
def test_every_preset_validates(name):
    config, backend = load_config(presets.path(name))
    assert backend["kind"] in ("mock", "remote")
    assert PipelineConfig.from_dict(config.to_dict()) == config


def test_preset_names_cover_each_axis():
    names = set(presets.names())
    for prefix in ("keys_", "ops_", "graph_", "activation_", "expansion_", "rerank_", "flat_value_"):
        assert any(n.startswith(prefix) for n in names), prefix


@pytest.mark.parametrize("seed", [0, 1, 5])
def test_planted_generator_is_seeded(seed):
    a, b = planted_benchmark(seed), planted_benchmark(seed)
    assert [s.to_dict() for s in a.sessions] == [s.to_dict() for s in b.sessions]
    assert a.questions == b.questions
    ids = {s.session_id for s in a.sessions}
    assert len(ids) == 100
    assert all(set(q.evidence_session_ids) <= ids for q in a.questions)
    assert min(a.distractor_overlap) >= 0.5


def test_planted_generator_rejects_too_few_distractors():
    with pytest.raises(ValueError):
        planted_benchmark(n_questions=20, n_sessions=30)


def test_maintenance_corpus_shape():
    mc = maintenance_corpus(seed=2)
    assert len(mc.sessions) == 50
    assert len(mc.contradictions) == 20 and len(mc.duplicates) == 30
    text = "\n".join(s.user_text for s in mc.sessions)
    for old, new in mc.contradictions.values():
        assert old in text and new in text and old != new


def test_other_generators_are_deterministic():
    assert graph_corpus(4, 30) == graph_corpus(4, 30)
    assert chatter_corpus(4) == chatter_corpus(4)


def test_longmemeval_export_round_trips(tmp_path):
    corpus = planted_benchmark(seed=1, n_questions=4, n_sessions=12)
    path = tmp_path / "q.json"
    path.write_text(json.dumps(to_longmemeval(corpus)))
    sessions, questions = load_longmemeval(path, "x")
    assert len(sessions) == 12
    assert [q.answer_text for q in questions] == [q.answer_text for q in corpus.questions]
    assert not any(q.flagged for q in questions)


def test_engine_rejects_invalid_config():
    with pytest.raises(InputError):
        MemorySystem(PipelineConfig(k_keys=2, n_values=5), MockBackend(32))


def test_engine_rejects_reused_session_id():
    system = MemorySystem(PipelineConfig(), MockBackend(32))
    system.build([make_session("s1", "I am 30.")])
    system.build([make_session("s1", "I am 30.")])  # same content is a no-op
    with pytest.raises(InputError):
        system.build([make_session("s1", "I am 31.")])


def test_engine_save_load_round_trip(tmp_path):
    cfg = PipelineConfig(key_strategy="merge_all")
    system = MemorySystem(cfg, MockBackend(64), max_parallel=4)
    system.build(planted_benchmark(seed=0, n_questions=3, n_sessions=9).sessions)
    system.save(tmp_path)
    again = MemorySystem.load(tmp_path, MockBackend(64))
    assert again.counts() == system.counts()
    q = "What is my favourite thing called?"
    assert [h.value for h in again.retrieve(q)] == [h.value for h in system.retrieve(q)]
