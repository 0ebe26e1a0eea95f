"""Compare flat and graph configurations on the seeded planted benchmark.

Runs entirely on the deterministic mock backend, so no credentials are needed:

    python3 demos/compare_configs.py
"""

from __future__ import annotations

import logging

from dialogmem import MemorySystem, MockBackend, PipelineConfig, Query, run_retrieval_eval
from dialogmem.evaluation import format_table
from dialogmem.synthetic import planted_benchmark

CONFIGS = {
    "flat merge_all": dict(key_strategy="merge_all"),
    "flat session_only": dict(key_strategy="session_only"),
    "desc score_e_g": dict(index_kind="graph", graph_schema="desc", key_strategy="graph_entities"),
    "sim one_hop score_s": dict(
        index_kind="graph", graph_schema="sim", key_strategy="merge_all", expansion="one_hop", rerank="score_s"
    ),
}


def main() -> None:
    logging.basicConfig(level=logging.WARNING)
    corpus = planted_benchmark(seed=0)
    reports, systems = [], {}
    for label, fields in CONFIGS.items():
        system = MemorySystem(PipelineConfig(**fields), MockBackend(256), max_parallel=4)
        system.build(corpus.sessions)
        systems[label] = system
        reports.append(run_retrieval_eval(system, corpus.questions, label=label))
    print(format_table(reports))

    q = corpus.questions[0]
    print(f"\nquery: {q.question_text}\nevidence: {', '.join(q.evidence_session_ids)}")
    trace: list[dict] = []
    hits = systems["desc score_e_g"].retrieve(Query(q.question_text), trace=trace)
    for step in trace:
        print(f"  {step}")
    print("top values:", ", ".join(h.value.value_id for h in hits))


if __name__ == "__main__":
    main()
