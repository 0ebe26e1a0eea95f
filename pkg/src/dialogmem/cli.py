"""Command-line entry point: build, retrieve, eval and stats.

Exit status is 0 on success, 2 for input or configuration errors and 3 when a
backend keeps failing after retries.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

from .backends import BackendError, CachedBackend, make_backend
from .backends.remote import RemoteBackend, require_credentials
from .core import InputError, PipelineConfig, Query, Session, validate_config
from .engine import DEFAULT_PARALLEL, MemorySystem
from .evaluation import (
    containment_judge,
    format_table,
    load_halumem,
    load_longmemeval,
    remote_judge,
    run_qa_eval,
    table_tsv,
)

logger = logging.getLogger("dialogmem")

EXIT_OK, EXIT_INPUT, EXIT_BACKEND = 0, 2, 3
MANIFEST = "manifest.json"
DEFAULT_CACHE = ".dialogmem_cache"


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------


def load_config(path: str | Path) -> tuple[PipelineConfig, dict]:
    """Read ``{"pipeline": {...}, "backend": {...}}``; a bare pipeline mapping is accepted too."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InputError("config must be a JSON object")
    pipeline = raw.get("pipeline", {k: v for k, v in raw.items() if k not in ("backend", "label")})
    backend = dict(raw.get("backend", {"kind": "mock"}))
    config = PipelineConfig.from_dict(pipeline)
    result = validate_config(config)
    if not result.ok:
        raise InputError("invalid config:\n  " + "\n  ".join(result.errors))
    for w in result.warnings:
        logger.warning("config: %s", w)
    return config, backend


def _sniff(data) -> str:
    if isinstance(data, dict) and "users" in data:
        return "halumem"
    if isinstance(data, list) and data and isinstance(data[0], dict) and "haystack_sessions" in data[0]:
        return "longmemeval"
    return "sessions"


def load_corpus(path: str | Path, fmt: str = "auto", corpus_name: str = "lme") -> list[Session]:
    """Sessions from a LongMemEval file, a HaluMem file, or a JSON/JSONL list of sessions."""
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    if fmt == "auto":
        try:
            fmt = _sniff(json.loads(text))
        except json.JSONDecodeError:
            fmt = "sessions"
    if fmt == "longmemeval":
        return load_longmemeval(p, corpus_name)[0]
    if fmt == "halumem":
        return load_halumem(p, corpus_name)[0]
    if fmt != "sessions":
        raise InputError(f"unknown corpus format {fmt!r}")
    try:
        stripped = text.lstrip()
        records = json.loads(text) if stripped.startswith("[") else [json.loads(l) for l in text.splitlines() if l.strip()]
    except json.JSONDecodeError as exc:
        raise InputError(f"{p} is neither JSON nor JSON lines: {exc}") from exc
    try:
        return [Session.from_dict(r) for r in records]
    except (KeyError, TypeError) as exc:
        raise InputError(f"session record missing field: {exc}") from exc


def corpus_fingerprint(sessions: list[Session]) -> str:
    h = hashlib.sha256()
    for s in sessions:
        h.update(json.dumps(s.to_dict(), sort_keys=True, ensure_ascii=False).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def _cache_dir(args, backend_spec: dict) -> str | None:
    if getattr(args, "no_cache", False):
        return None
    return args.cache or backend_spec.get("cache_dir") or os.environ.get("DIALOGMEM_CACHE") or DEFAULT_CACHE


def _backend(spec: dict, cache_dir, max_parallel: int):
    spec = {k: v for k, v in spec.items() if k != "cache_dir"}
    if spec.get("kind") == "remote":
        require_credentials()
        spec.setdefault("max_parallel", max_parallel)
    return make_backend(spec, cache_dir)


def _manifest(index_dir: Path) -> dict:
    path = index_dir / MANIFEST
    if not path.exists():
        raise InputError(f"no manifest in {index_dir}")
    return json.loads(path.read_text(encoding="utf-8"))


def _open_index(args) -> MemorySystem:
    index_dir = Path(args.index)
    manifest = _manifest(index_dir)
    spec = manifest["backend"]
    backend = _backend(spec, _cache_dir(args, spec), args.max_parallel)
    return MemorySystem.load(index_dir, backend, args.max_parallel)


def _call_counters(backend) -> dict:
    stats = backend.stats()
    out = {"calls": stats.get("calls", {})}
    if isinstance(backend, CachedBackend):
        out["cache_hits"] = stats.get("cache_hits", {})
        out["cache_misses"] = stats.get("cache_misses", {})
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


class _Lock:
    def __init__(self, target: Path):
        self.path = target.parent / f".{target.name}.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise InputError(f"another build holds {self.path}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def cmd_build(args) -> int:
    config, backend_spec = load_config(args.config)
    sessions = load_corpus(args.corpus, args.format, args.corpus_name)
    out = Path(args.out)
    with _Lock(out):
        backend = _backend(backend_spec, _cache_dir(args, backend_spec), args.max_parallel)
        staging = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
        staging.chmod(0o755)
        try:
            start = time.perf_counter()
            system = MemorySystem(config, backend, args.max_parallel)
            stats = system.build(sessions)
            system.save(staging)
            manifest = {
                "config": config.to_dict(),
                "backend": backend_spec,
                "embedder": backend.embedder.to_dict(),
                "corpus": {"path": str(args.corpus), "fingerprint": corpus_fingerprint(sessions), "sessions": len(sessions)},
                "counts": system.counts(),
                "build": stats.to_dict(),
                "counters": _call_counters(backend),
                "timing": {"build_seconds": round(time.perf_counter() - start, 3)},
            }
            (staging / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except BaseException:
            shutil.rmtree(staging, ignore_errors=True)
            raise
        if out.exists():
            shutil.rmtree(out)
        os.replace(staging, out)
    print(f"built {config.index_kind.value} index at {out}: {json.dumps(system.counts(), sort_keys=True)}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    system = _open_index(args)
    k = args.k if args.k is not None else system.config.k_keys
    n = args.n if args.n is not None else system.config.n_values
    if k <= 0 or n <= 0:
        raise InputError("--k and --n must be positive")
    trace: list | None = [] if args.trace else None
    start = time.perf_counter()
    hits = system.retrieve(Query(args.query, args.date), max(k, n), n, trace=trace)
    elapsed = (time.perf_counter() - start) * 1000
    for rank, hit in enumerate(hits, 1):
        extra = ""
        if hit.details:
            extra = f"  score_e={hit.details['score_e']:.4f} score_g={hit.details['score_g']}"
            if hit.details.get("score_s") is not None:
                extra += f" score_s={hit.details['score_s']:.4f}"
        print(f"{rank}\t{hit.value.value_id}\t{hit.score:.4f}{extra}")
    if trace is not None:
        for rec in trace:
            print(json.dumps(rec, sort_keys=True, ensure_ascii=False))
    logger.info("retrieval took %.1f ms", elapsed)
    return EXIT_OK


def cmd_eval(args) -> int:
    system = _open_index(args)
    manifest = _manifest(Path(args.index))
    fmt = args.format
    if fmt == "auto":
        fmt = "halumem" if _sniff(json.loads(Path(args.questions).read_text(encoding="utf-8"))) == "halumem" else "longmemeval"
    if fmt == "halumem":
        questions = load_halumem(args.questions, args.corpus_name)[1]
    else:
        questions = load_longmemeval(args.questions, args.corpus_name)[1]
    if args.limit:
        questions = questions[: args.limit]
    if args.judge == "remote":
        require_credentials()
        judge_backend = RemoteBackend.from_env(max_parallel=args.max_parallel)
        judge = remote_judge(judge_backend)
    else:
        judge = containment_judge
    label = args.label or Path(args.index).name
    start = time.perf_counter()
    report = run_qa_eval(system, questions, judge, n_values=args.n, max_parallel=args.max_parallel, label=label)
    elapsed = time.perf_counter() - start
    out = Path(args.out) if args.out else Path(args.index) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "table.tsv").write_text(table_tsv([report]), encoding="utf-8")
    timing = {
        "questions": len(questions),
        "seconds": round(elapsed, 3),
        "ms_per_query": round(1000 * elapsed / max(len(questions), 1), 3),
        "index_fingerprint": manifest["corpus"]["fingerprint"],
        "counters": _call_counters(system.backend),
    }
    (out / "run.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    sys.stdout.write(format_table([report]))
    agg = report.aggregates
    print(f"scored {agg['scored']} of {agg['questions']} questions ({agg['flagged']} flagged, {agg['errors']} errors)")
    return EXIT_OK


def cmd_stats(args) -> int:
    index_dir = Path(args.index)
    manifest = _manifest(index_dir)
    meta = json.loads((index_dir / "index" / "meta.json").read_text(encoding="utf-8"))
    rows = [("index", meta["index"]), ("sessions", manifest["corpus"]["sessions"])]
    if meta["index"] == "flat":
        rows += [("keys", meta["num_keys"]), ("facts", meta["num_facts"]), ("key_strategy", meta["key_strategy"])]
    else:
        rows += [("nodes", meta["num_nodes"]), ("edges", meta["num_edges"]), ("schema", meta["schema"])]
    counters = manifest.get("counters", {})
    for op, n in sorted(counters.get("calls", {}).items()):
        rows.append((f"calls.{op}", n))
    hits = counters.get("cache_hits", {})
    misses = counters.get("cache_misses", {})
    for op in sorted(set(hits) | set(misses)):
        total = hits.get(op, 0) + misses.get(op, 0)
        rows.append((f"cache.{op}", f"{hits.get(op, 0)}/{total} hits"))
    build = manifest.get("build", {})
    rows.append(("extraction_seconds", build.get("extraction_seconds")))
    rows.append(("build_seconds", manifest.get("timing", {}).get("build_seconds")))
    for name, value in rows:
        print(f"{name}: {value}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dialogmem", description="Build and query long-term dialog memory indices.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--max-parallel", type=int, default=DEFAULT_PARALLEL)
        sp.add_argument("--cache", help="response cache directory (default: $DIALOGMEM_CACHE or .dialogmem_cache)")
        sp.add_argument("--no-cache", action="store_true")

    b = sub.add_parser("build", help="extract and index a corpus")
    b.add_argument("--config", required=True)
    b.add_argument("--corpus", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--format", default="auto", choices=("auto", "sessions", "longmemeval", "halumem"))
    b.add_argument("--corpus-name", default="lme")
    common(b)
    b.set_defaults(func=cmd_build)

    r = sub.add_parser("retrieve", help="rank values for one query")
    r.add_argument("index")
    r.add_argument("query")
    r.add_argument("--k", type=int)
    r.add_argument("--n", type=int)
    r.add_argument("--date", help="query date, YYYY/MM/DD")
    r.add_argument("--trace", action="store_true")
    common(r)
    r.set_defaults(func=cmd_retrieve)

    e = sub.add_parser("eval", help="retrieval and QA evaluation")
    e.add_argument("index")
    e.add_argument("questions")
    e.add_argument("--out")
    e.add_argument("--n", type=int)
    e.add_argument("--judge", choices=("containment", "remote"), default="containment")
    e.add_argument("--format", default="auto", choices=("auto", "longmemeval", "halumem"))
    e.add_argument("--corpus-name", default="lme")
    e.add_argument("--limit", type=int)
    e.add_argument("--label")
    common(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", help="counts and costs of a built index")
    s.add_argument("index")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "max_parallel", 1) < 1:
        print("error: --max-parallel must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (InputError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
