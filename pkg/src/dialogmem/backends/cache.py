"""Content-addressed response cache and the backend wrapper that uses it."""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import os
import tempfile
import threading
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import Query, Session, format_date
from .base import AnswerMode, Backend, FlatExtraction, MemOpDecision

logger = logging.getLogger(__name__)


@dataclass
class CacheEntry:
    content_hash: str
    response: bytes
    hit_count: int = 0


def request_hash(backend: str, model: str, template: str, op: str, payload) -> str:
    blob = json.dumps([backend, model, template, op, payload], sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ResponseCache:
    """Append-only directory of entries keyed by request hash.

    Entry file: line 1 the request hash, line 2 a JSON metadata line, then the raw
    response bytes. Entries whose hash or checksum does not verify are discarded.
    """

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._memo: dict[str, CacheEntry] = {}
        self._write_lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.directory / key[:2] / f"{key}.entry"

    def get(self, key: str) -> CacheEntry | None:
        entry = self._memo.get(key)
        if entry is None:
            entry = self._read(key)
            if entry is None:
                return None
            self._memo[key] = entry
        entry.hit_count += 1
        return entry

    def _read(self, key: str) -> CacheEntry | None:
        path = self._path(key)
        try:
            blob = path.read_bytes()
        except FileNotFoundError:
            return None
        try:
            head, meta_line, response = blob.split(b"\n", 2)
            meta = json.loads(meta_line)
            valid = head.decode() == key and hashlib.sha256(response).hexdigest() == meta["sha256"]
        except (ValueError, KeyError, UnicodeDecodeError):
            valid = False
        if not valid:
            logger.warning("cache entry %s failed verification; discarding", key)
            path.unlink(missing_ok=True)
            return None
        return CacheEntry(key, response)

    def put(self, key: str, response: bytes, meta: dict) -> None:
        meta = dict(meta, sha256=hashlib.sha256(response).hexdigest(), size=len(response))
        blob = key.encode() + b"\n" + json.dumps(meta, sort_keys=True).encode() + b"\n" + response
        path = self._path(key)
        with self._write_lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, path)
            self._memo[key] = CacheEntry(key, response)

    def __len__(self) -> int:
        return sum(1 for _ in self.directory.glob("*/*.entry"))


class CachedBackend(Backend):
    """Wraps another backend; identical requests are answered from the cache."""

    def __init__(self, inner: Backend, cache: ResponseCache | str | os.PathLike):
        super().__init__()
        self.inner = inner
        self.cache = cache if isinstance(cache, ResponseCache) else ResponseCache(cache)
        self.name = inner.name
        self.model = inner.model
        self.embedder = inner.embedder
        self.calls = inner.calls
        self.hits: Counter[str] = Counter()
        self.misses: Counter[str] = Counter()

    def template_version(self, op: str) -> str:
        return self.inner.template_version(op)

    def _through(self, op: str, payload, compute, encode, decode):
        key = request_hash(self.name, self.model, self.template_version(op), op, payload)
        entry = self.cache.get(key)
        if entry is not None:
            with self._lock:
                self.hits[op] += 1
            return decode(entry.response)
        result = compute()
        with self._lock:
            self.misses[op] += 1
        self.cache.put(key, encode(result), {"op": op, "backend": self.name, "model": self.model})
        return result

    def _embed(self, texts: list[str]) -> np.ndarray:
        dim = self.dimension
        spec = self.embedder.name
        keys = [request_hash(self.name, self.model, spec, "embed", t) for t in texts]
        out: list[np.ndarray | None] = [None] * len(texts)
        missing: dict[str, list[int]] = {}
        for i, key in enumerate(keys):
            entry = self.cache.get(key)
            if entry is None:
                missing.setdefault(texts[i], []).append(i)
            else:
                out[i] = np.frombuffer(entry.response, dtype="<f8").copy()
        with self._lock:
            self.hits["embed"] += len(texts) - sum(len(v) for v in missing.values())
        if missing:
            fresh = self.inner._embed(list(missing))
            with self._lock:
                self.misses["embed"] += len(missing)
            for (text, positions), vec in zip(missing.items(), fresh):
                vec = np.asarray(vec, dtype="<f8")
                self.cache.put(keys[positions[0]], vec.tobytes(), {"op": "embed", "backend": self.name, "model": spec})
                for i in positions:
                    out[i] = vec.copy()
        return np.stack(out).reshape(len(texts), dim)

    def _extract_flat(self, session: Session) -> FlatExtraction:
        payload = {"date": format_date(session.date), "user_text": session.user_text}
        return self._through(
            "extract_flat",
            payload,
            lambda: self.inner._extract_flat(session),
            lambda r: json.dumps(r.to_dict(), sort_keys=True).encode(),
            lambda b: FlatExtraction.from_dict(json.loads(b)),
        )

    def _extract_graph(self, session: Session, dialogue_time: dt.date) -> str:
        payload = {"dialogue_time": format_date(dialogue_time), "user_text": session.user_text}
        return self._through(
            "extract_graph",
            payload,
            lambda: self.inner._extract_graph(session, dialogue_time),
            str.encode,
            bytes.decode,
        )

    def _prejudge(self, chunk: str) -> bool:
        return self._through(
            "prejudge", {"chunk": chunk}, lambda: self.inner._prejudge(chunk),
            lambda r: b"1" if r else b"0", lambda b: b == b"1",
        )

    def _decide_mem_op(self, new_fact, candidates) -> MemOpDecision:
        payload = {"fact": new_fact, "candidates": [list(c) for c in candidates]}
        return self._through(
            "decide_mem_op",
            payload,
            lambda: self.inner._decide_mem_op(new_fact, candidates),
            lambda r: json.dumps(r.to_dict(), sort_keys=True).encode(),
            lambda b: MemOpDecision.from_dict(json.loads(b)),
        )

    def _generate_answer(self, question: Query, contexts: list[str], mode: AnswerMode) -> str:
        payload = {
            "question": question.text,
            "date": format_date(question.query_date) if question.query_date else None,
            "contexts": contexts,
            "mode": mode.value,
        }
        return self._through(
            "generate_answer", payload, lambda: self.inner._generate_answer(question, contexts, mode),
            str.encode, bytes.decode,
        )

    def _summarize(self, texts: list[str], limit: int) -> str:
        return self._through(
            "summarize", {"texts": texts, "limit": limit}, lambda: self.inner._summarize(texts, limit),
            str.encode, bytes.decode,
        )

    def _judge_link(self, text_a: str, text_b: str) -> bool:
        return self._through(
            "judge_link", {"a": text_a, "b": text_b}, lambda: self.inner._judge_link(text_a, text_b),
            lambda r: b"1" if r else b"0", lambda b: b == b"1",
        )

    def stats(self) -> dict:
        return {
            "calls": dict(sorted(self.calls.items())),
            "cache_hits": dict(sorted(self.hits.items())),
            "cache_misses": dict(sorted(self.misses.items())),
        }
