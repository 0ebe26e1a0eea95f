from __future__ import annotations

from .base import (
    AnswerMode,
    Backend,
    BackendError,
    EmbedderKind,
    EmbedderSpec,
    ExtractionError,
    FlatExtraction,
    MemOp,
    MemOpDecision,
    RetryableError,
)
from .cache import CacheEntry, CachedBackend, ResponseCache, request_hash
from .mock import MockBackend, hash_embed, hash_token
from .remote import RemoteBackend


def make_backend(spec: dict | None = None, cache_dir=None) -> Backend:
    """Build a backend from a config mapping such as ``{"kind": "mock", "dimension": 256}``."""
    spec = dict(spec or {})
    kind = spec.pop("kind", "mock")
    if kind == "mock":
        backend: Backend = MockBackend(**{k: v for k, v in spec.items() if k in ("dimension", "model")})
    elif kind == "remote":
        allowed = ("chat_model", "embedding_model", "dimension", "base_url", "max_parallel", "max_attempts", "backoff", "temperature")
        backend = RemoteBackend.from_env(**{k: v for k, v in spec.items() if k in allowed})
    else:
        raise ValueError(f"unknown backend kind {kind!r}")
    if cache_dir is not None:
        backend = CachedBackend(backend, cache_dir)
    return backend


__all__ = [
    "AnswerMode",
    "Backend",
    "BackendError",
    "CacheEntry",
    "CachedBackend",
    "EmbedderKind",
    "EmbedderSpec",
    "ExtractionError",
    "FlatExtraction",
    "MemOp",
    "MemOpDecision",
    "MockBackend",
    "RemoteBackend",
    "ResponseCache",
    "RetryableError",
    "hash_embed",
    "hash_token",
    "make_backend",
    "request_hash",
]
