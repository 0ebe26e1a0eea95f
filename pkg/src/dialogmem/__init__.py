"""Configurable long-term dialog memory: flat and graph indices, maintenance, retrieval, evaluation."""

from .backends import CachedBackend, MockBackend, RemoteBackend, make_backend
from .core import (
    InputError,
    KeyKind,
    KeyStrategy,
    KeyUnit,
    PipelineConfig,
    Query,
    Session,
    Turn,
    ValueKind,
    ValueRef,
    validate_config,
)
from .engine import MemorySystem
from .evaluation import ndcg_at_k, recall_at_k, run_qa_eval, run_retrieval_eval
from .flat import FlatIndex
from .graph import MemoryGraph
from .parser import parse_extraction

__version__ = "0.1.0"

__all__ = [
    "CachedBackend",
    "FlatIndex",
    "InputError",
    "KeyKind",
    "KeyStrategy",
    "KeyUnit",
    "MemoryGraph",
    "MemorySystem",
    "MockBackend",
    "PipelineConfig",
    "Query",
    "RemoteBackend",
    "Session",
    "Turn",
    "ValueKind",
    "ValueRef",
    "make_backend",
    "ndcg_at_k",
    "parse_extraction",
    "recall_at_k",
    "run_qa_eval",
    "run_retrieval_eval",
    "validate_config",
]
