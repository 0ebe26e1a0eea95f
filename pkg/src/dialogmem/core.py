"""Shared data model: dialog content, memory keys/values and the pipeline configuration."""

from __future__ import annotations

import datetime as dt
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Any, Iterable

import numpy as np


class InputError(ValueError):
    """Caller supplied invalid input (maps to CLI exit status 2)."""


# ---------------------------------------------------------------------------
# Dialog content
# ---------------------------------------------------------------------------


class Role(str, Enum):
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class Turn:
    role: Role
    text: str
    turn_index: int

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        if self.turn_index < 0:
            raise InputError(f"turn_index must be non-negative, got {self.turn_index}")

    @property
    def indexable(self) -> bool:
        return bool(self.text.strip())


def parse_date(value: str | dt.date | None) -> dt.date | None:
    """Accept YYYY/MM/DD (optionally followed by a weekday/time suffix) or ISO dates."""
    if value is None or isinstance(value, dt.date):
        return value
    head = value.strip().split(" ")[0].replace("-", "/")
    try:
        y, m, d = (int(p) for p in head.split("/")[:3])
        return dt.date(y, m, d)
    except (ValueError, TypeError) as exc:
        raise InputError(f"not a calendar date: {value!r}") from exc


def format_date(value: dt.date) -> str:
    return value.strftime("%Y/%m/%d")


@dataclass(frozen=True)
class Session:
    session_id: str
    date: dt.date
    turns: tuple[Turn, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "date", parse_date(self.date))
        object.__setattr__(self, "turns", tuple(self.turns))
        indices = [t.turn_index for t in self.turns]
        if indices != list(range(len(indices))):
            raise InputError(f"session {self.session_id}: turn indices must be 0..n-1 in order")

    @classmethod
    def from_messages(cls, session_id: str, date, messages: Iterable[dict]) -> "Session":
        turns = tuple(
            Turn(Role(m["role"]), m.get("content", m.get("text", "")), i)
            for i, m in enumerate(messages)
        )
        return cls(session_id, date, turns)

    @property
    def user_text(self) -> str:
        """User turns only, newline-joined; empty turns are skipped."""
        return "\n".join(t.text.strip() for t in self.turns if t.role is Role.USER and t.indexable)

    @property
    def full_text(self) -> str:
        return "\n".join(f"{t.role.value}: {t.text.strip()}" for t in self.turns if t.indexable)

    @property
    def has_user_turn(self) -> bool:
        return any(t.role is Role.USER and t.indexable for t in self.turns)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "date": format_date(self.date),
            "turns": [{"role": t.role.value, "content": t.text} for t in self.turns],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Session":
        return cls.from_messages(d["session_id"], d["date"], d["turns"])


@dataclass(frozen=True)
class Query:
    text: str
    query_date: dt.date | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise InputError("query text is empty")
        object.__setattr__(self, "query_date", parse_date(self.query_date))


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------


def unit_vector(values) -> np.ndarray:
    """L2-normalize; rejects non-finite input and zero vectors."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise InputError("embedding must be a non-empty 1-D vector")
    if not np.all(np.isfinite(vec)):
        raise InputError("embedding has non-finite values")
    scale = float(np.max(np.abs(vec)))
    if scale == 0.0:
        raise InputError("cannot normalize a zero vector")
    vec = vec / scale  # keeps tiny or huge inputs from under/overflowing the norm
    return vec / np.linalg.norm(vec)


def reserved_vector(dim: int) -> np.ndarray:
    """Stand-in for degenerate text: the first basis direction."""
    vec = np.zeros(dim, dtype=np.float64)
    vec[0] = 1.0
    return vec


def is_degenerate_text(text: str) -> bool:
    from .textutil import tokenize

    return not tokenize(text)


# ---------------------------------------------------------------------------
# Keys and values
# ---------------------------------------------------------------------------


class KeyKind(str, Enum):
    SESSION_TEXT = "session_text"
    SUMMARY = "summary"
    FACT = "fact"
    KEYWORD = "keyword"
    MERGED_TYPE_GROUP = "merged_type_group"
    MERGED_ALL = "merged_all"
    ENTITY_DESCRIPTION = "entity_description"
    TRIPLE_TEXT = "triple_text"


@dataclass(frozen=True)
class KeyUnit:
    key_id: str
    kind: KeyKind
    text: str
    embedding: np.ndarray = field(compare=False, repr=False)
    provenance_session_ids: tuple[str, ...]
    created_at: int
    facet: str = ""  # type label inside merge_by_type groups: session/summary/facts/keywords
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", KeyKind(self.kind))
        object.__setattr__(self, "provenance_session_ids", tuple(self.provenance_session_ids))
        if not self.provenance_session_ids:
            raise InputError(f"key {self.key_id} has no provenance session")


class ValueKind(str, Enum):
    SESSION = "session"
    KEY = "key"


@dataclass(frozen=True)
class ValueRef:
    value_id: str
    kind: ValueKind
    payload: str

    @classmethod
    def session(cls, session_id: str) -> "ValueRef":
        return cls(session_id, ValueKind.SESSION, session_id)

    @classmethod
    def key(cls, key_id: str) -> "ValueRef":
        return cls(key_id, ValueKind.KEY, key_id)


# ---------------------------------------------------------------------------
# Pipeline configuration
# ---------------------------------------------------------------------------


class KeyStrategy(str, Enum):
    SESSION_ONLY = "session_only"
    SEPARATE_SFK = "separate_sfk"  # S,F,K
    MERGE_BY_TYPE = "merge_by_type"  # per-type groups, scores averaged
    MERGE_ALL = "merge_all"  # [S,F,K]
    SESSION_PLUS_MERGED = "session_plus_merged"  # session,[S,F,K]
    SESSION_PLUS_TYPES = "session_plus_types"  # session,S,F,K
    MERGE_ALL_WITH_SESSION = "merge_all_with_session"  # [session,S,F,K]
    GRAPH_ENTITIES = "graph_entities"


class IndexKind(str, Enum):
    FLAT = "flat"
    GRAPH = "graph"


class GraphSchema(str, Enum):
    SIM = "sim"
    KNOW = "know"
    DESC = "desc"


class Activation(str, Enum):
    ENTITY = "entity"
    TRIPLE = "triple"


class Expansion(str, Enum):
    NONE = "none"
    ONE_HOP = "one_hop"


class Rerank(str, Enum):
    SCORE_S = "score_s"
    SCORE_E = "score_e"
    SCORE_E_G = "score_e_g"


class DescriptionMode(str, Enum):
    APPEND = "append"
    SUMMARIZE = "summarize"


OPS = ("add", "update", "noop", "delete")

_ENUM_FIELDS = {
    "key_strategy": KeyStrategy,
    "value_kind": ValueKind,
    "index_kind": IndexKind,
    "graph_schema": GraphSchema,
    "activation": Activation,
    "expansion": Expansion,
    "rerank": Rerank,
    "description_mode": DescriptionMode,
}

# Fields that only matter for graph indices; a flat config that sets them gets a warning.
GRAPH_FIELDS = ("graph_schema", "activation", "expansion", "rerank", "expansion_budget", "description_mode")


@dataclass(frozen=True)
class PipelineConfig:
    """One point in the design space: key form, value form, index, operations, retrieval."""

    key_strategy: KeyStrategy = KeyStrategy.MERGE_ALL
    value_kind: ValueKind = ValueKind.SESSION
    index_kind: IndexKind = IndexKind.FLAT
    op_set: frozenset[str] = frozenset({"add"})
    graph_schema: GraphSchema = GraphSchema.DESC
    activation: Activation = Activation.ENTITY
    expansion: Expansion = Expansion.NONE
    rerank: Rerank = Rerank.SCORE_E_G
    k_keys: int = 20
    n_values: int = 5
    expansion_budget: int = 50
    prejudge_enabled: bool = False
    description_mode: DescriptionMode = DescriptionMode.APPEND
    candidate_m: int = 5
    temporal_filter: bool = False  # reserved hook, not implemented

    def __post_init__(self):
        for name, enum in _ENUM_FIELDS.items():
            object.__setattr__(self, name, enum(getattr(self, name)))
        object.__setattr__(self, "op_set", frozenset(self.op_set))

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Enum):
                v = v.value
            elif isinstance(v, frozenset):
                v = sorted(v, key=OPS.index) if set(v) <= set(OPS) else sorted(v)
            out[f.name] = v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "op_set" in kwargs:
            kwargs["op_set"] = frozenset(kwargs["op_set"])
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise InputError(str(exc)) from exc

    def replace(self, **changes) -> "PipelineConfig":
        d = asdict(self)
        d.update(changes)
        return PipelineConfig(**d)


@dataclass
class ValidationResult:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    @property
    def violations(self) -> list[str]:
        return self.errors + self.warnings


def validate_config(config: PipelineConfig) -> ValidationResult:
    """Collect every violated invariant. Errors make the config unusable; warnings do not."""
    res = ValidationResult()
    if config.k_keys <= 0:
        res.errors.append("k_keys must be positive")
    if config.n_values <= 0:
        res.errors.append("n_values must be positive")
    if config.k_keys < config.n_values:
        res.errors.append("k_keys < n_values")
    if config.expansion_budget < 0:
        res.errors.append("expansion_budget must be non-negative")
    if config.candidate_m <= 0:
        res.errors.append("candidate_m must be positive")

    bad_ops = set(config.op_set) - set(OPS)
    if bad_ops:
        res.errors.append(f"unknown operations: {sorted(bad_ops)}")
    if not config.op_set:
        res.errors.append("op_set is empty")
    elif "add" not in config.op_set:
        res.warnings.append("add absent: running the without-add ablation mode")

    if config.index_kind is IndexKind.FLAT:
        if config.key_strategy is KeyStrategy.GRAPH_ENTITIES:
            res.errors.append("key_strategy graph_entities requires index_kind graph")
        default = PipelineConfig()
        changed = [f for f in GRAPH_FIELDS if getattr(config, f) != getattr(default, f)]
        if changed:
            res.warnings.append(f"graph fields ignored for flat index: {changed}")
    else:
        if config.graph_schema is GraphSchema.SIM:
            if config.key_strategy is not KeyStrategy.MERGE_ALL:
                res.errors.append("sim graph is built over merge_all key groups")
        elif config.key_strategy is not KeyStrategy.GRAPH_ENTITIES:
            res.errors.append(f"{config.graph_schema.value} graph requires key_strategy graph_entities")
        if config.graph_schema is GraphSchema.SIM and config.activation is Activation.TRIPLE:
            res.errors.append("sim graph has no triples to activate")
        if config.op_set - {"add"}:
            res.warnings.append("graph maintenance uses alignment merging; update/noop/delete apply to flat indices")
    if config.temporal_filter:
        res.warnings.append("temporal_filter is a reserved hook with no effect")
    return res


# ---------------------------------------------------------------------------
# Session id canonicalization
# ---------------------------------------------------------------------------


def content_hash(text: str, length: int = 10) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


class SessionIdRegistry:
    """Hands out collision-free session ids for one corpus.

    A raw id seen again with the same content maps to the same canonical id; a raw id
    reused for different content gets a content-hash suffix.
    """

    def __init__(self, corpus_name: str):
        if not corpus_name:
            raise InputError("corpus name is empty")
        self.corpus_name = corpus_name
        self._by_raw: dict[str, dict[str, str]] = {}
        self._taken: set[str] = set()

    def canonical(self, raw_id: str, content: str = "") -> str:
        if not raw_id:
            raise InputError("raw session id is empty")
        variants = self._by_raw.setdefault(raw_id, {})
        if content in variants:
            return variants[content]
        base = f"{self.corpus_name}/{raw_id}"
        candidate = base if not variants else f"{base}#{content_hash(content, 8)}"
        n = 1
        while candidate in self._taken:
            n += 1
            candidate = f"{base}#{content_hash(content, 8)}-{n}"
        variants[content] = candidate
        self._taken.add(candidate)
        return candidate


def canonical_session_id(corpus_name: str, raw_id: str) -> str:
    """Stateless form for ids already known to be unique."""
    if not raw_id:
        raise InputError("raw session id is empty")
    return f"{corpus_name}/{raw_id}"
