"""Client for OpenAI-compatible chat-completions and embeddings endpoints."""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import os
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from importlib import resources

import httpx
import numpy as np

from ..core import InputError, Query, Session, format_date, reserved_vector
from .base import (
    AnswerMode,
    Backend,
    BackendError,
    EmbedderKind,
    EmbedderSpec,
    ExtractionError,
    FlatExtraction,
    MemOpDecision,
    RetryableError,
    counted,
)

logger = logging.getLogger(__name__)

DEFAULT_BASE_URL = "https://api.openai.com/v1"
RETRY_STATUSES = frozenset({429, 500, 502, 503, 504})
EMBED_BATCH = 64

TEMPLATES = {
    "extract_graph": "graph_extraction.txt",
    "extract_flat": "flat_extraction.txt",
    "prejudge": "prejudge.txt",
    "decide_mem_op": "mem_update.txt",
    "answer_direct": "answer_direct.txt",
    "answer_chain_of_note": "answer_chain_of_note.txt",
    "summarize": "summarize.txt",
    "judge_link": "link_judge.txt",
    "judge_answer": "judge_answer.txt",
}


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return resources.files("dialogmem.backends").joinpath("prompts", name).read_text(encoding="utf-8")


def render(template: str, **slots) -> str:
    """Fill ``{name}`` slots; other braces in the template are left alone."""
    for name, value in slots.items():
        template = template.replace("{" + name + "}", str(value))
    return template


def _json_object(reply: str) -> dict:
    start, end = reply.find("{"), reply.rfind("}")
    if start < 0 or end <= start:
        raise ValueError("no JSON object in reply")
    return json.loads(reply[start : end + 1])


def _yes(reply: str) -> bool:
    words = re.findall(r"[a-z]+", reply.lower())
    return bool(words) and words[0] in ("yes", "keep", "true")


class RemoteBackend(Backend):
    """Talks to ``/chat/completions`` and ``/embeddings``.

    Transport errors and 429/5xx responses are retried with exponential backoff and
    jitter; other 4xx responses fail immediately.
    """

    name = "openai-compatible"

    def __init__(
        self,
        chat_model: str = "gpt-4o-mini",
        embedding_model: str = "text-embedding-3-small",
        dimension: int = 1536,
        base_url: str | None = None,
        api_key: str | None = None,
        max_parallel: int = 16,
        max_attempts: int = 3,
        backoff: float = 0.5,
        timeout: float = 120.0,
        temperature: float = 0.0,
        transport: httpx.BaseTransport | None = None,
        sleep=time.sleep,
    ):
        super().__init__()
        self.model = chat_model
        self.embedding_model = embedding_model
        self.embedder = EmbedderSpec(embedding_model, dimension, EmbedderKind.REMOTE)
        self.base_url = (base_url or os.environ.get("OPENAI_BASE_URL") or DEFAULT_BASE_URL).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("OPENAI_API_KEY", "")
        self.max_parallel = max_parallel
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.temperature = temperature
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        self._client = httpx.Client(base_url=self.base_url, headers=headers, timeout=timeout, transport=transport)

    @classmethod
    def from_env(cls, **overrides) -> "RemoteBackend":
        env = os.environ
        kwargs = {
            "chat_model": env.get("DIALOGMEM_CHAT_MODEL", "gpt-4o-mini"),
            "embedding_model": env.get("DIALOGMEM_EMBEDDING_MODEL", "text-embedding-3-small"),
            "dimension": int(env.get("DIALOGMEM_EMBEDDING_DIM", "1536")),
        }
        kwargs.update(overrides)
        return cls(**kwargs)

    def template_version(self, op: str) -> str:
        if op == "generate_answer":
            blob = load_template(TEMPLATES["answer_direct"]) + load_template(TEMPLATES["answer_chain_of_note"])
        elif op in TEMPLATES:
            blob = load_template(TEMPLATES[op])
        else:
            blob = ""
        return f"{self.model}:{self.temperature}:{hashlib.sha256(blob.encode()).hexdigest()[:12]}"

    # transport ------------------------------------------------------------

    def _post(self, path: str, payload: dict) -> dict:
        last_status = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self._client.post(path, json=payload)
            except httpx.TransportError as exc:
                err = RetryableError(f"transport error on {path}: {exc}", None, attempt)
            else:
                if resp.status_code < 400:
                    return resp.json()
                last_status = resp.status_code
                if resp.status_code not in RETRY_STATUSES:
                    raise BackendError(f"{path} returned {resp.status_code}: {resp.text[:200]}", resp.status_code, attempt)
                err = RetryableError(f"{path} returned {resp.status_code}", resp.status_code, attempt)
            if attempt == self.max_attempts:
                raise BackendError(f"{path} failed after {attempt} attempts: {err}", last_status, attempt) from err
            delay = self.backoff * 2 ** (attempt - 1)
            self._sleep(delay + random.uniform(0, delay / 2))
        raise AssertionError("unreachable")

    def chat(self, prompt: str) -> str:
        data = self._post(
            "/chat/completions",
            {"model": self.model, "messages": [{"role": "user", "content": prompt}], "temperature": self.temperature},
        )
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat response: {exc}") from exc

    def _embed_batch(self, texts: list[str]) -> np.ndarray:
        data = self._post("/embeddings", {"model": self.embedding_model, "input": texts})
        rows = sorted(data["data"], key=lambda r: r["index"])
        out = np.zeros((len(texts), self.dimension))
        for i, row in enumerate(rows):
            vec = np.asarray(row["embedding"], dtype=np.float64)
            if vec.shape != (self.dimension,):
                raise BackendError(f"embedding has dimension {vec.size}, expected {self.dimension}")
            norm = np.linalg.norm(vec)
            out[i] = vec / norm if norm > 0 and np.all(np.isfinite(vec)) else reserved_vector(self.dimension)
        return out

    # primitives -----------------------------------------------------------

    @counted("embed")
    def _embed(self, texts: list[str]) -> np.ndarray:
        # Endpoints reject empty strings; degenerate texts get the reserved vector locally.
        out = np.zeros((len(texts), self.dimension))
        live = [i for i, t in enumerate(texts) if t.strip()]
        for i in set(range(len(texts))) - set(live):
            out[i] = reserved_vector(self.dimension)
        batches = [live[i : i + EMBED_BATCH] for i in range(0, len(live), EMBED_BATCH)]
        with ThreadPoolExecutor(max_workers=max(1, min(self.max_parallel, len(batches) or 1))) as pool:
            results = list(pool.map(lambda b: self._embed_batch([texts[i] for i in b]), batches))
        for batch, vecs in zip(batches, results):
            out[batch] = vecs
        return out

    @counted("extract_flat")
    def _extract_flat(self, session: Session) -> FlatExtraction:
        prompt = render(
            load_template(TEMPLATES["extract_flat"]),
            session_date=format_date(session.date),
            input_text=session.user_text,
        )
        reply = self.chat(prompt)
        try:
            return FlatExtraction.from_dict(_json_object(reply))
        except (ValueError, TypeError) as exc:
            raise ExtractionError(f"unparseable flat extraction: {exc}", reply) from exc

    @counted("extract_graph")
    def _extract_graph(self, session: Session, dialogue_time: dt.date) -> str:
        prompt = render(
            load_template(TEMPLATES["extract_graph"]),
            dialogue_time=format_date(dialogue_time),
            input_text=session.user_text,
        )
        return self.chat(prompt)

    @counted("prejudge")
    def _prejudge(self, chunk: str) -> bool:
        return _yes(self.chat(render(load_template(TEMPLATES["prejudge"]), input_text=chunk)))

    @counted("decide_mem_op")
    def _decide_mem_op(self, new_fact: str, candidates: list[tuple[str, str]]) -> MemOpDecision:
        listing = "\n".join(f"[{key_id}] {text}" for key_id, text in candidates)
        reply = self.chat(render(load_template(TEMPLATES["decide_mem_op"]), new_fact=new_fact, candidates=listing))
        obj = _json_object(reply)
        op = str(obj.get("op", "")).lower()
        target = obj.get("target") or None
        text = obj.get("text") or None
        if op in ("add", "noop"):
            target, text = None, None
        return MemOpDecision(op, target, text, str(obj.get("reason", "")))

    @counted("generate_answer")
    def _generate_answer(self, question: Query, contexts: list[str], mode: AnswerMode) -> str:
        if mode is AnswerMode.CHAIN_OF_NOTE:
            template = load_template(TEMPLATES["answer_chain_of_note"])
            context = "\n".join(json.dumps({"record": i + 1, "content": c}, ensure_ascii=False) for i, c in enumerate(contexts))
        else:
            template = load_template(TEMPLATES["answer_direct"])
            context = "\n\n".join(contexts)
        date = format_date(question.query_date) if question.query_date else "unknown"
        return self.chat(render(template, context=context, question=question.text, question_date=date))

    @counted("summarize")
    def _summarize(self, texts: list[str], limit: int) -> str:
        reply = self.chat(render(load_template(TEMPLATES["summarize"]), descriptions="\n".join(texts), limit=limit))
        return reply.strip()[:limit]

    @counted("judge_link")
    def _judge_link(self, text_a: str, text_b: str) -> bool:
        return _yes(self.chat(render(load_template(TEMPLATES["judge_link"]), a=text_a, b=text_b)))

    def judge_answer(self, question: str, gold: str, answer: str) -> bool:
        reply = self.chat(render(load_template(TEMPLATES["judge_answer"]), question=question, gold=gold, answer=answer))
        return _yes(reply)

    def close(self) -> None:
        self._client.close()


def require_credentials() -> None:
    if not os.environ.get("OPENAI_API_KEY"):
        raise InputError("OPENAI_API_KEY is not set")
