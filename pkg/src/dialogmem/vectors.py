"""Exact cosine top-k over a growable table of unit vectors."""

from __future__ import annotations

from pathlib import Path

import numpy as np

# Scores equal to this many decimals count as ties, so the tie rule does not depend on
# the summation order of the underlying dot product.
TIE_DECIMALS = 12


def as_f32_grid(vec) -> np.ndarray:
    """Round to float32 precision (the on-disk format) but keep float64 for scoring."""
    return np.asarray(vec, dtype=np.float32).astype(np.float64)


class VectorTable:
    """Rows keyed by string id, each with a creation sequence number.

    Ranking is by score descending, then creation order ascending, then id. Rows can be
    updated in place (keeping their position and creation number) or removed.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self._mat = np.zeros((16, dim), dtype=np.float64)
        self._created = np.zeros(16, dtype=np.int64)
        self._live = np.zeros(16, dtype=bool)
        self._searchable = np.zeros(16, dtype=bool)
        self._ids: list[str | None] = []
        self._row: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._row)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._row

    def _grow(self) -> None:
        cap = self._mat.shape[0] * 2
        for name in ("_mat", "_created", "_live", "_searchable"):
            old = getattr(self, name)
            new = np.zeros((cap,) + old.shape[1:], dtype=old.dtype)
            new[: old.shape[0]] = old
            setattr(self, name, new)

    def upsert(self, item_id: str, vec, created: int, searchable: bool = True) -> None:
        vec = as_f32_grid(vec)
        if vec.shape != (self.dim,):
            raise ValueError(f"vector has shape {vec.shape}, expected ({self.dim},)")
        row = self._row.get(item_id)
        if row is None:
            row = len(self._ids)
            if row >= self._mat.shape[0]:
                self._grow()
            self._ids.append(item_id)
            self._row[item_id] = row
            self._created[row] = created
            self._live[row] = True
        self._mat[row] = vec
        self._searchable[row] = searchable

    def remove(self, item_id: str) -> None:
        row = self._row.pop(item_id)
        self._ids[row] = None
        self._live[row] = False
        self._searchable[row] = False

    def vector(self, item_id: str) -> np.ndarray:
        return self._mat[self._row[item_id]].copy()

    def ids(self) -> list[str]:
        return [i for i in self._ids if i is not None]

    def matrix(self) -> np.ndarray:
        rows = [self._row[i] for i in self.ids()]
        return self._mat[rows].copy()

    def scores(self, qvec) -> dict[str, float]:
        n = len(self._ids)
        s = self._mat[:n] @ np.asarray(qvec, dtype=np.float64)
        return {i: float(s[r]) for r, i in enumerate(self._ids) if i is not None}

    def top_k(self, qvec, k: int, allowed: set[str] | None = None) -> list[tuple[str, float]]:
        if k <= 0:
            raise ValueError("k must be positive")
        n = len(self._ids)
        if n == 0:
            return []
        mask = self._searchable[:n].copy()
        if allowed is not None:
            mask &= np.fromiter((i in allowed if i is not None else False for i in self._ids), bool, n)
        rows = np.flatnonzero(mask)
        if rows.size == 0:
            return []
        scores = self._mat[rows] @ np.asarray(qvec, dtype=np.float64)
        tied = np.round(scores, TIE_DECIMALS)
        if rows.size > k:
            kth = np.partition(tied, rows.size - k)[rows.size - k]
            keep = tied >= kth
            rows, scores, tied = rows[keep], scores[keep], tied[keep]
        order = np.lexsort((self._created[rows], -tied))[:k]
        return [(self._ids[rows[j]], float(scores[j])) for j in order]

    # persistence ----------------------------------------------------------

    def save_matrix(self, path: Path, order: list[str]) -> None:
        rows = [self._row[i] for i in order]
        mat = self._mat[rows] if rows else np.zeros((0, self.dim))
        path.write_bytes(mat.astype("<f4").tobytes())


def load_matrix(path: Path, dim: int) -> np.ndarray:
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    return data.reshape(-1, dim).astype(np.float64)
