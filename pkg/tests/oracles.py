"""Independent reference implementations used as test oracles.

Nothing here imports the package's ranking or metric code; each oracle recomputes
its answer from first principles with plain Python so agreement is meaningful.
"""

from __future__ import annotations

import hashlib
import math
import re
import struct

# Scores agreeing to this many decimals are ties (mirrors the documented tie rule).
TIE_DECIMALS = 12


def f32(x: float) -> float:
    """Round a Python float through IEEE single precision."""
    return struct.unpack("<f", struct.pack("<f", x))[0]


def dot(a, b) -> float:
    return math.fsum(x * y for x, y in zip(a, b))


def brute_force_topk(items, q, k, allowed=None):
    """items: iterable of (item_id, vector, created). Returns [(id, score)].

    A vector may also be a mapping {position: value} listing its nonzero entries.

    Vectors are rounded through float32 first (the storage format), scores are exact
    sums, ordering is score desc, then created asc, then id asc.
    """
    rows = []
    for item_id, vec, created in items:
        if allowed is not None and item_id not in allowed:
            continue
        if hasattr(vec, "items"):
            s = math.fsum(f32(float(v)) * float(q[i]) for i, v in vec.items())
        else:
            s = dot([f32(float(v)) for v in vec], [float(x) for x in q])
        rows.append((round(s, TIE_DECIMALS), created, item_id, s))
    rows.sort(key=lambda r: (-r[0], r[1], r[2]))
    return [(r[2], r[3]) for r in rows[:k]]


_TOKEN = re.compile(r"[a-z0-9]+")


def token_hash_embedding(text: str, dim: int) -> dict[int, float]:
    """Sparse signed-hash bag of tokens, unnormalized: bucket -> weight."""
    out: dict[int, float] = {}
    for tok in _TOKEN.findall(text.lower()):
        h = int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8).digest(), "little")
        sign = -1.0 if h >> 63 else 1.0
        out[h % dim] = out.get(h % dim, 0.0) + sign
    return out


def token_hash_cosine(a: str, b: str, dim: int) -> float:
    """Cosine of two texts under signed feature hashing, via scalar products of sparse maps."""
    va, vb = token_hash_embedding(a, dim), token_hash_embedding(b, dim)
    na = math.sqrt(math.fsum(v * v for v in va.values()))
    nb = math.sqrt(math.fsum(v * v for v in vb.values()))
    if na == 0 or nb == 0:
        return float("nan")
    return math.fsum(va[i] * vb.get(i, 0.0) for i in va) / (na * nb)


def set_recall(retrieved, gt, k) -> float:
    top = set(retrieved[:k])
    return sum(1 for g in set(gt) if g in top) / len(set(gt))


def dcg_ndcg(retrieved, gt, k) -> float:
    """Binary NDCG computed by building the gain vector explicitly."""
    gt = set(gt)
    gains, seen = [], set()
    for item in retrieved[:k]:
        gains.append(1 if item in gt and item not in seen else 0)
        seen.add(item)
    dcg = sum(g / math.log(i + 2, 2) for i, g in enumerate(gains))
    ideal_gains = [1] * min(len(gt), k)
    idcg = sum(g / math.log(i + 2, 2) for i, g in enumerate(ideal_gains))
    return dcg / idcg


def group_max(ranked, owner, n):
    """Values ordered by their best key score; ties keep first-seen order."""
    best: dict[str, float] = {}
    order: list[str] = []
    for key_id, score in ranked:
        for v in owner[key_id]:
            if v not in best:
                best[v] = score
                order.append(v)
            else:
                best[v] = max(best[v], score)
    positions = {v: i for i, v in enumerate(order)}
    return sorted(order, key=lambda v: (-best[v], positions[v]))[:n]


def bfs_one_hop(adjacency, strengths, cos, seeds, budget):
    """adjacency: node -> set(neighbours); strengths: frozenset({a, b}) -> int."""
    frontier: dict[str, int] = {}
    for s in seeds:
        for nb in adjacency.get(s, ()):
            if nb in seeds:
                continue
            w = strengths[frozenset((s, nb))]
            frontier[nb] = max(frontier.get(nb, 0), w)
    ranked = sorted(frontier, key=lambda n: (-frontier[n], -cos[n], n))
    return ranked[:budget]
