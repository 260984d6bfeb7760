"""Pool scoring against a reference set and the subset samplers."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .representations import CorpusStats, bm25_matrix, cosine_matrix

EPS = 1e-9


class Strategy(str, Enum):
    TOPK = "TopK"
    BOTTOMK = "BottomK"
    TOPBOTTOMK = "TopBottomK"
    WEIGHTED = "Weighted"
    KNN_WEIGHTED = "KnnWeighted"
    DIVERSE_WEIGHTED = "DiverseWeighted"
    RANDOM = "Random"


@dataclass
class ScoredPool:
    chunk_ids: list
    scores: np.ndarray
    reps: object = None  # dense [n, dim] matrix or list of bags

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(set(map(tuple, self.chunk_ids))) != len(self.chunk_ids):
            raise ValueError("duplicate chunk ids in pool")
        if self.scores.shape != (len(self.chunk_ids),):
            raise ValueError("scores not aligned with chunk ids")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("non-finite pool scores")

    @property
    def n(self) -> int:
        return len(self.chunk_ids)

    def ids(self, idx) -> list:
        return [self.chunk_ids[i] for i in idx]


@dataclass
class SelectionPlan:
    strategy: Strategy
    budget: int | float
    top_fraction: float = 0.5
    clusters: int = 10
    batch: int = 128
    seed: int = 0

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if not 0.0 <= self.top_fraction <= 1.0:
            raise ValueError("top_fraction must lie in [0, 1]")

    def resolve_budget(self, n: int) -> int:
        """Integer budget; a float in (0, 1] is a fraction of the pool."""
        b = self.budget
        k = int(math.floor(b * n + 0.5)) if isinstance(b, float) and b <= 1.0 else int(b)
        if not 0 <= k <= n:
            raise ValueError(f"budget {k} outside [0, {n}]")
        return k


def _row_sums(M: np.ndarray) -> np.ndarray:
    # order-free reduction so a permuted reference set gives identical bits
    return np.array([math.fsum(row) for row in M])


def score_pool(pool_reps, ref_reps, sim: str = "cosine", chunk_ids=None, corpus=None) -> ScoredPool:
    """Mean similarity of each pool element to every reference element.

    ``sim`` is ``"bm25"`` for token bags (pool element as query, reference as
    document) and ``"cosine"`` for dense vectors.  ``corpus`` defaults to the
    pool plus the reference set.
    """
    if len(ref_reps) == 0:
        raise ValueError("empty reference set")
    dense_pool = isinstance(pool_reps, np.ndarray)
    dense_ref = isinstance(ref_reps, np.ndarray)
    if sim == "bm25":
        if dense_pool or dense_ref:
            raise TypeError("bm25 needs token-bag representations")
        stats = corpus or CorpusStats.build(list(pool_reps) + list(ref_reps))
        M = bm25_matrix(list(pool_reps), list(ref_reps), stats)
    elif sim == "cosine":
        if not (dense_pool and dense_ref):
            raise TypeError("cosine needs dense representations")
        M = cosine_matrix(pool_reps, ref_reps)
    else:
        raise ValueError(f"unknown similarity {sim!r}")
    scores = _row_sums(M) / len(ref_reps)
    if chunk_ids is None:
        chunk_ids = [(i,) for i in range(len(scores))]
    return ScoredPool(list(chunk_ids), scores, pool_reps)


# -- samplers: each returns pool indices in selection order -------------------------


def _order_key(pool: ScoredPool):
    # rank position of each index under chunk-id order, for tie-breaking
    order = sorted(range(pool.n), key=lambda i: tuple(pool.chunk_ids[i]))
    pos = np.empty(pool.n, dtype=np.int64)
    pos[order] = np.arange(pool.n)
    return pos


def sample_topk(pool: ScoredPool, K: int, mode: str = "top", top_fraction: float = 0.5) -> list[int]:
    n = pool.n
    if not 0 <= K <= n:
        raise ValueError(f"K={K} outside [0, {n}]")
    pos = _order_key(pool)
    desc = np.lexsort((pos, -pool.scores))
    asc = np.lexsort((pos, pool.scores))
    if mode == "top":
        return desc[:K].tolist()
    if mode == "bottom":
        return asc[:K].tolist()
    if mode != "both":
        raise ValueError(f"unknown mode {mode!r}")
    n_top = math.ceil(top_fraction * K)
    top = desc[:n_top].tolist()
    taken = set(top)
    bottom = [i for i in asc[: K - n_top].tolist()]
    if taken.intersection(bottom):
        raise ValueError("top and bottom ranges overlap")
    return top + bottom


def _shifted(scores: np.ndarray) -> np.ndarray:
    return scores - scores.min() + EPS


def _weighted_draw(rng: np.random.Generator, weights: np.ndarray, K: int) -> np.ndarray:
    # exponential-race keys: taking the K largest log(u)/w is equivalent to
    # K successive draws without replacement proportional to the weights
    u = rng.random(len(weights))
    keys = np.log(u) / weights
    return np.argsort(-keys, kind="stable")[:K]


def sample_weighted(pool: ScoredPool, K: int, seed=None, rng: np.random.Generator | None = None) -> list[int]:
    if not 0 <= K <= pool.n:
        raise ValueError(f"K={K} outside [0, {pool.n}]")
    rng = rng if rng is not None else np.random.default_rng(seed)
    if K == 0:
        return []
    return _weighted_draw(rng, _shifted(pool.scores), K).tolist()


def kmeans(X: np.ndarray, C: int, seed: int, iters: int = 50) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns cluster labels."""
    rng = np.random.default_rng(seed)
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, C):
        total = d2.sum()
        i = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centers.append(X[i])
        d2 = np.minimum(d2, ((X - X[i]) ** 2).sum(axis=1))
    centers = np.array(centers)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dist = ((X[:, None, :] - centers[None]) ** 2).sum(axis=-1)
        new = dist.argmin(axis=1)
        if _ and np.array_equal(new, labels):
            break
        labels = new
        for c in range(C):
            members = X[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return labels


def sample_knn_weighted(pool: ScoredPool, K: int, C: int, seed: int = 0) -> list[int]:
    if not isinstance(pool.reps, np.ndarray):
        raise TypeError("clustering needs dense representations")
    n = pool.n
    if C > n:
        raise ValueError(f"C={C} exceeds pool size {n}")
    if not 1 <= C <= K <= n:
        raise ValueError("need 1 <= C <= K <= n")
    rng = np.random.default_rng(seed)
    labels = kmeans(pool.reps, C, seed=seed + 7919) if C > 1 else np.zeros(n, dtype=np.int64)
    sizes = np.bincount(labels, minlength=C)
    quota = np.full(C, K // C)
    # remainder goes to the largest clusters (smaller label on ties)
    quota[np.lexsort((np.arange(C), -sizes))[: K % C]] += 1
    chosen: list[int] = []
    for c in range(C):
        members = np.flatnonzero(labels == c)
        q = int(min(quota[c], len(members)))
        if q == len(members):
            chosen.extend(members.tolist())
        elif q:
            picks = _weighted_draw(rng, _shifted(pool.scores[members]), q)
            chosen.extend(members[picks].tolist())
    deficit = K - len(chosen)
    if deficit:
        rest = np.setdiff1d(np.arange(n), chosen)
        picks = _weighted_draw(rng, _shifted(pool.scores[rest]), deficit)
        chosen.extend(rest[picks].tolist())
    return chosen


def redundancy_update(scores: np.ndarray, reps: np.ndarray, batch_reps: np.ndarray) -> np.ndarray:
    """``s(x) - mean_{x' in batch} cos(x, x')`` for each remaining candidate."""
    return scores - cosine_matrix(reps, batch_reps).mean(axis=1)


def sample_diverse_weighted(pool: ScoredPool, K: int, batch: int = 128, seed: int = 0,
                            sim: str = "cosine") -> list[int]:
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if not 0 <= K <= pool.n:
        raise ValueError(f"K={K} outside [0, {pool.n}]")
    if not isinstance(pool.reps, np.ndarray):
        raise TypeError("diverse sampling needs dense representations")
    if sim != "cosine":
        raise ValueError("only cosine redundancy is supported")
    rng = np.random.default_rng(seed)
    scores = pool.scores.copy()
    remaining = np.arange(pool.n)
    chosen: list[int] = []
    while len(chosen) < K:
        b = min(batch, K - len(chosen))
        picks = _weighted_draw(rng, _shifted(scores[remaining]), b)
        Bt = remaining[picks]
        chosen.extend(Bt.tolist())
        remaining = np.delete(remaining, picks)
        if len(remaining) == 0 or len(chosen) >= K:
            break
        scores[remaining] = redundancy_update(scores[remaining], pool.reps[remaining], pool.reps[Bt])
    return chosen


def sample_random(pool_or_n, K: int, seed=None, rng: np.random.Generator | None = None) -> list[int]:
    n = pool_or_n.n if isinstance(pool_or_n, ScoredPool) else int(pool_or_n)
    if not 0 <= K <= n:
        raise ValueError(f"K={K} outside [0, {n}]")
    rng = rng if rng is not None else np.random.default_rng(seed)
    return rng.choice(n, size=K, replace=False).tolist()


def select(pool: ScoredPool, plan: SelectionPlan) -> list[int]:
    """Dispatch ``plan`` over ``pool``; returns indices into the pool."""
    K = plan.resolve_budget(pool.n)
    s = plan.strategy
    if s is Strategy.TOPK:
        return sample_topk(pool, K, "top")
    if s is Strategy.BOTTOMK:
        return sample_topk(pool, K, "bottom")
    if s is Strategy.TOPBOTTOMK:
        return sample_topk(pool, K, "both", plan.top_fraction)
    if s is Strategy.WEIGHTED:
        return sample_weighted(pool, K, plan.seed)
    if s is Strategy.KNN_WEIGHTED:
        return sample_knn_weighted(pool, K, min(plan.clusters, K) if K else 1, plan.seed) if K else []
    if s is Strategy.DIVERSE_WEIGHTED:
        return sample_diverse_weighted(pool, K, plan.batch, plan.seed)
    return sample_random(pool, K, plan.seed)


@dataclass
class SelectionManifest:
    strategy: str
    params: dict
    seed: int
    selected: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "params": self.params, "seed": self.seed,
                "selected": [list(c) for c in self.selected]}

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "SelectionManifest":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d["strategy"], d["params"], d["seed"], [tuple(c) for c in d["selected"]])
