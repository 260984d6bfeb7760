"""Chunk representations for selection scoring.

Three extractors: a bag of item/action tokens (compared with Okapi BM25),
mean-pooled final-layer hidden states, and the mean-pooled gradient of the
final-item loss with respect to the last block's input projection.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import sparse

from . import nn
from .model import HstuModel, SequenceChunk


class ReprKind(str, Enum):
    TOKEN_BAG = "TokenBag"
    REPSIM = "RepSim"
    GRADSIM = "GradSim"


@dataclass
class ReprVector:
    kind: ReprKind
    dense: np.ndarray | None = None
    bag: Counter | None = None

    @property
    def dim(self) -> int:
        return len(self.bag) if self.kind is ReprKind.TOKEN_BAG else int(self.dense.shape[0])


def token_repr(chunk: SequenceChunk) -> Counter:
    bag = Counter()
    for o, r, u in zip(chunk.items.tolist(), chunk.reasons.tolist(), chunk.itypes.tolist()):
        bag[f"item:{o}"] += 1
        bag[f"reason_end:{r}"] += 1
        bag[f"interaction_type:{u}"] += 1
    return bag


@dataclass
class CorpusStats:
    n_docs: int
    avgdl: float
    df: dict[str, int]

    @classmethod
    def build(cls, bags: Iterable[Counter]) -> "CorpusStats":
        bags = list(bags)
        if not bags:
            raise ValueError("BM25 needs a non-empty corpus")
        df = Counter()
        total = 0
        for bag in bags:
            df.update(bag.keys())
            total += sum(bag.values())
        return cls(len(bags), total / len(bags), dict(df))

    def idf(self, term: str) -> float:
        n = self.df.get(term, 0)
        return math.log(1.0 + (self.n_docs - n + 0.5) / (n + 0.5))


def bm25_sim(query: Counter, doc: Counter, stats: CorpusStats, k1: float = 1.2, b: float = 0.75) -> float:
    """Okapi BM25 of ``doc`` for the distinct terms of ``query``."""
    if stats.n_docs == 0:
        raise ValueError("empty corpus")
    dl = sum(doc.values())
    norm = k1 * (1.0 - b + b * dl / stats.avgdl)
    score = 0.0
    for term in query:
        tf = doc.get(term, 0)
        if tf:
            score += stats.idf(term) * tf * (k1 + 1.0) / (tf + norm)
    return score


def bm25_matrix(queries: list[Counter], docs: list[Counter], stats: CorpusStats,
                k1: float = 1.2, b: float = 0.75) -> np.ndarray:
    """``out[i, j] = bm25_sim(queries[i], docs[j])`` via sparse products."""
    vocab: dict[str, int] = {}
    for bag in docs:
        for t in bag:
            vocab.setdefault(t, len(vocab))
    rows, cols, vals = [], [], []
    for j, bag in enumerate(docs):
        norm = k1 * (1.0 - b + b * sum(bag.values()) / stats.avgdl)
        for t, tf in bag.items():
            rows.append(vocab[t])
            cols.append(j)
            vals.append(stats.idf(t) * tf * (k1 + 1.0) / (tf + norm))
    W = sparse.csr_matrix((vals, (rows, cols)), shape=(len(vocab), len(docs)))
    qr, qc = [], []
    for i, bag in enumerate(queries):
        for t in bag:
            if t in vocab:
                qr.append(i)
                qc.append(vocab[t])
    Qm = sparse.csr_matrix((np.ones(len(qr)), (qr, qc)), shape=(len(queries), len(vocab)))
    return np.asarray((Qm @ W).todense())


def cosine_sim(a, b) -> float:
    a = a.dense if isinstance(a, ReprVector) else np.asarray(a, dtype=np.float64)
    b = b.dense if isinstance(b, ReprVector) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip(np.dot(a / na, b / nb), -1.0, 1.0))


def unit_rows(X: np.ndarray) -> np.ndarray:
    """Row-normalise; rows with norm below 1e-12 become zero."""
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return np.where(norms < 1e-12, 0.0, X / np.where(norms < 1e-12, 1.0, norms))


def cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise cosine; each entry is reduced independently of its position."""
    if A.shape[1] != B.shape[1]:
        raise ValueError("dimension mismatch")
    An, Bn = unit_rows(A), unit_rows(B)
    out = np.empty((len(An), len(Bn)))
    step = max(1, 2_000_000 // max(1, len(Bn) * A.shape[1]))
    for lo in range(0, len(An), step):
        out[lo:lo + step] = (An[lo:lo + step, None, :] * Bn[None, :, :]).sum(axis=-1)
    return np.clip(out, -1.0, 1.0)


def _length_groups(chunks: list[SequenceChunk]):
    # equal-length groups avoid padding, so batched and single extraction
    # run identical arithmetic
    groups: dict[int, list[int]] = {}
    for i, c in enumerate(chunks):
        groups.setdefault(len(c), []).append(i)
    return groups


def repsim_matrix(chunks: list[SequenceChunk], model: HstuModel, batch_size: int = 64) -> np.ndarray:
    out = np.empty((len(chunks), model.hyper.d))
    for idx in _length_groups(chunks).values():
        for lo in range(0, len(idx), batch_size):
            part = idx[lo:lo + batch_size]
            st = nn.forward_batch(nn.make_batch([chunks[i] for i in part], model.hyper.max_len), model)
            out[part] = st.H.mean(axis=1)
    return out


def gradsim_matrix(chunks: list[SequenceChunk], model: HstuModel) -> np.ndarray:
    # one chunk per backward pass: batched backward reorders a few reductions
    # and the result would depend on batch composition
    out = np.empty((len(chunks), 4 * model.hyper.d))
    for i, c in enumerate(chunks):
        out[i] = nn.gradsim_vectors(nn.make_batch([c], model.hyper.max_len), model)[0]
    return out


def repsim_repr(chunk: SequenceChunk, model: HstuModel) -> ReprVector:
    return ReprVector(ReprKind.REPSIM, dense=repsim_matrix([chunk], model)[0])


def gradsim_repr(chunk: SequenceChunk, model: HstuModel) -> ReprVector:
    return ReprVector(ReprKind.GRADSIM, dense=gradsim_matrix([chunk], model)[0])


def extract(kind: ReprKind | str, chunks: list[SequenceChunk], model: HstuModel | None = None):
    """Representations for many chunks: a list of bags or a ``[n, dim]`` matrix."""
    kind = ReprKind(kind)
    if kind is ReprKind.TOKEN_BAG:
        return [token_repr(c) for c in chunks]
    if model is None:
        raise ValueError(f"{kind.value} needs a model")
    if kind is ReprKind.REPSIM:
        return repsim_matrix(chunks, model)
    return gradsim_matrix(chunks, model)


# -- dump format: one JSON record per chunk -------------------------------------


def dump_reprs(path: str | Path, kind: ReprKind | str, chunk_ids, reps) -> None:
    kind = ReprKind(kind)
    with open(path, "w", encoding="utf-8") as fh:
        for cid, rep in zip(chunk_ids, reps):
            if kind is ReprKind.TOKEN_BAG:
                values = dict(sorted(rep.items()))
                dim = len(values)
            else:
                values = [float(x) for x in rep]
                dim = len(values)
            fh.write(json.dumps({"chunk_id": list(cid), "kind": kind.value, "dim": dim, "values": values}) + "\n")


def load_reprs(path: str | Path):
    """Inverse of :func:`dump_reprs`; returns ``(kind, chunk_ids, reps)``."""
    ids, reps, kind = [], [], None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            k = ReprKind(rec["kind"])
            if kind is not None and k is not kind:
                raise ValueError("mixed representation kinds in one dump")
            kind = k
            ids.append(tuple(rec["chunk_id"]))
            reps.append(Counter(rec["values"]) if k is ReprKind.TOKEN_BAG else rec["values"])
    if kind is not None and kind is not ReprKind.TOKEN_BAG:
        reps = np.array(reps, dtype=np.float64)
    return kind, ids, reps
