"""HSTU parameter container, vocabulary growth and checkpoint I/O."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .stream import INTERACTION_TYPE, REASON_END

TIME_BUCKETS = 32

_ITEM_EMB, _ITEM_HEAD, _USER_EMB = 1, 2, 3


@dataclass
class HstuHyper:
    d: int = 32
    depth: int = 2
    max_len: int = 100
    num_reason: int = len(REASON_END)
    num_itype: int = len(INTERACTION_TYPE)
    tie_item_head: bool = False
    residual: bool = True
    ln_eps: float = 1e-5
    init_std: float = 0.02
    action_weight: float = 1.0

    @property
    def num_actions(self) -> int:
        return self.num_reason * self.num_itype


@dataclass
class SequenceChunk:
    """A contiguous slice of one user's history.

    ``chunk_id`` is ``(user, start, stop)`` in that user's lifetime event
    index, so a partial chunk and its later completion are distinct chunks.
    """

    user: int
    items: np.ndarray
    reasons: np.ndarray
    itypes: np.ndarray
    timestamps: np.ndarray
    source_interval: int = 0
    chunk_id: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64)
        self.reasons = np.asarray(self.reasons, dtype=np.int64)
        self.itypes = np.asarray(self.itypes, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        n = len(self.items)
        if not (len(self.reasons) == len(self.itypes) == len(self.timestamps) == n):
            raise ValueError("chunk field lengths differ")
        if n < 1:
            raise ValueError("chunk needs at least one event")
        if n > 1 and np.any(np.diff(self.timestamps) < 0):
            raise ValueError("chunk events are not time-ordered")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def last_timestamp(self) -> int:
        return int(self.timestamps[-1])


def _row_normal(seed: int, table: int, rows: range, width: int, std: float) -> np.ndarray:
    # Each row has its own stream so growing a table reproduces the rows a
    # larger initial table would have had.
    out = np.empty((len(rows), width))
    for k, r in enumerate(rows):
        out[k] = std * np.random.default_rng([seed, table, r]).standard_normal(width)
    return out


@dataclass
class HstuModel:
    hyper: HstuHyper
    params: dict[str, np.ndarray]
    seed: int = 0
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def init(cls, hyper: HstuHyper, vocab: int, num_users: int, seed: int = 0) -> "HstuModel":
        d, std = hyper.d, hyper.init_std
        rng = np.random.default_rng([seed, 0])
        p: dict[str, np.ndarray] = {
            "item_emb": _row_normal(seed, _ITEM_EMB, range(vocab), d, std),
            "user_emb": _row_normal(seed, _USER_EMB, range(num_users), d, std),
            "reason_emb": std * rng.standard_normal((hyper.num_reason, d)),
            "itype_emb": std * rng.standard_normal((hyper.num_itype, d)),
        }
        for l in range(hyper.depth):
            p[f"blocks.{l}.w1"] = rng.standard_normal((d, 4 * d)) / np.sqrt(d)
            p[f"blocks.{l}.b1"] = np.zeros(4 * d)
            p[f"blocks.{l}.rab_pos"] = np.zeros(hyper.max_len + 1)
            p[f"blocks.{l}.rab_time"] = np.zeros(TIME_BUCKETS)
            p[f"blocks.{l}.ln_g"] = np.ones(d)
            p[f"blocks.{l}.ln_b"] = np.zeros(d)
            p[f"blocks.{l}.w2"] = rng.standard_normal((d, d)) / np.sqrt(d)
            p[f"blocks.{l}.b2"] = np.zeros(d)
        p["final_ln_g"] = np.ones(d)
        p["final_ln_b"] = np.zeros(d)
        if not hyper.tie_item_head:
            p["item_head"] = _row_normal(seed, _ITEM_HEAD, range(vocab), d, std).T.copy()
        p["action_head"] = std * rng.standard_normal((d, hyper.num_actions))
        return cls(hyper, p, seed)

    @property
    def vocab(self) -> int:
        return self.params["item_emb"].shape[0]

    @property
    def num_users(self) -> int:
        return self.params["user_emb"].shape[0]

    def item_head(self) -> np.ndarray:
        """Item output matrix ``[d, vocab]``."""
        if self.hyper.tie_item_head:
            return self.params["item_emb"].T
        return self.params["item_head"]

    def copy(self) -> "HstuModel":
        return HstuModel(self.hyper, {k: v.copy() for k, v in self.params.items()}, self.seed,
                         json.loads(json.dumps(self.rng_state)))

    def grow(self, vocab: int | None = None, num_users: int | None = None) -> "HstuModel":
        """Append freshly initialised item / user rows in place."""
        d, std, p = self.hyper.d, self.hyper.init_std, self.params
        if vocab is not None and vocab > self.vocab:
            new = range(self.vocab, vocab)
            p["item_emb"] = np.vstack([p["item_emb"], _row_normal(self.seed, _ITEM_EMB, new, d, std)])
            if not self.hyper.tie_item_head:
                p["item_head"] = np.hstack([p["item_head"], _row_normal(self.seed, _ITEM_HEAD, new, d, std).T])
        if num_users is not None and num_users > self.num_users:
            new = range(self.num_users, num_users)
            p["user_emb"] = np.vstack([p["user_emb"], _row_normal(self.seed, _USER_EMB, new, d, std)])
        return self

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params.values())

    # -- checkpoints ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        meta = {"hyper": asdict(self.hyper), "seed": self.seed, "rng_state": self.rng_state,
                "names": sorted(self.params)}
        arrays = {f"param::{k}": v for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                     **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "HstuModel":
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            params = {k[len("param::"):]: z[k].copy() for k in z.files if k.startswith("param::")}
        return cls(HstuHyper(**meta["hyper"]), params, meta["seed"], meta["rng_state"])
