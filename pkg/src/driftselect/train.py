"""Adam training loop and next-item ranking evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .flops import COUNTER
from .model import HstuModel, SequenceChunk


class TrainingDivergence(FloatingPointError):
    def __init__(self, epoch: int, step: int, detail: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}{': ' + detail if detail else ''}")
        self.epoch, self.step = epoch, step


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    negative_samples: int = 64
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.negative_samples < 1:
            raise ValueError("negative_samples must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        lr_t = c.learning_rate * math.sqrt(1 - c.beta2 ** self.t) / (1 - c.beta1 ** self.t)
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            params[k] -= lr_t * m / (np.sqrt(v) + c.eps)


def train(chunks: list[SequenceChunk], model: HstuModel, cfg: TrainConfig) -> tuple[HstuModel, list[float]]:
    """Train ``model`` in place; returns it with the per-epoch mean loss."""
    cfg.validate()
    if not chunks:
        raise ValueError("no training chunks")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(chunks))
        total, count = 0.0, 0
        for step, lo in enumerate(range(0, len(chunks), cfg.batch_size)):
            sel = [chunks[i] for i in order[lo:lo + cfg.batch_size]]
            batch = nn.make_batch(sel, model.hyper.max_len)
            try:
                value, grads = nn.loss_and_grad(batch, model, rng=rng, k=cfg.negative_samples)
            except FloatingPointError as exc:
                raise TrainingDivergence(epoch, step, str(exc)) from exc
            opt.step(model.params, grads)
            total += value.total * len(sel)
            count += len(sel)
        trace.append(total / count)
        if not model.all_finite():
            raise TrainingDivergence(epoch, step, "non-finite parameters")
    model.rng_state = rng.bit_generator.state
    return model, trace


# -- evaluation ----------------------------------------------------------------


def rank_of_target(scores: np.ndarray, target: int) -> int:
    """1-based rank in descending score order; ties go to the smaller item id."""
    t = scores[target]
    return int(np.count_nonzero(scores > t) + np.count_nonzero(scores[:target] == t) + 1)


def metrics_from_ranks(ranks, k_list=(10, 50)) -> dict[str, float]:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("empty evaluation set")
    out = {}
    for k in k_list:
        hit = ranks <= k
        out[f"ndcg@{k}"] = float(np.where(hit, 1.0 / np.log2(1.0 + ranks), 0.0).mean())
        out[f"hr@{k}"] = float(hit.mean())
    out["mrr"] = float((1.0 / ranks).mean())
    return out


def final_item_ranks(chunks: list[SequenceChunk], model: HstuModel, batch_size: int = 64) -> np.ndarray:
    """Rank of each chunk's last item given its prefix, over the whole vocabulary."""
    ranks = []
    Wi = model.item_head()
    for lo in range(0, len(chunks), batch_size):
        part = chunks[lo:lo + batch_size]
        batch = nn.make_batch(part, model.hyper.max_len)
        st = nn.forward_batch(batch, model)
        B = len(part)
        last = batch.lengths - 1
        # hidden state before the last event predicts it
        scores = st.H[np.arange(B), last] @ Wi
        COUNTER.add("fwd", B * model.hyper.d * model.vocab)
        tgt = batch.items[np.arange(B), last]
        ranks.extend(rank_of_target(scores[b], int(tgt[b])) for b in range(B))
    return np.array(ranks, dtype=np.int64)


def evaluate(chunks: list[SequenceChunk], model: HstuModel, k_list=(10, 50)) -> dict[str, float]:
    if not chunks:
        raise ValueError("empty evaluation set")
    if any(len(c) < 2 for c in chunks):
        raise ValueError("evaluation chunks need a prefix and a final target")
    out = metrics_from_ranks(final_item_ranks(chunks, model), k_list)
    out["count"] = len(chunks)
    return out
