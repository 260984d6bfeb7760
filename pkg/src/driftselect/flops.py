"""Operation counting and the analytic selection / training cost model.

One unit is one multiply-add (an addition in an embedding sum also counts
as one). The counter tallies what the model code actually executes; the
analytic model derives the same quantity from hyperparameters alone.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

SELECT_METHODS = ("random", "repsim", "gradsim")


class OpCounter:
    def __init__(self):
        self.enabled = False
        self.tally = {"fwd": 0, "bwd": 0}

    def add(self, phase: str, n: int) -> None:
        if self.enabled:
            self.tally[phase] = self.tally.get(phase, 0) + int(n)

    def reset(self) -> None:
        self.tally = {"fwd": 0, "bwd": 0}

    def merge(self, other: "OpCounter") -> None:
        for k, v in other.tally.items():
            self.tally[k] = self.tally.get(k, 0) + v


COUNTER = OpCounter()


@contextmanager
def count_ops():
    """Enable the global counter from zero; yields its tally dict."""
    prev_enabled, prev_tally = COUNTER.enabled, COUNTER.tally
    COUNTER.enabled = True
    COUNTER.reset()
    try:
        yield COUNTER.tally
    finally:
        COUNTER.enabled, COUNTER.tally = prev_enabled, prev_tally


def forward_cost(d: int, depth: int, length: int, negatives: int, num_actions: int) -> float:
    """Analytic multiply-adds of one training forward pass on ``length`` events."""
    n_pos = length + 1
    per_block = n_pos * d * 4 * d + 2 * n_pos * n_pos * d + n_pos * d + n_pos * d * d
    embed = 2 * length * d
    heads = length * (negatives + 1) * d + length * d * num_actions
    return float(embed + depth * per_block + heads)


@dataclass
class CostModel:
    f_fwd: float
    n: int
    r: int
    d_rep: int
    d_grad: int
    f_bwd: float | None = None
    epochs: int = 1

    def __post_init__(self):
        if self.f_bwd is None:
            self.f_bwd = 2.0 * self.f_fwd
        if self.f_fwd <= 0 or self.f_bwd <= 0 or self.d_rep <= 0 or self.d_grad <= 0:
            raise ValueError("cost model fields must be positive")
        if self.n < 0 or self.r < 0:
            raise ValueError("n and r must be non-negative")

    @classmethod
    def from_hyper(cls, hyper, n: int, r: int, negatives: int, epochs: int = 1,
                   length: int | None = None) -> "CostModel":
        L = hyper.max_len if length is None else length
        f = forward_cost(hyper.d, hyper.depth, L, negatives, hyper.num_actions)
        return cls(f, n, r, d_rep=hyper.d, d_grad=4 * hyper.d, epochs=epochs)


def _nlogn(n: int) -> float:
    return n * math.log2(n) if n > 1 else 0.0


def select_flops(method: str, cm: CostModel) -> float:
    method = method.lower()
    if method == "random":
        return 0.0
    if method == "repsim":
        return (cm.n + cm.r) * cm.f_fwd + cm.n * cm.r * cm.d_rep + _nlogn(cm.n)
    if method == "gradsim":
        return (cm.n + cm.r) * (cm.f_fwd + cm.f_bwd) + cm.n * cm.r * cm.d_grad + _nlogn(cm.n)
    raise ValueError(f"unknown selection method {method!r}")


def train_flops(k: float, cm: CostModel) -> float:
    if k < 0:
        raise ValueError("k must be >= 0")
    return k * cm.epochs * (cm.f_fwd + cm.f_bwd)


@dataclass
class FlopsReport:
    phases: dict[str, float] = field(default_factory=dict)

    def add(self, phase: str, value: float) -> None:
        self.phases[phase] = self.phases.get(phase, 0.0) + float(value)

    @property
    def total(self) -> float:
        return math.fsum(self.phases.values())

    def to_dict(self) -> dict:
        return {**{k: self.phases[k] for k in sorted(self.phases)}, "total": self.total}


def flops_table(n: int, r: int, k: int, cm_kwargs: dict) -> list[dict]:
    """Rows of method, n, r, select, train, total and ratio to RepSim selection."""
    cm = CostModel(n=n, r=r, **cm_kwargs)
    rep = select_flops("repsim", cm)
    rows = []
    for method in SELECT_METHODS:
        sel = select_flops(method, cm)
        tr = train_flops(k, cm)
        rows.append({"method": method, "n": n, "r": r, "select_flops": sel, "train_flops": tr,
                     "total": sel + tr, "ratio_to_repsim": sel / rep if rep else float("nan")})
    return rows
