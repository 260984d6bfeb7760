"""Rolling continual-adaptation experiment.

Timeline: the model pretrains on every chunk that ends before
``pretrain_end`` and is evaluated on interval 1 (t = 0). At each t = 1..H the
pool is the set of new chunks ending in interval t; an arm selects from it,
continues training on everything it has used so far plus the selection, and
is evaluated on the chunks ending in interval t + 1.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import warnings
import zlib
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np

from . import representations as reps
from .flops import CostModel, FlopsReport, count_ops, select_flops, train_flops
from .model import HstuHyper, HstuModel, SequenceChunk
from .selector import SelectionManifest, SelectionPlan, Strategy, score_pool, select
from .stream import EventStream, add_months, to_timestamp
from .train import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

CHUNK_LEN = 100
METRIC_KEYS = ("ndcg@10", "ndcg@50", "hr@10", "hr@50", "mrr")


class ProtocolError(ValueError):
    pass


@dataclass
class ArmConfig:
    """One experimental arm.

    ``kind`` is ``none`` (no retraining), ``full`` (the whole pool), ``random``
    or ``select`` (scored selection with ``repr`` and ``plan``).
    """

    name: str
    kind: str = "select"
    repr: str = "GradSim"
    plan: SelectionPlan | None = None
    budget_fraction: float = 0.2
    ref_size: int | None = None

    def __post_init__(self):
        if self.kind not in ("none", "full", "random", "select"):
            raise ProtocolError(f"arm {self.name}: unknown kind {self.kind!r}")
        if self.kind == "select":
            if self.plan is None:
                raise ProtocolError(f"arm {self.name}: selection arm needs a plan")
            kind = reps.ReprKind(self.repr)
            if kind is reps.ReprKind.TOKEN_BAG and self.plan.strategy in (
                    Strategy.KNN_WEIGHTED, Strategy.DIVERSE_WEIGHTED):
                raise ProtocolError(f"arm {self.name}: {self.plan.strategy.value} needs dense representations")
        if not 0.0 < self.budget_fraction <= 1.0:
            raise ProtocolError(f"arm {self.name}: budget_fraction must be in (0, 1]")


@dataclass
class ProtocolConfig:
    pretrain_end: date
    interval_months: int = 6
    horizon_intervals: int = 3
    ref_size: int = 100
    ref_window_months: int = 1
    arms: list[ArmConfig] = field(default_factory=list)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cumulative_replay: bool = True
    remove_ref_from_pool: bool = False
    eval_k: tuple[int, ...] = (10, 50)

    def validate(self) -> None:
        if self.interval_months < 1 or self.horizon_intervals < 0:
            raise ProtocolError("interval_months >= 1 and horizon_intervals >= 0 required")
        if self.ref_size < 1 or not 1 <= self.ref_window_months <= self.interval_months:
            raise ProtocolError("bad reference set size or window")
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise ProtocolError("arm names must be unique")

    def interval_bounds(self, t: int) -> tuple[int, int]:
        """Timestamps ``[lo, hi)`` of interval ``t`` (t >= 1)."""
        a = add_months(self.pretrain_end, (t - 1) * self.interval_months)
        return to_timestamp(a), to_timestamp(add_months(a, self.interval_months))


# -- chunking ------------------------------------------------------------------


class Chunker:
    """Per-user lifetime histories cut into consecutive ``CHUNK_LEN`` segments."""

    def __init__(self, stream: EventStream, chunk_len: int = CHUNK_LEN):
        self.stream = stream
        self.chunk_len = chunk_len
        order = np.lexsort((stream.timestamp, stream.user_id))
        users = stream.user_id[order]
        cuts = np.flatnonzero(np.diff(users)) + 1
        self.by_user = {int(users[s]): order[s:e]
                        for s, e in zip(np.r_[0, cuts], np.r_[cuts, len(users)]) if e > s}

    def chunks_ending_in(self, lo: int, hi: int, source_interval: int) -> list[SequenceChunk]:
        """Chunks of histories truncated at ``hi`` whose last event is in ``[lo, hi)``."""
        s, L = self.stream, self.chunk_len
        out = []
        for user in sorted(self.by_user):
            idx = self.by_user[user]
            ts = s.timestamp[idx]
            n = int(np.searchsorted(ts, hi, side="left"))
            first = int(np.searchsorted(ts, lo, side="left"))
            if n == first:
                continue
            starts = range((first // L) * L, n, L)
            for a in starts:
                b = min(a + L, n)
                if b - 1 < first or b - a < 2:
                    continue
                sel = idx[a:b]
                out.append(SequenceChunk(user, s.item_id[sel], s.reason_end[sel], s.interaction_type[sel],
                                         ts[a:b], source_interval, (user, a, b)))
        return out


def build_pool(chunker: Chunker, cfg: ProtocolConfig, t: int, seen: set) -> list[SequenceChunk]:
    """New chunks ending in interval ``t`` whose ids are not in ``seen``."""
    lo, hi = cfg.interval_bounds(t)
    return [c for c in chunker.chunks_ending_in(lo, hi, t) if c.chunk_id not in seen]


def build_pretrain(chunker: Chunker, cfg: ProtocolConfig) -> list[SequenceChunk]:
    hi = to_timestamp(cfg.pretrain_end)
    return chunker.chunks_ending_in(np.iinfo(np.int64).min, hi, 0)


def build_ref(pool: list[SequenceChunk], cfg: ProtocolConfig, t: int, ref_size: int, seed: int) -> list[SequenceChunk]:
    """Uniform sample of pool chunks ending in the final month(s) of interval ``t``."""
    _, hi = cfg.interval_bounds(t)
    end = add_months(cfg.pretrain_end, t * cfg.interval_months)
    lo = to_timestamp(add_months(end, -cfg.ref_window_months))
    eligible = [c for c in pool if lo <= c.last_timestamp < hi]
    if not eligible:
        raise ProtocolError(f"interval {t}: no chunks end in its final month")
    if len(eligible) < ref_size:
        warnings.warn(f"interval {t}: only {len(eligible)} reference chunks available, "
                      f"wanted {ref_size}; using all", RuntimeWarning, stacklevel=2)
        return eligible
    rng = np.random.default_rng([seed, t, 0x5EF])
    pick = np.sort(rng.choice(len(eligible), size=ref_size, replace=False))
    return [eligible[i] for i in pick]


def error_reduction(metric_sel: float, metric_none: float, metric_full: float) -> float | None:
    gap = metric_full - metric_none
    if gap == 0:
        return None
    return (metric_sel - metric_none) / gap


def arm_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


# -- reports -------------------------------------------------------------------


@dataclass
class IntervalReport:
    seed: int
    arm: str
    t: int
    strategy: str
    n_train: int
    n_select: int
    n_eval: int
    metrics: dict
    flops: dict
    counted_ops: dict
    relative_improvement: dict | None = None
    error_reduction: float | None = None
    wall_time: float = 0.0

    def record(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("wall_time")
        return d

    def line(self) -> str:
        return json.dumps(self.record(), sort_keys=True) + "\n"

    @classmethod
    def from_record(cls, rec: dict) -> "IntervalReport":
        return cls(**rec)


def read_reports(path: str | Path) -> list[IntervalReport]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [IntervalReport.from_record(json.loads(x)) for x in fh if x.strip()]


def annotate(reports: list[IntervalReport], metric: str = "ndcg@50") -> None:
    """Fill relative improvement against ``none`` and error reduction against ``full``."""
    idx = {(r.seed, r.arm, r.t): r for r in reports}
    for r in reports:
        base = idx.get((r.seed, "none", r.t))
        full = idx.get((r.seed, "full", r.t))
        if base is not None:
            r.relative_improvement = {
                k: (r.metrics[k] / base.metrics[k] - 1.0) if base.metrics[k] else None
                for k in METRIC_KEYS}
        if base is not None and full is not None and r.t > 0:
            r.error_reduction = error_reduction(r.metrics[metric], base.metrics[metric], full.metrics[metric])


def summary_table(reports: list[IntervalReport], metric: str = "ndcg@50") -> dict:
    """Seed- and interval-averaged error reduction per arm (``None`` if undefined)."""
    by_key = {(r.seed, r.arm, r.t): r for r in reports}
    arms = sorted({r.arm for r in reports})
    out = {}
    for arm in arms:
        vals, mets = [], []
        for (seed, a, t), r in sorted(by_key.items()):
            if a != arm or t == 0:
                continue
            mets.append(r.metrics[metric])
            none, full = by_key.get((seed, "none", t)), by_key.get((seed, "full", t))
            if none and full:
                er = error_reduction(r.metrics[metric], none.metrics[metric], full.metrics[metric])
                if er is not None:
                    vals.append(er)
        out[arm] = {"mean_" + metric: float(np.mean(mets)) if mets else None,
                    "error_reduction": float(np.mean(vals)) if vals else None}
    return out


# -- the experiment ------------------------------------------------------------


def _grow_to(model: HstuModel, stream: EventStream, ts: int) -> HstuModel:
    vocab = max(model.vocab, stream.catalog_size_before(ts))
    users = max(model.num_users, stream.users_before(ts))
    if vocab != model.vocab or users != model.num_users:
        model.grow(vocab, users)
    return model


def _train_cfg(base: TrainConfig, seed: int, t: int) -> TrainConfig:
    return dataclasses.replace(base, seed=int(np.random.SeedSequence([seed, t]).generate_state(1)[0]))


def _sorted(chunks):
    return sorted(chunks, key=lambda c: c.chunk_id)


def _cost_model(hyper: HstuHyper, chunks, r: int, negatives: int, epochs: int) -> CostModel:
    # partial chunks count as a fraction of a full-length pass
    n_eq = sum(len(c) for c in chunks) / hyper.max_len
    cm = CostModel.from_hyper(hyper, n=len(chunks), r=r, negatives=negatives, epochs=epochs)
    cm.n = n_eq
    return cm


@dataclass
class ArmState:
    model: HstuModel
    replay: list[SequenceChunk]


class Experiment:
    """One seed of the protocol: shared pools, one model lineage per arm."""

    def __init__(self, cfg: ProtocolConfig, stream: EventStream, hyper: HstuHyper, seed: int,
                 out_dir: str | Path | None = None):
        cfg.validate()
        self.cfg, self.stream, self.hyper, self.seed = cfg, stream, hyper, seed
        last_needed = add_months(cfg.pretrain_end, (cfg.horizon_intervals + 1) * cfg.interval_months)
        if stream.end < last_needed:
            raise ProtocolError(f"stream ends {stream.end}, protocol needs data until {last_needed}")
        self.out_dir = Path(out_dir) if out_dir else None
        self.chunker = Chunker(stream)
        self.pretrain_chunks = _sorted(build_pretrain(self.chunker, cfg))
        if not self.pretrain_chunks:
            raise ProtocolError("no pretraining chunks before pretrain_end")
        self.pools: dict[int, list[SequenceChunk]] = {}
        seen = {c.chunk_id for c in self.pretrain_chunks}
        for t in range(1, cfg.horizon_intervals + 2):
            self.pools[t] = build_pool(self.chunker, cfg, t, seen)
            seen.update(c.chunk_id for c in self.pools[t])

    # evaluation set at t is the pool of interval t + 1 (all chunks ending there)
    def eval_chunks(self, t: int) -> list[SequenceChunk]:
        return self.pools[t + 1]

    def _ckpt(self, arm: str, t: int) -> Path | None:
        if self.out_dir is None:
            return None
        return self.out_dir / "checkpoints" / f"seed{self.seed}" / f"{arm}_t{t}.npz"

    def _manifest_path(self, arm: str, t: int) -> Path | None:
        if self.out_dir is None:
            return None
        return self.out_dir / "selections" / f"seed{self.seed}" / f"{arm}_t{t}.json"

    def evaluate(self, model: HstuModel, t: int) -> tuple[dict, int]:
        chunks = self.eval_chunks(t)
        _, hi = self.cfg.interval_bounds(t + 1)
        m = _grow_to(model.copy(), self.stream, hi)
        res = evaluate(chunks, m, self.cfg.eval_k)
        return {k: res[k] for k in METRIC_KEYS}, res["count"]

    def pretrain(self) -> HstuModel:
        path = self._ckpt("pretrain", 0)
        if path is not None and path.exists():
            return HstuModel.load(path)
        ts = to_timestamp(self.cfg.pretrain_end)
        model = HstuModel.init(self.hyper, self.stream.catalog_size_before(ts),
                               self.stream.users_before(ts), seed=self.seed)
        model, _ = train(self.pretrain_chunks, model, _train_cfg(self.cfg.pretrain, self.seed, 0))
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            model.save(path)
        return model

    def select(self, arm: ArmConfig, model: HstuModel, t: int) -> tuple[list[SequenceChunk], FlopsReport]:
        pool = self.pools[t]
        flops = FlopsReport()
        if arm.kind == "full":
            return list(pool), flops
        K = math.ceil(arm.budget_fraction * len(pool))
        sel_seed = int(np.random.SeedSequence([self.seed, t, arm_key(arm.name)]).generate_state(1)[0])
        if arm.kind == "random":
            rng = np.random.default_rng(sel_seed)
            idx = rng.choice(len(pool), size=K, replace=False)
            return [pool[i] for i in idx], flops
        ref_size = arm.ref_size or self.cfg.ref_size
        ref = build_ref(pool, self.cfg, t, ref_size, self.seed)
        cand = pool
        if self.cfg.remove_ref_from_pool:
            ref_ids = {c.chunk_id for c in ref}
            cand = [c for c in pool if c.chunk_id not in ref_ids]
            K = min(K, len(cand))
        kind = reps.ReprKind(arm.repr)
        _, hi = self.cfg.interval_bounds(t)
        m = _grow_to(model.copy(), self.stream, hi)
        if kind is reps.ReprKind.TOKEN_BAG:
            pool_r, ref_r = reps.extract(kind, cand), reps.extract(kind, ref)
            scored = score_pool(pool_r, ref_r, "bm25", [c.chunk_id for c in cand])
        else:
            pool_r, ref_r = reps.extract(kind, cand, m), reps.extract(kind, ref, m)
            scored = score_pool(pool_r, ref_r, "cosine", [c.chunk_id for c in cand])
            cm = _cost_model(self.hyper, cand, len(ref), self.cfg.train.negative_samples, 1)
            flops.add("select", select_flops(kind.value.lower(), cm))
        plan = dataclasses.replace(arm.plan, budget=K, seed=sel_seed)
        idx = select(scored, plan)
        return [cand[i] for i in idx], flops

    def run_arm(self, arm: ArmConfig, base: HstuModel, done: set, emit) -> None:
        cfg = self.cfg
        state = ArmState(base.copy(), list(self.pretrain_chunks))
        if (arm.name, 0) not in done:
            t0 = time.perf_counter()
            metrics, n_eval = self.evaluate(state.model, 0)
            emit(IntervalReport(self.seed, arm.name, 0, self._strategy(arm), len(self.pretrain_chunks), 0,
                                n_eval, metrics, {"total": 0.0}, {}, wall_time=time.perf_counter() - t0))
        for t in range(1, cfg.horizon_intervals + 1):
            if (arm.name, t) in done:
                state = self._restore(arm, t, state)
                continue
            t0 = time.perf_counter()
            with count_ops() as tally:
                if arm.kind == "none":
                    chosen, flops = [], FlopsReport()
                else:
                    chosen, flops = self.select(arm, state.model, t)
                    manifest = SelectionManifest(self._strategy(arm), self._params(arm), self.seed,
                                                 sorted(c.chunk_id for c in chosen))
                    if self._manifest_path(arm.name, t):
                        p = self._manifest_path(arm.name, t)
                        p.parent.mkdir(parents=True, exist_ok=True)
                        manifest.write(p)
                    state = self._update(state, chosen, t)
                    tc = cfg.train
                    cm = _cost_model(self.hyper, state.replay, 1, tc.negative_samples, tc.epochs)
                    flops.add("train", train_flops(cm.n, cm))
                counted = dict(tally)
            metrics, n_eval = self.evaluate(state.model, t)
            if not state.model.all_finite():
                raise FloatingPointError(f"arm {arm.name}: non-finite parameters after interval {t}")
            if self._ckpt(arm.name, t) is not None and arm.kind != "none":
                p = self._ckpt(arm.name, t)
                p.parent.mkdir(parents=True, exist_ok=True)
                state.model.save(p)
            emit(IntervalReport(self.seed, arm.name, t, self._strategy(arm), len(self.pools[t]), len(chosen),
                                n_eval, metrics, flops.to_dict(), counted, wall_time=time.perf_counter() - t0))

    def _update(self, state: ArmState, chosen, t: int) -> ArmState:
        replay = _sorted(state.replay + list(chosen)) if self.cfg.cumulative_replay else _sorted(chosen)
        if not replay:
            return ArmState(state.model, replay)
        _, hi = self.cfg.interval_bounds(t)
        model = _grow_to(state.model, self.stream, hi)
        model, _ = train(replay, model, _train_cfg(self.cfg.train, self.seed, t))
        # the replay buffer keeps everything used so far, even for selected-only updates
        return ArmState(model, _sorted(state.replay + list(chosen)))

    def _restore(self, arm: ArmConfig, t: int, state: ArmState) -> ArmState:
        if arm.kind == "none":
            return state
        mp, cp = self._manifest_path(arm.name, t), self._ckpt(arm.name, t)
        if mp is None or not mp.exists() or not cp.exists():
            raise ProtocolError(f"cannot resume arm {arm.name} at t={t}: missing checkpoint or manifest")
        ids = set(SelectionManifest.read(mp).selected)
        chosen = [c for c in self.pools[t] if c.chunk_id in ids]
        return ArmState(HstuModel.load(cp), _sorted(state.replay + chosen))

    @staticmethod
    def _strategy(arm: ArmConfig) -> str:
        if arm.kind in ("none", "full"):
            return arm.kind
        if arm.kind == "random":
            return "Random"
        return f"{arm.repr}+{arm.plan.strategy.value}"

    @staticmethod
    def _params(arm: ArmConfig) -> dict:
        p = {"budget_fraction": arm.budget_fraction, "kind": arm.kind}
        if arm.plan is not None:
            p.update(repr=arm.repr, top_fraction=arm.plan.top_fraction, clusters=arm.plan.clusters,
                     batch=arm.plan.batch, ref_size=arm.ref_size)
        return p


def run_protocol(cfg: ProtocolConfig, stream: EventStream, hyper: HstuHyper, seed: int = 0,
                 out_dir: str | Path | None = None, done: set | None = None,
                 emit=None) -> list[IntervalReport]:
    """Run every arm for one seed; ``emit`` receives each report as it is produced."""
    done = done or set()
    reports: list[IntervalReport] = []

    def _emit(r: IntervalReport):
        reports.append(r)
        if emit is not None:
            emit(r)

    exp = Experiment(cfg, stream, hyper, seed, out_dir)
    base = exp.pretrain()
    for arm in cfg.arms:
        log.info("seed %d arm %s", seed, arm.name)
        exp.run_arm(arm, base, {(a, t) for (s, a, t) in done if s == seed}, _emit)
    return reports
