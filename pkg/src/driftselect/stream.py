"""Synthetic drifting interaction stream.

Users hold a preference over latent topics (a softmax over per-user logits
plus a population-wide component). Every month both logit vectors take a
Gaussian random-walk step of size ``drift_rate`` clipped to
``[-logit_bound, logit_bound]``. Items belong to one topic, carry a
log-normal base popularity and a decaying novelty boost, and the catalog
and user base grow by a fixed amount each month.
"""

from __future__ import annotations

import calendar
import json
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Iterator

import numpy as np

REASON_END = ("trackdone", "fwdbtn", "pause", "exit")
INTERACTION_TYPE = ("playlist", "search", "radio", "album")

# P(reason_end | topic match), P(interaction_type | topic match); row 0 is a
# mismatch (item topic is not the user's current favourite), row 1 a match.
REASON_TABLE = np.array([[0.25, 0.55, 0.10, 0.10], [0.65, 0.15, 0.12, 0.08]])
TYPE_TABLE = np.array([[0.20, 0.15, 0.50, 0.15], [0.45, 0.25, 0.10, 0.20]])


class ConfigError(ValueError):
    """Invalid generator or protocol configuration."""


@dataclass(frozen=True)
class InteractionEvent:
    user_id: int
    item_id: int
    reason_end: int
    interaction_type: int
    timestamp: int


@dataclass
class WorldConfig:
    num_users: int = 200
    initial_catalog: int = 1000
    topics: int = 8
    drift_rate: float = 0.4
    new_items_per_month: int = 40
    new_users_per_month: int = 4
    events_per_user_per_month: float = 10.0
    seed: int = 0
    preference_scale: float = 2.0
    logit_bound: float = 4.0
    popularity_sigma: float = 1.0
    novelty_boost: float = 4.0
    novelty_months: float = 3.0

    def validate(self) -> None:
        if self.num_users < 1 or self.initial_catalog < 1 or self.topics < 1:
            raise ConfigError("num_users, initial_catalog and topics must be positive")
        if self.initial_catalog < self.topics:
            raise ConfigError("initial_catalog must cover every topic")
        if self.drift_rate < 0:
            raise ConfigError("drift_rate must be >= 0")
        if self.new_items_per_month < 0 or self.new_users_per_month < 0:
            raise ConfigError("monthly growth counts must be >= 0")
        if self.events_per_user_per_month <= 0:
            raise ConfigError("events_per_user_per_month must be positive")


def add_months(d: date, months: int) -> date:
    y, m = divmod(d.year * 12 + (d.month - 1) + months, 12)
    day = min(d.day, calendar.monthrange(y, m + 1)[1])
    return date(y, m + 1, day)


def months_between(a: date, b: date) -> int:
    """Whole months from ``a`` to ``b`` (``b`` must be month-aligned with ``a``)."""
    return (b.year - a.year) * 12 + (b.month - a.month)


def to_timestamp(d: date) -> int:
    return int(datetime(d.year, d.month, d.day, tzinfo=timezone.utc).timestamp())


@dataclass
class EventStream:
    """Columnar, globally time-sorted event store."""

    user_id: np.ndarray
    item_id: np.ndarray
    reason_end: np.ndarray
    interaction_type: np.ndarray
    timestamp: np.ndarray
    start: date
    end: date
    catalog_size_at: dict[int, int] = field(default_factory=dict)
    users_at: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.timestamp)

    def __iter__(self) -> Iterator[InteractionEvent]:
        for row in zip(self.user_id.tolist(), self.item_id.tolist(),
                       self.reason_end.tolist(), self.interaction_type.tolist(),
                       self.timestamp.tolist()):
            yield InteractionEvent(*row)

    @property
    def events(self) -> list[InteractionEvent]:
        return list(self)

    @property
    def num_months(self) -> int:
        return months_between(self.start, self.end)

    def month_start(self, m: int) -> int:
        return to_timestamp(add_months(self.start, m))

    def take(self, mask: np.ndarray, start: date | None = None, end: date | None = None) -> "EventStream":
        return EventStream(
            self.user_id[mask], self.item_id[mask], self.reason_end[mask],
            self.interaction_type[mask], self.timestamp[mask],
            start or self.start, end or self.end,
            dict(self.catalog_size_at), dict(self.users_at),
        )

    def catalog_size_before(self, ts: int) -> int:
        """Number of items that exist at any time strictly before ``ts``."""
        size = 0
        for m in sorted(self.catalog_size_at):
            if self.month_start(m) < ts:
                size = self.catalog_size_at[m]
        return size

    def users_before(self, ts: int) -> int:
        size = 0
        for m in sorted(self.users_at):
            if self.month_start(m) < ts:
                size = self.users_at[m]
        return size

    # -- line-delimited export / import -------------------------------------

    def to_lines(self) -> Iterator[str]:
        cols = (self.user_id, self.item_id, self.reason_end, self.interaction_type, self.timestamp)
        for row in zip(*(c.tolist() for c in cols)):
            yield "%d,%d,%d,%d,%d\n" % row

    def write(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(self.to_lines())
        meta = {
            "start": self.start.isoformat(),
            "end": self.end.isoformat(),
            "catalog_size_at": {str(k): v for k, v in sorted(self.catalog_size_at.items())},
            "users_at": {str(k): v for k, v in sorted(self.users_at.items())},
        }
        meta_path(path).write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "EventStream":
        path = Path(path)
        raw = np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)
        if raw.size == 0:
            raw = np.zeros((0, 5), dtype=np.int64)
        if raw.shape[1] != 5:
            raise ValueError(f"{path}: expected 5 fields per line, got {raw.shape[1]}")
        mp = meta_path(path)
        if mp.exists():
            meta = json.loads(mp.read_text(encoding="utf-8"))
            start = date.fromisoformat(meta["start"])
            end = date.fromisoformat(meta["end"])
            cat = {int(k): int(v) for k, v in meta["catalog_size_at"].items()}
            users = {int(k): int(v) for k, v in meta.get("users_at", {}).items()}
        else:
            start, end, cat, users = _infer_meta(raw)
        return cls(raw[:, 0], raw[:, 1], raw[:, 2], raw[:, 3], raw[:, 4], start, end, cat, users)


def meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def _infer_meta(raw: np.ndarray):
    if len(raw) == 0:
        raise ValueError("cannot infer calendar bounds from an empty stream without metadata")
    first = datetime.fromtimestamp(int(raw[0, 4]), tz=timezone.utc).date().replace(day=1)
    last = datetime.fromtimestamp(int(raw[-1, 4]), tz=timezone.utc).date().replace(day=1)
    end = add_months(last, 1)
    cat, users = {}, {}
    seen_item = seen_user = 0
    for m in range(months_between(first, end)):
        hi = to_timestamp(add_months(first, m + 1))
        sel = raw[:, 4] < hi
        if sel.any():
            seen_item = max(seen_item, int(raw[sel, 1].max()) + 1)
            seen_user = max(seen_user, int(raw[sel, 0].max()) + 1)
        cat[m], users[m] = seen_item, seen_user
    return first, end, cat, users


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def generate_stream(cfg: WorldConfig, start: date, end: date) -> EventStream:
    """Simulate monthly interaction events over ``[start, end)``."""
    cfg.validate()
    n_months = months_between(start, end)
    if n_months < 1 or end <= start:
        raise ConfigError(f"empty date range: {start} .. {end}")
    rng = np.random.default_rng(cfg.seed)
    T = cfg.topics

    total_items = cfg.initial_catalog + cfg.new_items_per_month * (n_months - 1)
    total_users = cfg.num_users + cfg.new_users_per_month * (n_months - 1)
    item_topic = np.concatenate([
        np.arange(cfg.initial_catalog) % T,
        rng.integers(0, T, size=total_items - cfg.initial_catalog),
    ])
    item_birth = np.zeros(total_items, dtype=np.int64)
    if cfg.new_items_per_month:
        item_birth[cfg.initial_catalog:] = 1 + np.arange(total_items - cfg.initial_catalog) // cfg.new_items_per_month
    item_logpop = cfg.popularity_sigma * rng.standard_normal(total_items)

    global_logits = np.zeros(T)
    user_logits = cfg.preference_scale * rng.standard_normal((total_users, T))
    bound = cfg.logit_bound

    cols: list[list[np.ndarray]] = [[], [], [], [], []]
    catalog_size_at, users_at = {}, {}
    for m in range(n_months):
        if m > 0 and cfg.drift_rate > 0:
            global_logits = np.clip(global_logits + cfg.drift_rate * rng.standard_normal(T), -bound, bound)
            user_logits = np.clip(user_logits + cfg.drift_rate * rng.standard_normal(user_logits.shape), -bound, bound)
        n_items = cfg.initial_catalog + cfg.new_items_per_month * m
        n_users = cfg.num_users + cfg.new_users_per_month * m
        catalog_size_at[m], users_at[m] = n_items, n_users
        lo, hi = to_timestamp(add_months(start, m)), to_timestamp(add_months(start, m + 1))

        age = m - item_birth[:n_items]
        weight = np.exp(item_logpop[:n_items]) * (1.0 + cfg.novelty_boost * np.exp(-age / cfg.novelty_months))
        topic_items = [np.flatnonzero(item_topic[:n_items] == k) for k in range(T)]
        topic_cdf = []
        for idx in topic_items:
            c = np.cumsum(weight[idx])
            topic_cdf.append(c / c[-1])

        pref = _softmax(global_logits + user_logits[:n_users])
        favourite = pref.argmax(axis=1)
        counts = rng.poisson(cfg.events_per_user_per_month, size=n_users)
        users = np.repeat(np.arange(n_users), counts)
        n_ev = len(users)
        u = rng.random(n_ev)
        topic = (u[:, None] > np.cumsum(pref, axis=1)[users]).sum(axis=1)
        topic = np.minimum(topic, T - 1)
        items = np.empty(n_ev, dtype=np.int64)
        u_item = rng.random(n_ev)
        for k in range(T):
            sel = topic == k
            pos = np.searchsorted(topic_cdf[k], u_item[sel], side="right")
            items[sel] = topic_items[k][np.minimum(pos, len(topic_items[k]) - 1)]
        match = (topic == favourite[users]).astype(np.int64)
        reason = _draw_rows(REASON_TABLE[match], rng.random(n_ev))
        itype = _draw_rows(TYPE_TABLE[match], rng.random(n_ev))
        ts = rng.integers(lo, hi, size=n_ev)

        order = np.lexsort((users, ts))
        for col, arr in zip(cols, (users, items, reason, itype, ts)):
            col.append(arr[order].astype(np.int64))

    arrays = [np.concatenate(c) if c else np.zeros(0, dtype=np.int64) for c in cols]
    return EventStream(*arrays, start=start, end=end, catalog_size_at=catalog_size_at, users_at=users_at)


def _draw_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    out = (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    return np.minimum(out, probs.shape[1] - 1)


def partition_by_interval(stream: EventStream, interval_months: int, origin: date) -> list[EventStream]:
    """Split into consecutive half-open ``interval_months`` windows from ``origin``.

    The windows cover ``[origin, stream.end)``; the final window may be
    shorter than ``interval_months`` if the stream ends mid-window.
    """
    if interval_months < 1:
        raise ConfigError("interval_months must be >= 1")
    if len(stream) and stream.timestamp[0] < to_timestamp(origin):
        raise ValueError("stream has events before the partition origin")
    total = months_between(origin, stream.end)
    n = max(0, -(-total // interval_months))
    out = []
    for k in range(n):
        a = add_months(origin, k * interval_months)
        b = min(add_months(origin, (k + 1) * interval_months), stream.end)
        lo, hi = to_timestamp(a), to_timestamp(b)
        mask = (stream.timestamp >= lo) & (stream.timestamp < hi)
        out.append(stream.take(mask, a, b))
    return out
