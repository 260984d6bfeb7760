from datetime import date

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from driftselect.stream import (ConfigError, EventStream, WorldConfig, add_months, generate_stream,
                                months_between, partition_by_interval, to_timestamp)

START = date(2021, 1, 1)


def small(**kw):
    base = dict(num_users=40, initial_catalog=100, new_items_per_month=10, new_users_per_month=2,
                events_per_user_per_month=6.0, seed=3)
    base.update(kw)
    return WorldConfig(**base)


def month_of(stream, ts):
    starts = np.array([stream.month_start(m) for m in range(stream.num_months)])
    return np.searchsorted(starts, ts, side="right") - 1


def test_catalog_growth():
    s = generate_stream(small(new_items_per_month=10, initial_catalog=100), START, add_months(START, 3))
    assert s.catalog_size_at == {0: 100, 1: 110, 2: 120}


def test_users_grow():
    s = generate_stream(small(), START, add_months(START, 4))
    assert [s.users_at[m] for m in range(4)] == [40, 42, 44, 46]


def test_same_seed_byte_identical(tmp_path):
    cfg = small()
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    generate_stream(cfg, START, add_months(START, 5)).write(a)
    generate_stream(cfg, START, add_months(START, 5)).write(b)
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.csv.meta.json").read_bytes() == (tmp_path / "b.csv.meta.json").read_bytes()


def test_ordering_and_item_existence():
    s = generate_stream(small(), START, add_months(START, 6))
    assert np.all(np.diff(s.timestamp) >= 0)
    for u in np.unique(s.user_id):
        assert np.all(np.diff(s.timestamp[s.user_id == u]) >= 0)
    m = month_of(s, s.timestamp)
    cat = np.array([s.catalog_size_at[k] for k in m])
    assert np.all(s.item_id < cat)
    users = np.array([s.users_at[k] for k in m])
    assert np.all(s.user_id < users)
    assert set(np.unique(s.reason_end)) <= {0, 1, 2, 3}
    assert set(np.unique(s.interaction_type)) <= {0, 1, 2, 3}


def test_stationary_without_drift():
    # item counts binned by id; the two months should look like one distribution
    for seed in range(5):
        cfg = small(drift_rate=0.0, new_items_per_month=0, new_users_per_month=0, num_users=300,
                    events_per_user_per_month=10.0, seed=seed)
        s = generate_stream(cfg, START, add_months(START, 2))
        m = month_of(s, s.timestamp)
        bins = s.item_id % 10
        table = np.array([np.bincount(bins[m == k], minlength=10) for k in (0, 1)])
        assert chi2_contingency(table)[1] > 0.01, seed


def _tv(s, a, b):
    m = month_of(s, s.timestamp)
    V = s.catalog_size_at[0]
    pa = np.bincount(s.item_id[m == a], minlength=V) / np.sum(m == a)
    pb = np.bincount(s.item_id[m == b], minlength=V) / np.sum(m == b)
    return 0.5 * np.abs(pa - pb).sum()


def test_drift_moves_item_marginals():
    kw = dict(new_items_per_month=0, new_users_per_month=0, num_users=200, events_per_user_per_month=20.0)
    fast = generate_stream(small(drift_rate=0.5, **kw), START, add_months(START, 12))
    slow = generate_stream(small(drift_rate=0.05, **kw), START, add_months(START, 12))
    assert _tv(fast, 0, 11) > _tv(slow, 0, 11)


def test_empty_range_is_config_error():
    with pytest.raises(ConfigError):
        generate_stream(small(), START, START)
    with pytest.raises(ConfigError):
        generate_stream(small(), START, date(2020, 1, 1))


def test_bad_config_rejected():
    with pytest.raises(ConfigError):
        generate_stream(small(drift_rate=-1), START, add_months(START, 1))


def test_month_arithmetic():
    assert add_months(date(2021, 11, 1), 3) == date(2022, 2, 1)
    assert months_between(date(2020, 1, 1), date(2023, 1, 1)) == 36


def test_partition_counts_and_cover():
    s = generate_stream(small(num_users=10), START, add_months(START, 36))
    parts = partition_by_interval(s, 6, START)
    assert len(parts) == 6
    assert sum(len(p) for p in parts) == len(s)
    joined = np.concatenate([p.timestamp for p in parts])
    assert np.array_equal(joined, s.timestamp)


def _manual(ts):
    n = len(ts)
    z = np.zeros(n, dtype=np.int64)
    return EventStream(z, z, z, z, np.asarray(ts, dtype=np.int64), START, add_months(START, 12),
                       {0: 1}, {0: 1})


def test_boundary_event_goes_to_later_interval():
    edge = to_timestamp(add_months(START, 6))
    parts = partition_by_interval(_manual([edge - 1, edge]), 6, START)
    assert list(parts[0].timestamp) == [edge - 1]
    assert list(parts[1].timestamp) == [edge]


def test_empty_stream_partition():
    parts = partition_by_interval(_manual([]), 3, START)
    assert len(parts) == 4 and all(len(p) == 0 for p in parts)


def test_events_before_origin_rejected():
    with pytest.raises(ValueError):
        partition_by_interval(_manual([to_timestamp(START)]), 6, add_months(START, 1))


def test_roundtrip(tmp_path):
    s = generate_stream(small(), START, add_months(START, 3))
    p = tmp_path / "ev.csv"
    s.write(p)
    lines = p.read_text().splitlines()
    assert len(lines) == len(s) and lines[0].count(",") == 4
    r = EventStream.read(p)
    for col in ("user_id", "item_id", "reason_end", "interaction_type", "timestamp"):
        assert np.array_equal(getattr(r, col), getattr(s, col))
    assert r.catalog_size_at == s.catalog_size_at and r.start == s.start and r.end == s.end
    # without the sidecar the bounds are inferred from the data
    (tmp_path / "ev.csv.meta.json").unlink()
    r2 = EventStream.read(p)
    assert r2.start == START and len(r2) == len(s)


def test_events_view():
    s = generate_stream(small(num_users=3), START, add_months(START, 1))
    ev = s.events
    assert len(ev) == len(s)
    assert ev[0].timestamp == s.timestamp[0] and ev[-1].item_id == s.item_id[-1]
