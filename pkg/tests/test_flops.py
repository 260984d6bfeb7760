import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftselect import nn
from driftselect.flops import (CostModel, FlopsReport, count_ops, flops_table, forward_cost, select_flops,
                               train_flops)
from driftselect.model import HstuHyper, HstuModel
from _util import rand_chunk


def cm(**kw):
    base = dict(f_fwd=1e6, n=1000, r=100, d_rep=64, d_grad=64)
    base.update(kw)
    return CostModel(**base)


def test_random_is_free():
    assert select_flops("random", cm()) == 0.0


def test_repsim_worked_example():
    want = 1100 * 1e6 + 1000 * 100 * 64 + 1000 * math.log2(1000)
    assert select_flops("repsim", cm()) == pytest.approx(want, rel=1e-12)
    assert select_flops("RepSim", cm()) == pytest.approx(1.10641e9, rel=1e-5)


def test_gradsim_about_three_times_repsim():
    ratio = select_flops("gradsim", cm()) / select_flops("repsim", cm())
    assert 2.9 < ratio < 3.0


def test_ratio_limit_is_three():
    ratios = [select_flops("gradsim", cm(f_fwd=f)) / select_flops("repsim", cm(f_fwd=f)) for f in (1e6, 1e9, 1e15)]
    assert ratios[0] < ratios[1] < ratios[2] <= 3.0
    assert ratios[2] == pytest.approx(3.0, rel=1e-8)


def test_unknown_method():
    with pytest.raises(ValueError):
        select_flops("influence", cm())


def test_default_backward_is_double():
    assert cm().f_bwd == 2e6
    with pytest.raises(ValueError):
        cm(f_fwd=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5000), st.integers(1, 500), st.integers(1, 256), st.sampled_from(["repsim", "gradsim"]))
def test_monotone(n, r, d, method):
    base = select_flops(method, cm(n=n, r=r, d_rep=d, d_grad=d))
    assert select_flops(method, cm(n=n + 1, r=r, d_rep=d, d_grad=d)) >= base
    assert select_flops(method, cm(n=n, r=r + 1, d_rep=d, d_grad=d)) >= base
    assert select_flops(method, cm(n=n, r=r, d_rep=d + 1, d_grad=d + 1)) >= base


def test_train_flops_linear():
    c = cm(epochs=3)
    assert train_flops(0, c) == 0
    assert train_flops(200, c) == 2 * train_flops(100, c)
    assert train_flops(10, c) == 10 * 3 * 3e6
    with pytest.raises(ValueError):
        train_flops(-1, c)


def test_report_total_is_sum():
    r = FlopsReport()
    r.add("select", 1.5e9)
    r.add("train", 2.25e10)
    r.add("train", 1.0)
    d = r.to_dict()
    assert d["total"] == pytest.approx(d["select"] + d["train"], rel=1e-15)


def test_table_columns():
    rows = flops_table(1000, 100, 200, {"f_fwd": 1e6, "d_rep": 64, "d_grad": 256})
    assert [r["method"] for r in rows] == ["random", "repsim", "gradsim"]
    assert rows[1]["ratio_to_repsim"] == 1.0
    for r in rows:
        assert r["total"] == r["select_flops"] + r["train_flops"]


def _counted(hyper, length=100, negatives=64, vocab=500, seed=0):
    m = HstuModel.init(hyper, vocab, 10, seed=seed)
    c = rand_chunk(np.random.default_rng(seed), length, vocab, users=10)
    b = nn.make_batch([c], hyper.max_len)
    negs = nn.draw_negatives(np.random.default_rng(1), b.items, vocab, negatives)
    with count_ops() as tally:
        nn.loss_and_grad(b, m, negatives=negs)
    return dict(tally)


def test_counted_forward_matches_analytic():
    h = HstuHyper()
    got = _counted(h)["fwd"]
    want = forward_cost(h.d, h.depth, 100, 64, h.num_actions)
    assert abs(got - want) / want < 0.15


def test_counted_backward_ratio():
    t = _counted(HstuHyper())
    assert 1.7 <= t["bwd"] / t["fwd"] <= 2.5


def test_depth_zero_counts_embedding_and_heads():
    h = HstuHyper(depth=0)
    got = _counted(h, length=40, negatives=8)["fwd"]
    assert got == 2 * 40 * h.d + 40 * 9 * h.d + 40 * h.d * h.num_actions


def test_counts_are_additive():
    m = HstuModel.init(HstuHyper(d=16), 50, 5)
    c = rand_chunk(np.random.default_rng(0), 30, 50)
    with count_ops() as one:
        nn.forward(c, m)
    single = one["fwd"]
    with count_ops() as two:
        nn.forward(c, m)
        nn.forward(c, m)
    assert two["fwd"] == 2 * single


def test_counter_off_by_default():
    from driftselect.flops import COUNTER
    before = dict(COUNTER.tally)
    nn.forward(rand_chunk(np.random.default_rng(0), 5, 20), HstuModel.init(HstuHyper(d=8), 20, 5))
    assert COUNTER.tally == before
