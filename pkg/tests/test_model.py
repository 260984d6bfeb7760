import math

import numpy as np
import pytest

from driftselect import nn
from driftselect.model import HstuHyper, HstuModel, SequenceChunk
from _util import rand_chunk, tiny_model


def fd_check(model, batch, negs, final, h=1e-5):
    f = lambda: nn.loss_and_grad(batch, model, negatives=negs, final_item=final, need_grad=False)[0].total
    _, g = nn.loss_and_grad(batch, model, negatives=negs, final_item=final)
    worst = 0.0
    for name, arr in model.params.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = f()
            arr[idx] = old - h
            fm = f()
            arr[idx] = old
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(g[name][idx] - fd) / (abs(fd) + 1e-6))
    return worst


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("final", [False, True])
def test_gradient_matches_finite_differences(backend, seed, final):
    rng = np.random.default_rng(seed)
    m = tiny_model(seed)
    b = nn.make_batch([rand_chunk(rng, 9, 20)], 12)
    negs = nn.draw_negatives(np.random.default_rng(7), b.items, 20, 5)
    assert fd_check(m, b, negs, final) < 1e-4


@pytest.mark.parametrize("variant", [dict(tie_item_head=True), dict(residual=False), dict(depth=2)])
def test_gradient_variants(backend, variant):
    rng = np.random.default_rng(5)
    m = tiny_model(5, **variant)
    # padded batch: the shorter chunk leaves padding positions
    b = nn.make_batch([rand_chunk(rng, 7, 20), rand_chunk(rng, 4, 20)], 12)
    negs = nn.draw_negatives(np.random.default_rng(3), b.items, 20, 4)
    assert fd_check(m, b, negs, False) < 1e-4


def test_embed_shapes_and_locality():
    rng = np.random.default_rng(0)
    m = tiny_model(0)
    c = SequenceChunk(1, [3], [2], [1], [100])
    assert nn.embed(c, m).shape == (2, 8)
    c1 = rand_chunk(rng, 6, 20)
    c2 = SequenceChunk(c1.user, c1.items, c1.reasons.copy(), c1.itypes, c1.timestamps)
    c2.reasons[3] = (c2.reasons[3] + 1) % 4
    diff = np.abs(nn.embed(c1, m) - nn.embed(c2, m)).sum(axis=1)
    assert np.flatnonzero(diff).tolist() == [4]


def test_zero_tables_give_zero_embedding():
    m = tiny_model(0)
    for k in ("item_emb", "user_emb", "reason_emb", "itype_emb"):
        m.params[k][:] = 0
    assert not nn.embed(rand_chunk(np.random.default_rng(1), 5, 20), m).any()


def test_out_of_vocab_raises():
    m = tiny_model(0)
    with pytest.raises(IndexError):
        nn.forward(SequenceChunk(0, [25, 1], [0, 0], [0, 0], [1, 2]), m)
    with pytest.raises(IndexError):
        nn.forward(SequenceChunk(9, [2, 1], [0, 0], [0, 0], [1, 2]), m)


def test_silu_values():
    assert nn.silu(0.0) == 0.0
    assert nn.silu(1.0) == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-12)
    assert nn.silu(1.0) == pytest.approx(0.731059, abs=1e-6)


def test_causality(backend):
    rng = np.random.default_rng(2)
    m = tiny_model(2, depth=2)
    c = rand_chunk(rng, 10, 20)
    base = nn.forward(c, m).hidden
    for p in (3, 9):
        c2 = SequenceChunk(c.user, c.items.copy(), c.reasons.copy(), c.itypes, c.timestamps.copy())
        c2.items[p:] = (c2.items[p:] + 7) % 20
        c2.reasons[p:] = (c2.reasons[p:] + 1) % 4
        c2.timestamps[p:] += 5000
        out = nn.forward(c2, m).hidden
        # event p sits at position p + 1
        assert np.array_equal(out[:p + 1], base[:p + 1])
        assert not np.allclose(out[p + 1:], base[p + 1:])


def test_time_offset_invariance(backend):
    rng = np.random.default_rng(3)
    m = tiny_model(3, depth=2)
    c = rand_chunk(rng, 10, 20)
    shifted = SequenceChunk(c.user, c.items, c.reasons, c.itypes, c.timestamps + 86400 * 365)
    a, b = nn.forward(c, m), nn.forward(shifted, m)
    assert np.array_equal(a.hidden, b.hidden) and np.array_equal(a.item_logits, b.item_logits)


def test_hstu_block_matches_batched_block():
    rng = np.random.default_rng(4)
    m = tiny_model(4)
    c = rand_chunk(rng, 6, 20)
    X = nn.embed(c, m)
    ts = np.r_[c.timestamps[0], c.timestamps]
    out = nn.hstu_block(X, ts, m, 0)
    st = nn.forward_batch(nn.make_batch([c], 12), m)
    assert np.allclose(out + X, st.out[0], atol=1e-14, rtol=0)
    with pytest.raises(ValueError):
        nn.hstu_block(X, ts[::-1], m, 0)


def test_block_split_widths():
    m = HstuModel.init(HstuHyper(d=8, depth=2), 10, 3)
    for l in range(2):
        assert m.params[f"blocks.{l}.w1"].shape == (8, 32)
        assert m.params[f"blocks.{l}.b1"].shape == (32,)


def test_nonfinite_activation_names_block():
    m = tiny_model(0, depth=2)
    m.params["blocks.1.w2"][0, 0] = np.nan
    with pytest.raises(nn.NumericalError, match="block 1"):
        nn.forward(rand_chunk(np.random.default_rng(0), 4, 20), m)


def test_depth_zero_is_normalised_embedding():
    m = tiny_model(0, depth=0)
    c = rand_chunk(np.random.default_rng(8), 5, 20)
    E = nn.embed(c, m)
    mu = E.mean(-1, keepdims=True)
    var = E.var(-1, keepdims=True)
    ref = (E - mu) / np.sqrt(var + 1e-5) * m.params["final_ln_g"] + m.params["final_ln_b"]
    assert np.allclose(nn.forward(c, m).hidden, ref, atol=1e-12)


def test_output_shapes():
    m = tiny_model(0)
    c = rand_chunk(np.random.default_rng(0), 7, 20)
    out = nn.forward(c, m)
    assert out.hidden.shape == (8, 8)
    assert out.item_logits.shape == (8, 20)
    assert out.action_logits.shape == (8, 16)


def test_vocab_relabeling_symmetry():
    rng = np.random.default_rng(11)
    m = tiny_model(11)
    c = rand_chunk(rng, 8, 20)
    perm = rng.permutation(20)
    inv = np.argsort(perm)
    mp = m.copy()
    # new id perm[i] carries old row i
    mp.params["item_emb"] = m.params["item_emb"][inv]
    mp.params["item_head"] = m.params["item_head"][:, inv]
    cp = SequenceChunk(c.user, perm[c.items], c.reasons, c.itypes, c.timestamps)
    a, b = nn.forward(c, m), nn.forward(cp, mp)
    assert np.allclose(b.item_logits[:, perm], a.item_logits, atol=1e-12)
    negs = rng.integers(0, 20, (1, 8, 5))
    ba, bb = nn.make_batch([c], 12), nn.make_batch([cp], 12)
    la = nn.loss_and_grad(ba, m, negatives=negs, need_grad=False)[0].total
    lb = nn.loss_and_grad(bb, mp, negatives=perm[negs], need_grad=False)[0].total
    assert la == pytest.approx(lb, rel=1e-12)


def test_uniform_logits_loss_values():
    m = HstuModel.init(HstuHyper(d=8, depth=1, max_len=12, num_reason=2, num_itype=2), 20, 5)
    m.params["item_head"][:] = 0
    m.params["action_head"][:] = 0
    rng = np.random.default_rng(0)
    c = SequenceChunk(1, rng.integers(0, 20, 6), rng.integers(0, 2, 6), rng.integers(0, 2, 6), np.arange(6))
    v = nn.loss(c, m, 7, rng)
    assert v.item == pytest.approx(math.log(8), abs=1e-12)
    assert v.action == pytest.approx(math.log(4), abs=1e-12)
    assert v.total == pytest.approx(math.log(8) + math.log(4), abs=1e-12)


def test_negatives_exclude_target():
    rng = np.random.default_rng(0)
    t = rng.integers(0, 5, (50, 20))
    negs = nn.draw_negatives(rng, t, 5, 30)
    assert not (negs == t[..., None]).any()
    assert negs.min() >= 0 and negs.max() < 5
    with pytest.raises(ValueError):
        nn.draw_negatives(rng, t, 5, 0)


def test_unused_rows_have_zero_gradient():
    m = tiny_model(0, vocab=30)
    c = SequenceChunk(2, [1, 2, 3, 4], [0, 1, 2, 3], [0, 0, 1, 1], [0, 10, 20, 30])
    b = nn.make_batch([c], 12)
    negs = np.array([[[5, 6], [5, 7], [6, 7], [5, 6]]])
    _, g = nn.loss_and_grad(b, m, negatives=negs)
    assert not g["item_emb"][8:].any()
    assert not g["item_head"][:, 8:].any()
    assert not g["user_emb"][[0, 1, 3, 4]].any()


def test_scaling_loss_scales_gradients():
    rng = np.random.default_rng(6)
    m = tiny_model(6)
    c = rand_chunk(rng, 8, 20)
    g1 = nn.backward(c, m, 5, np.random.default_rng(0))
    g2 = nn.backward(c, m, 5, np.random.default_rng(0), scale=2.0)
    for k in g1:
        assert np.allclose(g2[k], 2 * g1[k], rtol=1e-13, atol=0)


def test_padding_does_not_leak(backend):
    """A padded batch gives the mean of the per-chunk gradients."""
    rng = np.random.default_rng(9)
    m = tiny_model(9, depth=2)
    cs = [rand_chunk(rng, 9, 20), rand_chunk(rng, 3, 20)]
    b = nn.make_batch(cs, 12)
    negs = nn.draw_negatives(rng, b.items, 20, 4)
    _, g = nn.loss_and_grad(b, m, negatives=negs)
    singles = []
    for i, c in enumerate(cs):
        bi = nn.make_batch([c], 12)
        singles.append(nn.loss_and_grad(bi, m, negatives=negs[i:i + 1, :len(c)])[1])
    for k in g:
        assert np.allclose(g[k], 0.5 * (singles[0][k] + singles[1][k]), atol=1e-13), k


def test_backends_agree():
    from driftselect import kernels
    if len(kernels.available_backends()) < 2:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(10)
    m = tiny_model(10, d=16, depth=2, max_len=40)
    b = nn.make_batch([rand_chunk(rng, 40, 20), rand_chunk(rng, 17, 20)], 40)
    negs = nn.draw_negatives(rng, b.items, 20, 6)
    out = {}
    for be in ("python", "compiled"):
        prev = kernels.use_backend(be)
        out[be] = nn.loss_and_grad(b, m, negatives=negs)
        kernels.use_backend(prev)
    assert out["python"][0].total == pytest.approx(out["compiled"][0].total, rel=1e-12)
    for k, v in out["python"][1].items():
        assert np.allclose(v, out["compiled"][1][k], rtol=1e-10, atol=1e-14), k


def test_checkpoint_roundtrip(tmp_path):
    m = tiny_model(3, depth=2)
    m.rng_state = np.random.default_rng(4).bit_generator.state
    m.save(tmp_path / "m.npz")
    r = HstuModel.load(tmp_path / "m.npz")
    assert r.hyper == m.hyper and r.seed == m.seed and r.rng_state == m.rng_state
    assert sorted(r.params) == sorted(m.params)
    for k in m.params:
        assert np.array_equal(r.params[k], m.params[k]) and r.params[k].dtype == np.float64


def test_grow_matches_larger_init():
    h = HstuHyper(d=8, depth=1)
    small = HstuModel.init(h, 10, 3, seed=5).grow(14, 6)
    big = HstuModel.init(h, 14, 6, seed=5)
    for k in ("item_emb", "item_head", "user_emb"):
        assert np.array_equal(small.params[k], big.params[k])


def test_chunk_validation():
    with pytest.raises(ValueError):
        SequenceChunk(0, [1, 2], [0], [0, 0], [1, 2])
    with pytest.raises(ValueError):
        SequenceChunk(0, [1, 2], [0, 0], [0, 0], [5, 2])
    with pytest.raises(ValueError):
        SequenceChunk(0, [], [], [], [])
